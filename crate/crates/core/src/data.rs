//! Dataset ingestion, feature scaling and fold generation.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::DomainBox;
use crate::dual::Task;
use crate::error::{Result, TklError};

/// Which CSV column holds the label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    /// 1-based index; negative values count from the end (`-1` is last).
    Index(i64),
    /// Header name.
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = TklError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(TklError::Config("empty label column".into()));
        }
        match s.parse::<i64>() {
            Ok(0) => Err(TklError::Config("label column index is 1-based; 0 is invalid".into())),
            Ok(i) => Ok(LabelColumn::Index(i)),
            Err(_) => Ok(LabelColumn::Name(s.to_string())),
        }
    }
}

impl std::fmt::Display for LabelColumn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelColumn::Index(i) => write!(f, "{i}"),
            LabelColumn::Name(n) => f.write_str(n),
        }
    }
}

impl LabelColumn {
    /// Resolves to a 0-based column index.
    pub fn resolve(&self, width: usize, header: Option<&[String]>) -> Result<usize> {
        match self {
            LabelColumn::Index(i) => {
                let w = width as i64;
                let idx = if *i > 0 { i - 1 } else { w + i };
                if idx < 0 || idx >= w {
                    return Err(TklError::Config(format!(
                        "label column {i} is out of range for {width} columns"
                    )));
                }
                Ok(idx as usize)
            }
            LabelColumn::Name(name) => header
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| TklError::Config(format!("no column named '{name}' in header"))),
        }
    }
}

/// Parsed numeric table.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn width(&self) -> Option<usize> {
        self.header.as_ref().map(|h| h.len()).or_else(|| self.rows.first().map(|r| r.len()))
    }
}

/// Parses comma-separated numeric text with an optional header line.
///
/// Rows and columns in errors are 1-based file positions.
pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let mut header = None;
    let mut rows = Vec::new();
    let mut width = None;
    let mut first = true;
    for (lineno, line) in text.lines().enumerate() {
        let row_no = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if let Some(col) = fields.iter().position(|f| f.contains('"') || f.contains('\'')) {
            return Err(TklError::Parse { row: row_no, col: col + 1, msg: "quoted fields are not supported".into() });
        }
        if let Some(w) = width {
            if fields.len() != w {
                return Err(TklError::Parse {
                    row: row_no,
                    col: fields.len().min(w) + 1,
                    msg: format!("expected {w} fields, found {}", fields.len()),
                });
            }
        }
        width = Some(fields.len());
        let parsed: Vec<std::result::Result<f64, _>> = fields.iter().map(|f| f.parse::<f64>()).collect();
        if first && parsed.iter().any(|p| p.is_err()) {
            header = Some(fields.iter().map(|f| f.to_string()).collect());
            first = false;
            continue;
        }
        first = false;
        let mut row = Vec::with_capacity(fields.len());
        for (col, (p, raw)) in parsed.into_iter().zip(&fields).enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(_) => {
                    return Err(TklError::Parse { row: row_no, col: col + 1, msg: format!("non-finite value '{raw}'") })
                }
                Err(_) => {
                    return Err(TklError::Parse { row: row_no, col: col + 1, msg: format!("not a number: '{raw}'") })
                }
            }
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

/// Per-feature affine map onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Scaler {
    pub fn n(&self) -> usize {
        self.mins.len()
    }

    /// Scales one value of feature `j` without clamping.
    #[inline]
    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[j], self.maxs[j]);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    }
}

pub fn fit_scaler(x: ArrayView2<f64>) -> Scaler {
    let n = x.ncols();
    let mut mins = vec![f64::INFINITY; n];
    let mut maxs = vec![f64::NEG_INFINITY; n];
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            mins[j] = mins[j].min(v);
            maxs[j] = maxs[j].max(v);
        }
    }
    Scaler { mins, maxs }
}

/// Scaled copy of `x`, clamped to `[0, 1]`, and the number of clamped
/// entries.
pub fn apply_scaler(scaler: &Scaler, x: ArrayView2<f64>) -> Result<(Array2<f64>, usize)> {
    if x.ncols() != scaler.n() {
        return Err(TklError::DimensionMismatch { expected: scaler.n(), got: x.ncols() });
    }
    let mut clamped = 0;
    let mut out = Array2::zeros(x.dim());
    for ((i, j), &v) in x.indexed_iter() {
        let s = scaler.scale_value(j, v);
        let c = s.clamp(0.0, 1.0);
        if c != s {
            clamped += 1;
        }
        out[[i, j]] = c;
    }
    Ok((out, clamped))
}

/// `[-delta, 1 + delta]^n` in scaled coordinates.
pub fn make_domain(scaler: &Scaler, delta: f64) -> Result<DomainBox> {
    DomainBox::unit_with_margin(scaler.n(), delta)
}

/// Features, labels and the scaler fitted to the features.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Unscaled features.
    pub x_raw: Array2<f64>,
    /// Features scaled into `[0, 1]` by `scaler`.
    pub x: Array2<f64>,
    /// `+-1` labels or real targets.
    pub y: Vec<f64>,
    pub task: Task,
    pub feature_names: Option<Vec<String>>,
    pub scaler: Scaler,
    /// Raw label values mapped to `-1` and `+1` (classification only).
    pub label_values: Option<[f64; 2]>,
}

impl Dataset {
    pub fn from_raw(
        x_raw: Array2<f64>,
        y: Vec<f64>,
        task: Task,
        feature_names: Option<Vec<String>>,
        label_values: Option<[f64; 2]>,
    ) -> Result<Self> {
        if x_raw.nrows() == 0 {
            return Err(TklError::EmptyFile("dataset has no rows".into()));
        }
        if x_raw.nrows() != y.len() {
            return Err(TklError::DimensionMismatch { expected: x_raw.nrows(), got: y.len() });
        }
        if x_raw.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(TklError::Config("dataset contains non-finite values".into()));
        }
        if task == Task::Classification && y.iter().any(|v| *v != 1.0 && *v != -1.0) {
            return Err(TklError::Config("classification labels must be +-1".into()));
        }
        let scaler = fit_scaler(x_raw.view());
        let (x, _) = apply_scaler(&scaler, x_raw.view())?;
        Ok(Dataset { x_raw, x, y, task, feature_names, scaler, label_values })
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx`, with the scaler refitted on those rows.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let x_raw = self.x_raw.select(Axis(0), idx);
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Dataset::from_raw(x_raw, y, self.task, self.feature_names.clone(), self.label_values)
    }

    /// Maps `+-1` back to the raw label values when known.
    pub fn raw_label(&self, label: f64) -> f64 {
        raw_label(self.label_values, label)
    }
}

pub(crate) fn raw_label(values: Option<[f64; 2]>, label: f64) -> f64 {
    match values {
        Some([neg, pos]) => {
            if label > 0.0 {
                pos
            } else {
                neg
            }
        }
        None => label,
    }
}

/// Builds a dataset from a parsed table.
pub fn dataset_from_table(table: CsvTable, label: &LabelColumn, task: Task) -> Result<Dataset> {
    if table.rows.is_empty() {
        return Err(TklError::EmptyFile("no data rows".into()));
    }
    let width = table.width().expect("nonempty");
    if width < 2 {
        return Err(TklError::Config("need at least one feature column and a label column".into()));
    }
    let label_idx = label.resolve(width, table.header.as_deref())?;
    let m = table.rows.len();
    let n = width - 1;
    let mut x = Array2::zeros((m, n));
    let mut y = Vec::with_capacity(m);
    for (i, row) in table.rows.iter().enumerate() {
        let mut col = 0;
        for (j, &v) in row.iter().enumerate() {
            if j == label_idx {
                y.push(v);
            } else {
                x[[i, col]] = v;
                col += 1;
            }
        }
    }
    let feature_names = table
        .header
        .map(|h| h.into_iter().enumerate().filter(|(j, _)| *j != label_idx).map(|(_, s)| s).collect());

    let (y, label_values) = match task {
        Task::Regression => (y, None),
        Task::Classification => {
            let mut distinct: Vec<f64> = Vec::new();
            for &v in &y {
                if !distinct.contains(&v) {
                    distinct.push(v);
                }
            }
            distinct.sort_by(f64::total_cmp);
            match distinct.len() {
                1 => return Err(TklError::SingleClass { label: distinct[0] }),
                2 => {}
                found => return Err(TklError::MoreThanTwoClasses { found }),
            }
            let mapped = y.iter().map(|&v| if v == distinct[0] { -1.0 } else { 1.0 }).collect();
            (mapped, Some([distinct[0], distinct[1]]))
        }
    };
    Dataset::from_raw(x, y, task, feature_names, label_values)
}

pub fn load_csv(path: &Path, label: &LabelColumn, task: Task) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(TklError::EmptyFile(path.display().to_string()));
    }
    dataset_from_table(parse_csv(&text)?, label, task)
}

/// Feature-only table for prediction queries. An empty file yields zero rows.
pub fn load_features_csv(path: &Path, drop: Option<&LabelColumn>) -> Result<(Option<Vec<String>>, Array2<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let table = parse_csv(&text)?;
    let width = table.width().unwrap_or(0);
    let drop_idx = match (drop, width) {
        (Some(col), w) if w > 0 => Some(col.resolve(w, table.header.as_deref())?),
        _ => None,
    };
    let n = width - usize::from(drop_idx.is_some());
    let mut x = Array2::zeros((table.rows.len(), n));
    for (i, row) in table.rows.iter().enumerate() {
        let mut col = 0;
        for (j, &v) in row.iter().enumerate() {
            if Some(j) != drop_idx {
                x[[i, col]] = v;
                col += 1;
            }
        }
    }
    let header = table
        .header
        .map(|h| h.into_iter().enumerate().filter(|(j, _)| Some(*j) != drop_idx).map(|(_, s)| s).collect());
    Ok((header, x))
}

/// One train/test split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded k-fold partition. With `stratify`, indices of each label are
/// dealt round-robin so every fold keeps the class ratio within one sample.
pub fn kfold(m: usize, folds: usize, seed: u64, stratify: Option<&[f64]>) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(TklError::Config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > m {
        return Err(TklError::FoldsExceedSamples { folds, samples: m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); folds];
    match stratify {
        None => {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng);
            for (pos, i) in idx.into_iter().enumerate() {
                tests[pos % folds].push(i);
            }
        }
        Some(labels) => {
            assert_eq!(labels.len(), m, "one label per sample");
            let mut classes: Vec<f64> = Vec::new();
            for &v in labels {
                if !classes.contains(&v) {
                    classes.push(v);
                }
            }
            classes.sort_by(f64::total_cmp);
            let mut next = 0;
            for class in classes {
                let mut idx: Vec<usize> = (0..m).filter(|&i| labels[i] == class).collect();
                idx.shuffle(&mut rng);
                for i in idx {
                    tests[next].push(i);
                    next = (next + 1) % folds;
                }
            }
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..m).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn label_mapping() {
        let f = write_tmp("0.2,1\n0.8,0\n0.5,1");
        let ds = load_csv(f.path(), &LabelColumn::Index(2), Task::Classification).unwrap();
        assert_eq!(ds.m(), 3);
        assert_eq!(ds.n(), 1);
        assert_eq!(ds.y, vec![1.0, -1.0, 1.0]);
        assert_eq!(ds.label_values, Some([0.0, 1.0]));
        assert_eq!(ds.raw_label(-1.0), 0.0);
    }

    #[test]
    fn header_skipped() {
        let f = write_tmp("x,y\n0.1,2.0\n0.4,3.0\n");
        let ds = load_csv(f.path(), &"y".parse().unwrap(), Task::Regression).unwrap();
        assert_eq!(ds.m(), 2);
        assert_eq!(ds.feature_names, Some(vec!["x".to_string()]));
        assert_eq!(ds.y, vec![2.0, 3.0]);
    }

    #[test]
    fn nan_rejected_with_location() {
        let f = write_tmp("0.1,2.0\n0.4,NaN\n");
        match load_csv(f.path(), &LabelColumn::Index(-1), Task::Regression) {
            Err(TklError::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn other_errors() {
        let f = write_tmp("  \n");
        assert!(matches!(
            load_csv(f.path(), &LabelColumn::Index(-1), Task::Regression),
            Err(TklError::EmptyFile(_))
        ));
        let f = write_tmp("1,0\n2,1\n3,2\n");
        assert!(matches!(
            load_csv(f.path(), &LabelColumn::Index(-1), Task::Classification),
            Err(TklError::MoreThanTwoClasses { found: 3 })
        ));
        let f = write_tmp("1,1\n2,1\n");
        assert!(matches!(
            load_csv(f.path(), &LabelColumn::Index(-1), Task::Classification),
            Err(TklError::SingleClass { .. })
        ));
        let f = write_tmp("1,\"a\"\n");
        assert!(matches!(parse_csv(&std::fs::read_to_string(f.path()).unwrap()), Err(TklError::Parse { .. })));
        assert!(matches!(parse_csv("1,2\n3\n"), Err(TklError::Parse { row: 2, .. })));
    }

    #[test]
    fn scaler_examples() {
        let x = array![[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]];
        let s = fit_scaler(x.view());
        let (scaled, clamped) = apply_scaler(&s, x.view()).unwrap();
        assert_eq!(scaled.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(scaled.column(1).to_vec(), vec![0.5, 0.5, 0.5]);
        assert_eq!(clamped, 0);
        let (unseen, clamped) = apply_scaler(&s, array![[8.0, 5.0]].view()).unwrap();
        assert_eq!(unseen[[0, 0]], 1.0);
        assert_eq!(clamped, 1);
        assert!(apply_scaler(&s, array![[1.0]].view()).is_err());
    }

    #[test]
    fn domain_from_scaler() {
        let s = Scaler { mins: vec![0.0; 3], maxs: vec![1.0; 3] };
        let dom = make_domain(&s, 0.1).unwrap();
        assert_eq!(dom.a(), &[-0.1; 3]);
        assert_eq!(dom.b(), &[1.1; 3]);
        assert!(make_domain(&s, 0.0).is_err());
    }

    #[test]
    fn kfold_plain() {
        let folds = kfold(10, 5, 42, None).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
            assert_eq!(f.train.len() + f.test.len(), 10);
        }
        assert_eq!(folds, kfold(10, 5, 42, None).unwrap());
        assert_ne!(folds, kfold(10, 5, 43, None).unwrap());
    }

    #[test]
    fn kfold_stratified() {
        let labels = [1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0];
        let folds = kfold(10, 2, 1, Some(&labels)).unwrap();
        for f in &folds {
            let pos = f.test.iter().filter(|&&i| labels[i] > 0.0).count();
            assert_eq!((pos, f.test.len() - pos), (3, 2));
        }
    }

    #[test]
    fn kfold_errors() {
        assert!(matches!(kfold(4, 5, 0, None), Err(TklError::FoldsExceedSamples { folds: 5, samples: 4 })));
        assert!(kfold(4, 1, 0, None).is_err());
    }

    #[test]
    fn label_column_parsing() {
        assert_eq!("-1".parse::<LabelColumn>().unwrap(), LabelColumn::Index(-1));
        assert_eq!("price".parse::<LabelColumn>().unwrap(), LabelColumn::Name("price".into()));
        assert!("0".parse::<LabelColumn>().is_err());
        assert_eq!(LabelColumn::Index(-1).resolve(3, None).unwrap(), 2);
        assert_eq!(LabelColumn::Index(1).resolve(3, None).unwrap(), 0);
        assert!(LabelColumn::Index(4).resolve(3, None).is_err());
    }

    #[test]
    fn feature_loader_handles_empty_and_drop() {
        let f = write_tmp("");
        let (h, x) = load_features_csv(f.path(), None).unwrap();
        assert!(h.is_none());
        assert_eq!(x.nrows(), 0);
        let f = write_tmp("a,b,c\n1,2,3\n");
        let (h, x) = load_features_csv(f.path(), Some(&LabelColumn::Index(2))).unwrap();
        assert_eq!(h.unwrap(), vec!["a".to_string(), "c".to_string()]);
        assert_eq!(x, array![[1.0, 3.0]]);
    }
}
