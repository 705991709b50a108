//! Grid search over `(C, delta)` by k-fold cross-validation.

use crate::data::{kfold, Dataset};
use crate::dual::Task;
use crate::error::{Result, TklError};
use crate::train::{score, train, TrainConfig};

/// Scores of one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CvCell {
    pub c: f64,
    pub delta: f64,
    /// Per-fold accuracy (classification) or MSE (regression); `NaN` for a
    /// fold whose training failed.
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub error: Option<String>,
}

impl CvCell {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub task: Task,
    pub folds: usize,
    pub cells: Vec<CvCell>,
    /// Index into `cells` of the selected cell.
    pub best: usize,
}

impl CvReport {
    pub fn best_cell(&self) -> &CvCell {
        &self.cells[self.best]
    }
}

/// Evaluates every `(C, delta)` pair on the same seeded folds (stratified for
/// classification) and selects the best mean score. Ties go to the smaller
/// `C`, then the smaller `delta`; failed cells rank last.
pub fn cross_validate(
    dataset: &Dataset,
    c_grid: &[f64],
    delta_grid: &[f64],
    folds: usize,
    config: &TrainConfig,
) -> Result<CvReport> {
    if c_grid.is_empty() || delta_grid.is_empty() {
        return Err(TklError::Config("cross-validation grid is empty".into()));
    }
    for &c in c_grid {
        if !(c > 0.0) || !c.is_finite() {
            return Err(TklError::Config(format!("grid value C = {c} must be > 0")));
        }
    }
    for &d in delta_grid {
        if !(d > 0.0) || !d.is_finite() {
            return Err(TklError::Config(format!("grid value delta = {d} must be > 0")));
        }
    }
    config.validate()?;
    let stratify = (dataset.task == Task::Classification).then_some(dataset.y.as_slice());
    let splits = kfold(dataset.m(), folds, config.seed, stratify)?;

    let mut cells = Vec::new();
    for &c in c_grid {
        for &delta in delta_grid {
            let mut cfg = config.clone();
            cfg.c = c;
            cfg.delta = delta;
            let mut fold_scores = Vec::with_capacity(splits.len());
            let mut error = None;
            for split in &splits {
                let outcome = dataset.subset(&split.train).and_then(|train_set| {
                    let model = train(&train_set, &cfg)?;
                    let test_x = dataset.x_raw.select(ndarray::Axis(0), &split.test);
                    let pred = model.predict(test_x.view())?;
                    let truth: Vec<f64> = split.test.iter().map(|&i| dataset.y[i]).collect();
                    Ok(score(dataset.task, &pred, &truth))
                });
                match outcome {
                    Ok(s) => fold_scores.push(s),
                    Err(e) => {
                        fold_scores.push(f64::NAN);
                        error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            let (mean, std) = if error.is_some() { (f64::NAN, f64::NAN) } else { mean_std(&fold_scores) };
            cells.push(CvCell { c, delta, fold_scores, mean, std, error });
        }
    }

    let better = |a: &CvCell, b: &CvCell| -> bool {
        match (a.failed(), b.failed()) {
            (true, _) => false,
            (false, true) => true,
            (false, false) => match dataset.task {
                Task::Classification => a.mean > b.mean,
                Task::Regression => a.mean < b.mean,
            },
        }
    };
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&i, &j| cells[i].c.total_cmp(&cells[j].c).then(cells[i].delta.total_cmp(&cells[j].delta)));
    let mut best = order[0];
    for &i in &order[1..] {
        if better(&cells[i], &cells[best]) {
            best = i;
        }
    }
    Ok(CvReport { task: dataset.task, folds, cells, best })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
