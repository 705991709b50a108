use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tkl_core::cv::cross_validate;
use tkl_core::data::{load_csv, load_features_csv, parse_csv};
use tkl_core::model_io::{load_model, save_model};
use tkl_core::oracle::{self, kernel_tolerance, OPT_P_REFERENCE_TOL, OPT_P_SAMPLE_SLACK};
use tkl_core::train::{score, sign};
use tkl_core::{synth, train, LabelColumn, Task, TkModel, TrainConfig};

use crate::settings::{env_key, flag, key, Key, Settings};
use crate::{CmdError, CmdResult, EXIT_NON_CONVERGENCE, EXIT_OK, EXIT_ORACLE};

pub(crate) struct Subcommand {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
    pub run: fn(Settings, &mut dyn Write, &mut dyn Write) -> CmdResult,
}

pub(crate) const SUBCOMMANDS: [Subcommand; 5] = [
    Subcommand { name: "train", about: "Train a model and write it to a file", keys: &TRAIN_KEYS, run: cmd_train },
    Subcommand { name: "predict", about: "Predict with a saved model", keys: &PREDICT_KEYS, run: cmd_predict },
    Subcommand { name: "cv", about: "Grid search over C and delta by k-fold cross-validation", keys: &CV_KEYS, run: cmd_cv },
    Subcommand {
        name: "oracle-check",
        about: "Check the closed-form kernel and the kernel step against independent oracles",
        keys: &ORACLE_KEYS,
        run: cmd_oracle_check,
    },
    Subcommand { name: "bench", about: "Time training on synthetic data of growing size", keys: &BENCH_KEYS, run: cmd_bench },
];

const THREADS: Key = env_key("threads", "TKL_THREADS", "maximum worker threads (falls back to TKL_THREADS)");
const TASK: Key = key("task", Some("classification"), "classification or regression");
const DEGREE: Key = key("d", Some("1"), "polynomial degree of the monomial basis");
const C: Key = key("C", Some("1"), "SVM regularization constant");
const DELTA: Key = key("delta", Some("0.1"), "domain margin around the scaled unit box");
const EPS: Key = key("eps", Some("0.1"), "regression tube half-width");
const GAP_TOL: Key = key("gap-tol", Some("1e-2"), "relative duality-gap tolerance");
const MAX_ITERS: Key = key("max-iters", Some("100"), "maximum outer iterations");
const SMO_TOL: Key = key("smo-tol", Some("1e-3"), "SMO KKT tolerance");
const SEED: Key = key("seed", Some("0"), "random seed");
const DATA: Key = key("data", None, "CSV file with features and a label column");
const LABEL: Key = key("label", Some("-1"), "label column: 1-based index (negative counts from the end) or header name");

const TRAIN_KEYS: [Key; 13] = [
    DATA,
    LABEL,
    TASK,
    DEGREE,
    C,
    DELTA,
    EPS,
    GAP_TOL,
    MAX_ITERS,
    SMO_TOL,
    SEED,
    key("out", None, "model file to write"),
    THREADS,
];

const PREDICT_KEYS: [Key; 5] = [
    key("model", None, "model file"),
    key("data", None, "CSV file of query points"),
    key("label", None, "column to drop from the query file (for files that still carry labels)"),
    key("out", None, "predictions CSV (default: standard output)"),
    THREADS,
];

const CV_KEYS: [Key; 18] = [
    DATA,
    LABEL,
    TASK,
    DEGREE,
    key("C-grid", Some("0.1,1,10,100"), "comma-separated C values"),
    key("delta-grid", Some("0.05,0.1,0.5"), "comma-separated delta values"),
    key("folds", Some("5"), "number of folds"),
    EPS,
    GAP_TOL,
    MAX_ITERS,
    SMO_TOL,
    SEED,
    flag("refit", "retrain on all data with the selected cell"),
    key("out", None, "model file for --refit"),
    key("test", None, "held-out CSV scored by the refitted model"),
    THREADS,
    C,
    DELTA,
];

const ORACLE_KEYS: [Key; 8] = [
    key("d", Some("2"), "largest degree in the kernel suite (at most 2)"),
    key("n", Some("2"), "largest dimension in the kernel suite (at most 2)"),
    key("cases", Some("50"), "kernel suite cases"),
    key("grid", None, "quadrature cells per axis (default: 1000 for n=1, 400 for n=2)"),
    key("opt-cases", Some("50"), "kernel-step suite cases"),
    key("samples", Some("10000"), "random feasible matrices per kernel-step case"),
    SEED,
    THREADS,
];

const BENCH_KEYS: [Key; 12] = [
    key("m", Some("250,500,1000,2000"), "comma-separated sample counts"),
    key("n", Some("4"), "feature dimension"),
    TASK,
    DEGREE,
    C,
    DELTA,
    EPS,
    GAP_TOL,
    key("max-iters", Some("10"), "maximum outer iterations per run"),
    SMO_TOL,
    SEED,
    THREADS,
];

/// Checks the collected settings, caps the global worker pool at
/// `--threads`, then runs `f`. The pool can be sized once per process, so
/// later calls in the same process keep the first size.
fn with_threads(s: &mut Settings, f: impl FnOnce() -> CmdResult) -> CmdResult {
    let threads: usize = s.get("threads").unwrap_or(0);
    s.finish().map_err(CmdError::config)?;
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    f()
}

fn train_config(s: &mut Settings) -> TrainConfig {
    let task: Task = s.get("task").unwrap_or(Task::Classification);
    let mut cfg = TrainConfig::new(task);
    if let Some(v) = s.get("d") {
        cfg.d = v;
    }
    for (k, slot) in [("eps", &mut cfg.eps_tube), ("gap-tol", &mut cfg.gap_tol), ("smo-tol", &mut cfg.smo_tol)] {
        if let Some(v) = s.get(k) {
            *slot = v;
        }
    }
    if let Some(v) = s.get("C") {
        cfg.c = v;
    }
    if let Some(v) = s.get("delta") {
        cfg.delta = v;
    }
    if let Some(v) = s.get("max-iters") {
        cfg.max_outer_iters = v;
    }
    if let Some(v) = s.get("seed") {
        cfg.seed = v;
    }
    cfg
}

fn validate_config(s: &mut Settings, cfg: &TrainConfig) {
    if let Err(e) = cfg.validate() {
        s.error(e.to_string());
    }
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "tsa",
        Task::Regression => "mse",
    }
}

/// Writes `contents` to `<path>.partial`, then renames it to `path`.
fn write_atomically(path: &Path, contents: &str) -> std::io::Result<()> {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    let tmp = path.with_file_name(name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

fn train_score(model: &TkModel, data: &tkl_core::Dataset) -> Result<f64, CmdError> {
    let pred = model.predict(data.x_raw.view())?;
    Ok(score(model.task(), &pred, &data.y))
}

fn cmd_train(mut s: Settings, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let data: Option<PathBuf> = s.required_path("data");
    let label: Option<LabelColumn> = s.get("label");
    let model_path = s.required_path("out");
    let cfg = train_config(&mut s);
    validate_config(&mut s, &cfg);
    write!(err, "{}", s.echo())?;
    with_threads(&mut s, || {
        let (data, label, model_path) = (data.expect("checked"), label.expect("checked"), model_path.expect("checked"));
        let dataset = load_csv(&data, &label, cfg.task)?;
        let start = Instant::now();
        let model = train(&dataset, &cfg)?;
        let wall = start.elapsed().as_secs_f64();
        save_model(&model, &model_path)?;
        let fit = train_score(&model, &dataset)?;
        let last = model.final_record();
        writeln!(
            out,
            "metrics=1 command=train task={} converged={} iterations={} gap={:e} rel_gap={:e} opt_a={} wall_s={:.6} train_{}={} m={} support={}",
            cfg.task,
            model.converged,
            last.iteration,
            last.gap,
            last.relative_gap(),
            last.opt_a,
            wall,
            metric_name(cfg.task),
            fit,
            dataset.m(),
            model.alpha_tilde.len(),
        )?;
        if model.converged {
            Ok(EXIT_OK)
        } else {
            writeln!(
                err,
                "warning: duality gap {:e} above tolerance after {} iterations; model written and flagged as not converged",
                last.relative_gap(),
                last.iteration
            )?;
            Ok(EXIT_NON_CONVERGENCE)
        }
    })
}

fn cmd_predict(mut s: Settings, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let model_path = s.required_path("model");
    let data = s.required_path("data");
    let drop: Option<LabelColumn> = s.get("label");
    let out_path = s.path("out");
    write!(err, "{}", s.echo())?;
    with_threads(&mut s, || {
        let model = load_model(&model_path.expect("checked"))?;
        let (_, queries) = load_features_csv(&data.expect("checked"), drop.as_ref())?;
        let classification = model.task() == Task::Classification;
        let mut text = String::from(if classification { "prediction,margin\n" } else { "prediction\n" });
        if queries.nrows() > 0 {
            if queries.ncols() != model.n() {
                return Err(CmdError::from(tkl_core::TklError::DimensionMismatch {
                    expected: model.n(),
                    got: queries.ncols(),
                }));
            }
            let dec = model.decision_function(queries.view())?;
            if dec.clamped > 0 {
                writeln!(err, "warning: {} query coordinates were outside the training range and were clamped", dec.clamped)?;
            }
            for f in dec.values {
                if classification {
                    text.push_str(&format!("{},{}\n", model.raw_label(sign(f)), f));
                } else {
                    text.push_str(&format!("{f}\n"));
                }
            }
        }
        match out_path {
            Some(p) => write_atomically(&p, &text)?,
            None => out.write_all(text.as_bytes())?,
        }
        Ok(EXIT_OK)
    })
}

fn cmd_cv(mut s: Settings, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let data = s.required_path("data");
    let label: Option<LabelColumn> = s.get("label");
    let c_grid: Option<Vec<f64>> = s.list("C-grid");
    let delta_grid: Option<Vec<f64>> = s.list("delta-grid");
    let folds: Option<usize> = s.get("folds");
    let refit = s.flag("refit");
    let model_path = s.path("out");
    let test_path = s.path("test");
    if (model_path.is_some() || test_path.is_some()) && !refit {
        s.error("--out and --test require --refit");
    }
    let cfg = train_config(&mut s);
    validate_config(&mut s, &cfg);
    write!(err, "{}", s.echo())?;
    with_threads(&mut s, || {
        let label = label.expect("checked");
        let dataset = load_csv(&data.expect("checked"), &label, cfg.task)?;
        let start = Instant::now();
        let report = cross_validate(
            &dataset,
            &c_grid.expect("checked"),
            &delta_grid.expect("checked"),
            folds.expect("checked"),
            &cfg,
        )?;
        let metric = metric_name(cfg.task);
        writeln!(out, "{:>10} {:>10}  {metric} (mean±std over {} folds)", "C", "delta", report.folds)?;
        for cell in &report.cells {
            match &cell.error {
                None => writeln!(out, "{:>10} {:>10}  {:.6}±{:.6}", cell.c, cell.delta, cell.mean, cell.std)?,
                Some(e) => writeln!(out, "{:>10} {:>10}  failed: {e}", cell.c, cell.delta)?,
            }
        }
        let best = report.best_cell();
        if best.failed() {
            return Err(CmdError { code: crate::EXIT_FAILURE, msg: "every grid cell failed".into() });
        }
        writeln!(out, "selected C={} delta={} cv_{metric}={:.6}±{:.6}", best.c, best.delta, best.mean, best.std)?;
        let mut extra = String::new();
        let mut code = EXIT_OK;
        if refit {
            let mut full = cfg.clone();
            full.c = best.c;
            full.delta = best.delta;
            let model = train(&dataset, &full)?;
            if let Some(p) = &model_path {
                save_model(&model, p)?;
            }
            if !model.converged {
                code = EXIT_NON_CONVERGENCE;
            }
            extra.push_str(&format!(" refit_converged={} train_{metric}={}", model.converged, train_score(&model, &dataset)?));
            if let Some(p) = &test_path {
                let (test_x, truth) = load_labelled_raw(p, &label)?;
                let pred: Vec<f64> = model.predict(test_x.view())?.into_iter().map(|v| model.raw_label(v)).collect();
                extra.push_str(&format!(" test_{metric}={}", score(cfg.task, &pred, &truth)));
            }
        }
        writeln!(
            out,
            "metrics=1 command=cv task={} folds={} cells={} best_C={} best_delta={} cv_{metric}_mean={} cv_{metric}_std={} wall_s={:.6}{extra}",
            cfg.task,
            report.folds,
            report.cells.len(),
            best.c,
            best.delta,
            best.mean,
            best.std,
            start.elapsed().as_secs_f64(),
        )?;
        Ok(code)
    })
}

/// Features and raw label values of a labelled CSV, without mapping labels.
fn load_labelled_raw(path: &Path, label: &LabelColumn) -> Result<(ndarray::Array2<f64>, Vec<f64>), CmdError> {
    let text = fs::read_to_string(path).map_err(tkl_core::TklError::from)?;
    let table = parse_csv(&text)?;
    let width = table.width().unwrap_or(0);
    let col = label.resolve(width, table.header.as_deref())?;
    let raw = ndarray::Array2::from_shape_fn((table.rows.len(), width.saturating_sub(1)), |(i, j)| {
        table.rows[i][if j < col { j } else { j + 1 }]
    });
    let y = table.rows.iter().map(|r| r[col]).collect();
    Ok((raw, y))
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

fn cmd_oracle_check(mut s: Settings, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let max_d: usize = s.get("d").unwrap_or(0);
    let max_n: usize = s.get("n").unwrap_or(1);
    let cases: usize = s.get("cases").unwrap_or(0);
    let grid: Option<usize> = s.get("grid");
    let opt_cases: usize = s.get("opt-cases").unwrap_or(0);
    let samples: usize = s.get("samples").unwrap_or(0);
    let seed: u64 = s.get("seed").unwrap_or(0);
    if max_d > 2 {
        s.error(format!("--d {max_d}: at most 2 is supported"));
    }
    if !(1..=2).contains(&max_n) {
        s.error(format!("--n {max_n}: must be 1 or 2"));
    }
    if matches!(grid, Some(g) if g < 2) {
        s.error("--grid must be at least 2");
    }
    write!(err, "{}", s.echo())?;
    with_threads(&mut s, || {
        let kernel = oracle::kernel_oracle_suite(seed, cases, max_d, max_n, grid)?;
        let opt = oracle::opt_p_oracle_suite(seed, opt_cases, samples)?;
        for n in 1..=max_n {
            let g = grid.unwrap_or_else(|| oracle::default_grid(n));
            writeln!(
                out,
                "kernel n={n} grid={g} cases={} max_rel_err={:e} tol={:e}",
                kernel.cases.iter().filter(|c| c.n == n).count(),
                kernel.max_rel_err(n),
                kernel_tolerance(n)
            )?;
        }
        writeln!(
            out,
            "opt_p cases={} samples={samples} max_sample_violation={:e} slack={OPT_P_SAMPLE_SLACK:e} max_reference_rel_diff={:e} tol={OPT_P_REFERENCE_TOL:e}",
            opt.cases.len(),
            opt.max_sample_violation(),
            opt.max_reference_rel_diff()
        )?;
        let mut ok = true;
        if !kernel.passes() {
            ok = false;
            let w = kernel.worst().expect("failing case exists");
            writeln!(
                out,
                "VIOLATION kernel n={} d={} grid={} x={} y={} closed={:e} quadrature={:e} rel_err={:e}",
                w.n,
                w.d,
                w.grid,
                fmt_vec(&w.x),
                fmt_vec(&w.y),
                w.closed,
                w.quadrature,
                w.rel_err()
            )?;
            for row in w.p.rows() {
                writeln!(out, "  P {}", fmt_vec(row.as_slice().expect("contiguous")))?;
            }
        }
        if !opt.passes() {
            ok = false;
            let w = opt.worst().expect("failing case exists");
            writeln!(
                out,
                "VIOLATION opt_p n={} d={} qp={} analytic={:e} sampled_min={:e} reference={:e}",
                w.n, w.d, w.qp, w.analytic, w.sampled_min, w.reference
            )?;
            for row in w.m.rows() {
                writeln!(out, "  M {}", fmt_vec(row.as_slice().expect("contiguous")))?;
            }
        }
        writeln!(
            out,
            "metrics=1 command=oracle-check passed={ok} kernel_cases={} kernel_max_rel_err={:e} opt_p_cases={} opt_p_max_reference_rel_diff={:e}",
            kernel.cases.len(),
            kernel.cases.iter().map(|c| c.rel_err()).fold(0.0, f64::max),
            opt.cases.len(),
            opt.max_reference_rel_diff()
        )?;
        Ok(if ok { EXIT_OK } else { EXIT_ORACLE })
    })
}

/// Least-squares slope of `log t` against `log m`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(m, t)| (m.ln(), t.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn cmd_bench(mut s: Settings, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let sizes: Option<Vec<usize>> = s.list("m");
    let n: usize = s.get("n").unwrap_or(1);
    if n == 0 {
        s.error("--n must be at least 1");
    }
    if let Some(sizes) = &sizes {
        if sizes.iter().any(|&m| m < 2) {
            s.error("--m values must be at least 2");
        }
    }
    let cfg = train_config(&mut s);
    validate_config(&mut s, &cfg);
    write!(err, "{}", s.echo())?;
    with_threads(&mut s, || {
        writeln!(out, "{:>8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}", "m", "iters", "total_s", "qp_s", "assembly_s", "eigen_s", "converged")?;
        let mut points = Vec::new();
        let mut last_split = None;
        for &m in &sizes.expect("checked") {
            let data = synth::benchmark(cfg.task, m, n, cfg.seed)?;
            let start = Instant::now();
            let model = train(&data, &cfg)?;
            let wall = start.elapsed().as_secs_f64();
            let t = &model.timings;
            writeln!(
                out,
                "{:>8} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                m,
                model.final_record().iteration,
                wall,
                t.qp.as_secs_f64(),
                t.assembly.as_secs_f64(),
                t.eigen.as_secs_f64(),
                model.converged
            )?;
            points.push((m as f64, wall));
            last_split = Some((m, t.qp.as_secs_f64(), t.eigen.as_secs_f64()));
        }
        let slope = loglog_slope(&points);
        match slope {
            Some(v) => writeln!(out, "slope={v:.4}")?,
            None => writeln!(out, "slope omitted: needs at least two distinct sizes")?,
        }
        let mut line = format!("metrics=1 command=bench task={} n={n} d={} sizes={}", cfg.task, cfg.d, points.len());
        if let Some(v) = slope {
            line.push_str(&format!(" slope={v}"));
        }
        if let Some((m, qp, eigen)) = last_split {
            line.push_str(&format!(" largest_m={m} qp_s={qp} eigen_s={eigen} qp_over_eigen={}", qp / eigen.max(f64::MIN_POSITIVE)));
        }
        writeln!(out, "{line}")?;
        Ok(EXIT_OK)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [100.0, 200.0, 400.0].iter().map(|&m: &f64| (m, 3.0 * m.powf(2.2))).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.2).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
        assert_eq!(loglog_slope(&[(5.0, 1.0), (5.0, 2.0)]), None);
    }

    #[test]
    fn keys_are_unique() {
        for sc in &SUBCOMMANDS {
            let mut names: Vec<_> = sc.keys.iter().map(|k| k.name).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), sc.keys.len(), "{}", sc.name);
        }
    }

    #[test]
    fn atomic_write_leaves_no_partial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomically(&p, "a\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a\n");
        assert!(!dir.path().join("x.csv.partial").exists());
    }
}
