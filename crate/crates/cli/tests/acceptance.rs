//! End-to-end acceptance checks, run sequentially so timings are not skewed
//! by other tests. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any gating criterion fails.
//!
//! Set `TKL_AIRFOIL` to a local copy of the UCI airfoil self-noise file to
//! include the optional regression benchmark run.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tkl_core::cv::cross_validate;
use tkl_core::data::{kfold, parse_csv, dataset_from_table};
use tkl_core::dual::solve_dual;
use tkl_core::kernel::random_psd;
use tkl_core::model_io::{load_model, save_model};
use tkl_core::oracle::{dual_reference, kernel_oracle_suite, opt_p_oracle_suite};
use tkl_core::train::score;
use tkl_core::{
    gram_matrix, synth, train, Dataset, DomainBox, DualProblem, KernelParams, LabelColumn, SmoParams, Task, TkBasis,
    TkModel, TrainConfig,
};

struct Outcome {
    pass: bool,
    gating: bool,
    detail: String,
}

impl Outcome {
    fn gate(pass: bool, detail: String) -> Self {
        Outcome { pass, gating: true, detail }
    }
}

fn lambda_range(a: &Array2<f64>) -> (f64, f64) {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let ev = m.symmetric_eigen().eigenvalues;
    (ev.min(), ev.max())
}

fn toy_config(task: Task, c: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(task);
    cfg.d = 1;
    cfg.c = c;
    cfg.delta = 0.1;
    cfg.eps_tube = 0.1;
    cfg.gap_tol = 1e-2;
    cfg.max_outer_iters = 50;
    cfg
}

fn initial_model(data: &Dataset, cfg: &TrainConfig) -> TkModel {
    let mut init = cfg.clone();
    init.max_outer_iters = 0;
    train(data, &init).expect("initial model")
}

fn held_out(model: &TkModel, test: &Dataset) -> f64 {
    score(model.task(), &model.predict(test.x_raw.view()).expect("predict"), &test.y)
}

fn iterate_violations(model: &TkModel) -> Vec<String> {
    let qp = model.params.qp() as f64;
    let mut out = Vec::new();
    for w in model.trace.windows(2) {
        if w[1].opt_a > w[0].opt_a + 1e-9 * (1.0 + w[0].opt_a.abs()) {
            out.push(format!("OPT_A rose at iteration {}: {} -> {}", w[1].iteration, w[0].opt_a, w[1].opt_a));
        }
    }
    for r in &model.trace {
        if (r.trace_p - qp).abs() > 1e-9 * qp {
            out.push(format!("trace {} at iteration {}", r.trace_p, r.iteration));
        }
        if r.min_eig_p < -1e-9 * qp {
            out.push(format!("min eigenvalue {} at iteration {}", r.min_eig_p, r.iteration));
        }
    }
    out
}

struct Toys {
    moons: (Dataset, Dataset, TrainConfig, TkModel),
    step: (Dataset, Dataset, TrainConfig, TkModel),
    elapsed: Duration,
}

fn train_toys() -> Toys {
    let start = Instant::now();
    let moons = synth::two_moons(60, 0.1, 1).expect("moons");
    let moons_test = synth::two_moons(400, 0.1, 101).expect("moons test");
    let moons_cfg = toy_config(Task::Classification, 1.0);
    let moons_model = train(&moons, &moons_cfg).expect("train moons");
    let step = synth::step_function(100, 1).expect("step");
    let step_test = synth::step_function(400, 101).expect("step test");
    let step_cfg = toy_config(Task::Regression, 0.005);
    let step_model = train(&step, &step_cfg).expect("train step");
    Toys {
        moons: (moons, moons_test, moons_cfg, moons_model),
        step: (step, step_test, step_cfg, step_model),
        elapsed: start.elapsed(),
    }
}

fn closed_form_vs_quadrature() -> Outcome {
    let start = Instant::now();
    let report = kernel_oracle_suite(2024, 50, 2, 2, None).expect("kernel suite");
    let elapsed = start.elapsed();
    let failing = report.cases.iter().filter(|c| !c.passes()).count();
    let pass = failing == 0 && report.cases.len() == 50 && elapsed <= Duration::from_secs(120);
    Outcome::gate(
        pass,
        format!(
            "50 cases, max rel err n=1 {:.2e} (tol 1e-3), n=2 {:.2e} (tol 1e-2), {failing} failing, {:.1}s",
            report.max_rel_err(1),
            report.max_rel_err(2),
            elapsed.as_secs_f64()
        ),
    )
}

fn gram_positivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.gen_range(1..=2);
        let d = rng.gen_range(0..=2);
        let basis = TkBasis::new(n, d);
        let p = random_psd(&mut rng, basis.qp());
        let domain = DomainBox::unit_with_margin(n, rng.gen_range(0.05..0.5)).expect("domain");
        let params = KernelParams::new(basis, domain, p).expect("params");
        let m = rng.gen_range(5..=30);
        let pts = Array2::from_shape_fn((m, n), |_| rng.gen_range(0.0..1.0));
        let (lo, hi) = lambda_range(&gram_matrix(&params, pts.view()));
        worst = worst.min(lo / hi);
    }
    let basis = TkBasis::new(1, 0);
    let params = KernelParams::identity(basis, DomainBox::unit_with_margin(1, 0.1).expect("domain"));
    let pts = Array2::from_shape_fn((10, 1), |(i, _)| (i as f64 + 0.5) / 10.0);
    let (lo, hi) = lambda_range(&gram_matrix(&params, pts.view()));
    let cond = hi / lo;
    let pass = worst >= -1e-8 && lo > 1e-10 && cond.is_finite();
    Outcome::gate(
        pass,
        format!("100 Grams, min lambda_min/lambda_max {worst:.2e}; 10-point d=0 Gram lambda_min {lo:.3e}, condition {cond:.3e}"),
    )
}

fn analytic_opt_p() -> Outcome {
    let report = opt_p_oracle_suite(2024, 50, 10_000).expect("opt_p suite");
    let mut nalgebra_diff: f64 = 0.0;
    for case in &report.cases {
        let (_, hi) = lambda_range(&case.m);
        let reference = -0.5 * case.qp as f64 * hi;
        nalgebra_diff = nalgebra_diff.max((case.analytic - reference).abs() / reference.abs().max(f64::MIN_POSITIVE));
    }
    let max_qp = report.cases.iter().map(|c| c.qp).max().unwrap_or(0);
    let pass = report.cases.len() == 50 && report.passes() && nalgebra_diff <= 1e-9 && max_qp <= 12;
    Outcome::gate(
        pass,
        format!(
            "50 cases (qp <= {max_qp}), max sample violation {:.2e}, rel diff Jacobi {:.2e}, nalgebra {nalgebra_diff:.2e}",
            report.max_sample_violation(),
            report.max_reference_rel_diff()
        ),
    )
}

fn qp_oracle() -> Outcome {
    let tight = SmoParams { tol: 1e-9, max_iter: 10_000_000 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let m = rng.gen_range(2..=8);
        let basis = TkBasis::new(1, 1);
        let p = random_psd(&mut rng, basis.qp());
        let params = KernelParams::new(basis, DomainBox::unit_with_margin(1, 0.1).expect("domain"), p).expect("params");
        let pts = Array2::from_shape_fn((m, 1), |_| rng.gen_range(0.0..1.0));
        let k = gram_matrix(&params, pts.view());
        let c = rng.gen_range(0.1..10.0);
        let mut y: Vec<f64>;
        let prob = if case < 20 {
            y = (0..m).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            y[0] = 1.0;
            y[1] = -1.0;
            DualProblem::classification(k.view(), &y, c)
        } else {
            y = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            DualProblem::regression(k.view(), &y, c, rng.gen_range(0.0..0.3))
        };
        let sol = solve_dual(&prob, &tight, None).expect("smo");
        let (_, reference) = dual_reference(&prob, 100_000);
        worst = worst.max((sol.objective - reference).abs() / (1.0 + reference.abs()));
    }
    let k = array![[1.0, 0.4], [0.4, 1.0]];
    let y = [1.0, -1.0];
    let sol = solve_dual(&DualProblem::classification(k.view(), &y, 10.0), &tight, None).expect("two-point");
    let hand = sol.alpha.iter().all(|a| (a - 5.0 / 3.0).abs() <= 1e-6)
        && sol.bias.abs() <= 1e-6
        && (sol.objective - 5.0 / 3.0).abs() <= 1e-6;
    Outcome::gate(
        worst <= 1e-6 && hand,
        format!(
            "20+20 instances, max objective diff {worst:.2e}; two-point alpha=({:.7}, {:.7}) bias={:.1e} objective={:.7}",
            sol.alpha[0], sol.alpha[1], sol.bias, sol.objective
        ),
    )
}

fn two_step_convergence(toys: &Toys) -> Outcome {
    let mut problems = Vec::new();
    let mut parts = Vec::new();
    for (name, model) in [("moons", &toys.moons.3), ("step", &toys.step.3)] {
        let last = model.final_record();
        if !model.converged || last.relative_gap() > 1e-2 || last.iteration > 50 {
            problems.push(format!("{name} did not converge"));
        }
        problems.extend(iterate_violations(model).into_iter().map(|v| format!("{name}: {v}")));
        parts.push(format!("{name} gap {:.2e} after {} iterations", last.relative_gap(), last.iteration));
    }
    let within = toys.elapsed <= Duration::from_secs(300);
    if !within {
        problems.push("runtime above 5 minutes".into());
    }
    let mut detail = format!("{}, {:.1}s", parts.join(", "), toys.elapsed.as_secs_f64());
    if !problems.is_empty() {
        detail.push_str(&format!("; {}", problems.join("; ")));
    }
    Outcome::gate(problems.is_empty(), detail)
}

fn improvement_over_initial(toys: &Toys) -> Outcome {
    let (moons, moons_test, moons_cfg, moons_model) = &toys.moons;
    let (step, step_test, step_cfg, step_model) = &toys.step;
    let acc = held_out(moons_model, moons_test);
    let acc0 = held_out(&initial_model(moons, moons_cfg), moons_test);
    let mse = held_out(step_model, step_test);
    let mse0 = held_out(&initial_model(step, step_cfg), step_test);
    let pass = acc >= acc0 && mse <= mse0 && mse <= 0.5 * mse0;
    Outcome::gate(
        pass,
        format!(
            "moons (C={}) accuracy {acc:.4} vs initial {acc0:.4}; step (C={}) MSE {mse:.5} vs initial {mse0:.5}, ratio {:.3} (target <= 0.5)",
            moons_cfg.c,
            step_cfg.c,
            mse / mse0
        ),
    )
}

fn scaling() -> Outcome {
    let args = ["bench", "--m", "250,500,1000,2000", "--n", "4", "--d", "1", "--task", "classification"];
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = tkl_cli::run(args, &mut out, &mut err);
    let text = String::from_utf8_lossy(&out).into_owned();
    if code != 0 {
        return Outcome::gate(false, format!("bench exited {code}: {}", String::from_utf8_lossy(&err)));
    }
    let slope: Option<f64> = text.lines().find_map(|l| l.strip_prefix("slope=")).and_then(|v| v.parse().ok());
    let mut split_ok = true;
    let mut splits = Vec::new();
    for row in text.lines().skip(1) {
        let cols: Vec<&str> = row.split_whitespace().collect();
        let Some(m) = cols.first().and_then(|v| v.parse::<usize>().ok()) else { continue };
        let (qp, eigen): (f64, f64) = (cols[3].parse().unwrap_or(f64::NAN), cols[5].parse().unwrap_or(f64::NAN));
        if m >= 1000 {
            split_ok &= qp > eigen;
            splits.push(format!("m={m} qp {qp:.3}s eigen {eigen:.4}s"));
        }
    }
    let slope_ok = slope.is_some_and(|s| (1.5..=3.0).contains(&s));
    Outcome::gate(
        slope_ok && split_ok && splits.len() == 2,
        format!("log-log slope {}, {}", slope.map_or("missing".into(), |s| format!("{s:.3}")), splits.join(", ")),
    )
}

fn read_airfoil(path: &PathBuf) -> tkl_core::Result<Dataset> {
    let raw = std::fs::read_to_string(path)?;
    let text = if raw.contains(',') {
        raw
    } else {
        raw.lines().map(|l| l.split_whitespace().collect::<Vec<_>>().join(",")).collect::<Vec<_>>().join("\n")
    };
    dataset_from_table(parse_csv(&text)?, &LabelColumn::Index(-1), Task::Regression)
}

fn airfoil() -> Outcome {
    let Some(path) = std::env::var_os("TKL_AIRFOIL").map(PathBuf::from) else {
        return Outcome { pass: true, gating: false, detail: "SKIP (TKL_AIRFOIL not set; non-gating)".into() };
    };
    let run = || -> tkl_core::Result<String> {
        let data = read_airfoil(&path)?;
        let split = kfold(data.m(), 5, 0, None)?.swap_remove(0);
        let (train_set, test_set) = (data.subset(&split.train)?, data.subset(&split.test)?);
        let mut cfg = TrainConfig::new(Task::Regression);
        cfg.d = 1;
        let report = cross_validate(&train_set, &[0.1, 1.0, 10.0, 100.0], &[0.05, 0.1, 0.5], 5, &cfg)?;
        let best = report.best_cell();
        cfg.c = best.c;
        cfg.delta = best.delta;
        let model = train(&train_set, &cfg)?;
        let mse = held_out(&model, &test_set);
        Ok(format!("airfoil m={} C={} delta={} cv_mse={} test_mse={mse} converged={}", data.m(), best.c, best.delta, best.mean, model.converged))
    };
    match run() {
        Ok(line) => {
            let archive = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("airfoil_report.txt");
            let _ = std::fs::write(&archive, format!("{line}\n"));
            Outcome { pass: true, gating: false, detail: format!("{line} (archived at {}; non-gating)", archive.display()) }
        }
        Err(e) => Outcome { pass: false, gating: false, detail: format!("run failed: {e} (non-gating)") },
    }
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let models = [
        ("classification", synth::two_moons(50, 0.1, 3).expect("moons"), toy_config(Task::Classification, 1.0)),
        ("regression", synth::step_function(50, 3).expect("step"), toy_config(Task::Regression, 1.0)),
    ];
    for (name, data, cfg) in &models {
        let model = train(data, cfg).expect("train");
        let path = dir.path().join(format!("{name}.tk"));
        save_model(&model, &path).expect("save");
        let loaded = load_model(&path).expect("load");
        let lo = data.x_raw.fold(f64::INFINITY, |a, &b| a.min(b)) - 0.2;
        let hi = data.x_raw.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 0.2;
        let queries = Array2::from_shape_fn((100, data.n()), |_| rng.gen_range(lo..hi));
        let a = model.decision_function(queries.view()).expect("decision");
        let b = loaded.decision_function(queries.view()).expect("decision");
        mismatches += a.values.iter().zip(&b.values).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        let pa = model.predict(queries.view()).expect("predict");
        let pb = loaded.predict(queries.view()).expect("predict");
        mismatches += pa.iter().zip(&pb).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    }
    Outcome::gate(mismatches == 0, format!("2 models x 100 queries, {mismatches} bitwise mismatches"))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let toys = train_toys();
    let results: Vec<(&str, Outcome)> = vec![
        ("closed-form kernel vs quadrature", closed_form_vs_quadrature()),
        ("Gram positivity and full rank", gram_positivity()),
        ("analytic kernel step optimality", analytic_opt_p()),
        ("SMO vs reference QP solver", qp_oracle()),
        ("two-step convergence on toy problems", two_step_convergence(&toys)),
        ("improvement over the initial kernel", improvement_over_initial(&toys)),
        ("runtime scaling", scaling()),
        ("optional airfoil benchmark", airfoil()),
        ("model persistence round trip", persistence()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {}: {status} {name}: {}", i + 1, o.detail);
        if o.gating && !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
