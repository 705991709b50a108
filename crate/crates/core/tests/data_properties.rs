use std::io::Write;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tkl_core::data::{apply_scaler, fit_scaler, kfold, load_csv};
use tkl_core::model_io::{load_model, save_model};
use tkl_core::{synth, train, LabelColumn, Task, TrainConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaler_maps_extremes_exactly(rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 3), 2..20)) {
        let x = Array2::from_shape_fn((rows.len(), 3), |(i, j)| rows[i][j]);
        let scaler = fit_scaler(x.view());
        let (s, clamped) = apply_scaler(&scaler, x.view()).unwrap();
        prop_assert_eq!(clamped, 0);
        for j in 0..3 {
            let col = s.column(j);
            prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
            if scaler.maxs[j] > scaler.mins[j] {
                prop_assert!(col.iter().any(|v| *v == 0.0));
                prop_assert!(col.iter().any(|v| *v == 1.0));
            } else {
                prop_assert!(col.iter().all(|v| *v == 0.5));
            }
        }
    }

    #[test]
    fn folds_partition_indices(m in 2usize..60, k in 2usize..6, seed in any::<u64>(), stratify in any::<bool>()) {
        prop_assume!(k <= m);
        let y: Vec<f64> = (0..m).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let folds = kfold(m, k, seed, stratify.then_some(&y[..])).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0usize; m];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn model_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (task, ds) in [
        (Task::Classification, synth::two_moons(40, 0.1, 3).unwrap()),
        (Task::Regression, synth::step_function(40, 3).unwrap()),
    ] {
        let mut cfg = TrainConfig::new(task);
        cfg.max_outer_iters = 5;
        let model = train(&ds, &cfg).unwrap();
        let path = dir.path().join(format!("{task}.tk"));
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Array2::from_shape_fn((50, ds.n()), |_| rng.gen_range(-0.5..1.5));
        let a = model.decision_function(q.view()).unwrap();
        let b = back.decision_function(q.view()).unwrap();
        assert_eq!(a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn csv_with_named_label_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "target,a,b\n3,0.1,0.2\n5,0.3,0.1\n3,0.9,0.8").unwrap();
    let ds = load_csv(&path, &LabelColumn::Name("target".into()), Task::Classification).unwrap();
    assert_eq!(ds.y, vec![-1.0, 1.0, -1.0]);
    assert_eq!(ds.label_values, Some([3.0, 5.0]));
    assert_eq!(ds.feature_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
}
