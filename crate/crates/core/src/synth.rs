//! Seeded synthetic datasets used by tests, the benchmark and the examples.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::dual::Task;
use crate::error::Result;

/// Two interleaved half circles with Gaussian noise; labels alternate
/// between the moons.
pub fn two_moons(m: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut x = Array2::zeros((m, 2));
    let mut y = Vec::with_capacity(m);
    for i in 0..m {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (px, py, label) = if i % 2 == 0 {
            (theta.cos(), theta.sin(), 1.0)
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin(), -1.0)
        };
        x[[i, 0]] = px + normal.sample(&mut rng);
        x[[i, 1]] = py + normal.sample(&mut rng);
        y.push(label);
    }
    Dataset::from_raw(x, y, Task::Classification, None, Some([-1.0, 1.0]))
}

/// `y = 1[x > 0.5]` on uniform points of `[0, 1]`.
pub fn step_function(m: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    let y = xs.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    let x = Array2::from_shape_vec((m, 1), xs).expect("column");
    Dataset::from_raw(x, y, Task::Regression, None, None)
}

/// Uniform points in `[0, 1]^n` labelled by a smooth nonlinear boundary
/// (classification) or target (regression).
pub fn benchmark(task: Task, m: usize, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((m, n), |_| rng.gen_range(0.0..1.0));
    let y = x
        .rows()
        .into_iter()
        .map(|row| {
            let mut s = 0.3 * (2.0 * std::f64::consts::PI * row[0]).sin();
            for (j, v) in row.iter().enumerate() {
                let w = if j % 2 == 0 { 1.0 } else { -0.7 };
                s += w * (v - 0.5);
            }
            match task {
                Task::Classification => {
                    if s >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                Task::Regression => s,
            }
        })
        .collect();
    let labels = (task == Task::Classification).then_some([-1.0, 1.0]);
    Dataset::from_raw(x, y, task, None, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_are_balanced_and_seeded() {
        let a = two_moons(60, 0.1, 5).unwrap();
        let b = two_moons(60, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.y.iter().filter(|v| **v > 0.0).count(), 30);
    }

    #[test]
    fn step_targets() {
        let ds = step_function(50, 1).unwrap();
        for (row, y) in ds.x_raw.rows().into_iter().zip(&ds.y) {
            assert_eq!(*y, if row[0] > 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn benchmark_has_both_classes() {
        let ds = benchmark(Task::Classification, 200, 4, 3).unwrap();
        assert!(ds.y.iter().any(|v| *v > 0.0) && ds.y.iter().any(|v| *v < 0.0));
    }
}
