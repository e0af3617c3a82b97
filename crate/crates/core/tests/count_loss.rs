use crowdloc::count_loss::{
    cascade_loss, count_loss, region_counts, rounding_reg, CascadeConfig, SoftmaxScope,
    WeightGradient,
};
use crowdloc::gradcheck::check_count_loss;
use crowdloc::scene::{CellSize, DensityGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cell() -> CellSize {
    CellSize::square(8).unwrap()
}

fn grid(cols: usize, rows: usize, values: Vec<f64>) -> DensityGrid {
    DensityGrid::from_values(cols, rows, cell(), values).unwrap()
}

/// Straight-line cascade with image-wide softmax, written from the loss
/// definition with explicit loops.
fn reference_cascade(pred: &[f64], gt: &[f64], cols: usize, rows: usize, t: u32, b: f64) -> f64 {
    let level_losses = |r: u32| -> (usize, usize, Vec<f64>) {
        let side = 1usize << r;
        let (rc, rr) = (cols.div_ceil(side), rows.div_ceil(side));
        let mut out = vec![0.0; rc * rr];
        for v in 0..rows {
            for u in 0..cols {
                out[(v / side) * rc + u / side] += pred[v * cols + u] - gt[v * cols + u];
            }
        }
        (rc, rr, out.into_iter().map(|d| d.abs() / b).collect())
    };
    let n = (cols * rows) as f64;
    let mut total = 0.0;
    for r in (0..=t).rev() {
        let alpha = 2f64.powi(r as i32 + 1) / n;
        let (rc, _, losses) = level_losses(r);
        if r == t {
            total += alpha * losses.iter().sum::<f64>();
            continue;
        }
        let (pc, _, parent) = level_losses(r + 1);
        let z: f64 = parent.iter().map(|l| l.exp()).sum();
        for (i, l) in losses.iter().enumerate() {
            let (u, v) = (i % rc, i / rc);
            let w = parent[(v / 2) * pc + u / 2].exp() / z;
            total += alpha * w * l;
        }
    }
    total
}

#[test]
fn two_by_two_regression_vector() {
    let pred = grid(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
    let gt = grid(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
    let out = count_loss(&pred, &gt, &CascadeConfig::with_levels(1)).unwrap();
    let frozen = [1.0, 0.5, -0.5, 0.0, 0.0];
    let got = [
        out.total,
        out.grad[0],
        out.grad[1],
        out.grad[2],
        out.grad[3],
    ];
    for (g, f) in got.iter().zip(frozen) {
        assert!((g - f).abs() <= 1e-12, "{got:?}");
    }
    assert_eq!(out.regularizer, 0.0);
}

#[test]
fn region_count_examples() {
    let g = DensityGrid::from_rows(cell(), &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(region_counts(&g, 1).values(), &[10.0]);
    assert_eq!(region_counts(&g, 0), g);
    let ones = grid(4, 4, vec![1.0; 16]);
    assert_eq!(region_counts(&ones, 1).values(), &[4.0; 4]);
}

#[test]
fn rounding_examples() {
    assert_eq!(rounding_reg(&grid(2, 1, vec![3.0, 0.0]), 1.0), 0.0);
    assert!((rounding_reg(&grid(1, 1, vec![2.3]), 1.0) - 0.3).abs() < 1e-12);
    assert_eq!(rounding_reg(&grid(1, 1, vec![2.5]), 1.0), 0.5);
}

fn random_pair(rng: &mut ChaCha8Rng, cols: usize, rows: usize) -> (DensityGrid, DensityGrid) {
    let n = cols * rows;
    let gt: Vec<f64> = (0..n)
        .map(|_| f64::from(rng.random_range(0..6u8)))
        .collect();
    let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
    (grid(cols, rows, pred), grid(cols, rows, gt))
}

#[test]
fn matches_reference_walkthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let cols = rng.random_range(1..12usize);
        let rows = rng.random_range(1..12usize);
        let max_t = cols.min(rows).ilog2();
        let t = rng.random_range(0..=max_t);
        let b = [1.0, 2.0, 4.0][rng.random_range(0..3usize)];
        let (pred, gt) = random_pair(&mut rng, cols, rows);
        let cfg = CascadeConfig {
            t,
            batch_norm: b,
            ..CascadeConfig::default()
        };
        let (value, _) = cascade_loss(&pred, &gt, &cfg).unwrap();
        let expected = reference_cascade(pred.values(), gt.values(), cols, rows, t, b);
        assert!(
            (value - expected).abs() <= 1e-12 * expected.max(1.0),
            "{value} vs {expected}"
        );
    }
}

#[test]
fn single_level_is_scaled_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (pred, gt) = random_pair(&mut rng, 5, 3);
        let (value, _) = cascade_loss(&pred, &gt, &CascadeConfig::with_levels(0)).unwrap();
        let l1: f64 = pred
            .values()
            .iter()
            .zip(gt.values())
            .map(|(p, g)| (p - g).abs())
            .sum();
        assert!((value - 2.0 / 15.0 * l1).abs() < 1e-12);
    }
}

fn all_configs() -> Vec<(SoftmaxScope, WeightGradient)> {
    let mut v = Vec::new();
    for scope in [SoftmaxScope::Image, SoftmaxScope::Siblings] {
        for wg in [WeightGradient::Stop, WeightGradient::Through] {
            v.push((scope, wg));
        }
    }
    v
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (scope, weight_grad) in all_configs() {
        let mut checked = 0;
        let mut worst = 0.0f64;
        for _ in 0..40 {
            let side = rng.random_range(1..=16usize);
            let cols = side;
            let rows = rng.random_range(1..=16usize);
            let max_t = cols.min(rows).ilog2().min(2);
            let t = rng.random_range(0..=max_t);
            let (pred, gt) = random_pair(&mut rng, cols, rows);
            let cfg = CascadeConfig {
                t,
                batch_norm: 1.0,
                scope,
                weight_grad,
            };
            for row in check_count_loss(&pred, &gt, &cfg, 1e-6).unwrap() {
                worst = worst.max(row.rel_err);
                checked += 1;
            }
        }
        assert!(checked > 1000, "only {checked} cells checked");
        assert!(
            worst < 1e-5,
            "{scope:?}/{weight_grad:?}: max relative error {worst:e}"
        );
    }
}

#[test]
fn matched_grid_grad_is_zero() {
    let g = grid(4, 4, (0..16).map(|i| f64::from(i % 3)).collect());
    let out = count_loss(&g, &g, &CascadeConfig::with_levels(2)).unwrap();
    assert_eq!(out.total, 0.0);
    assert!(out.grad.iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn non_negative_and_zero_at_truth(
        (cols, rows, pred, gt) in (1usize..9, 1usize..9).prop_flat_map(|(c, r)| (
            Just(c), Just(r),
            proptest::collection::vec(0.0..10.0f64, c * r),
            proptest::collection::vec(0u8..10, c * r),
        )),
        siblings in any::<bool>(),
    ) {
        let t = cols.min(rows).ilog2();
        let scope = if siblings { SoftmaxScope::Siblings } else { SoftmaxScope::Image };
        let cfg = CascadeConfig { t, scope, ..CascadeConfig::default() };
        let gt = grid(cols, rows, gt.into_iter().map(f64::from).collect());
        let pred = grid(cols, rows, pred);
        let out = count_loss(&pred, &gt, &cfg).unwrap();
        prop_assert!(out.cascade >= 0.0 && out.regularizer >= 0.0);
        prop_assert_eq!(count_loss(&gt, &gt, &cfg).unwrap().total, 0.0);
        for level in &out.levels {
            prop_assert!(level.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        }
    }
}
