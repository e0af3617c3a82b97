//! Central finite differences and the error measure used to compare them
//! against analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::count_loss::{
    cascade_loss, cascade_loss_frozen, count_loss, kink_margin, rounding_reg, CascadeConfig,
    WeightGradient,
};
use crate::ctr::{locate_loss, CtrResult, LocateConfig, ScoredPoint, EPS};
use crate::error::Result;
use crate::scene::{CellSize, DensityGrid, GroundTruthPoint};

/// Cells or coordinates closer than this to a non-smooth point are skipped.
pub const KINK_EXCLUSION: f64 = 1e-4;
/// Both magnitudes below this count as agreement.
pub const ZERO_FLOOR: f64 = 1e-12;

/// `(f(x + h) - f(x - h)) / 2h` for coordinate `i` of `x`.
pub fn central_difference<F>(x: &[f64], i: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|)`, zero when both magnitudes are below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradRow {
    /// Cell index for the counting loss; `3 * candidate + {0: x, 1: y, 2: p}` for the locating loss.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares the analytic counting-loss gradient with central differences,
/// skipping cells within [`KINK_EXCLUSION`] of a kink. With stopped weight
/// gradients the finite differences hold the region weights fixed.
pub fn check_count_loss(
    pred: &DensityGrid,
    gt: &DensityGrid,
    cfg: &CascadeConfig,
    h: f64,
) -> Result<Vec<GradRow>> {
    let out = count_loss(pred, gt, cfg)?;
    let margins = kink_margin(pred, gt, cfg)?;
    let (_, frozen) = cascade_loss(pred, gt, cfg)?;
    let x = pred.values().to_vec();
    let rebuild =
        |v: &[f64]| DensityGrid::from_values(pred.cols(), pred.rows(), pred.cell(), v.to_vec());
    let mut rows = Vec::new();
    let mut failure = None;
    for (i, &margin) in margins.iter().enumerate() {
        if margin < KINK_EXCLUSION.max(2.0 * h) {
            continue;
        }
        let numeric = central_difference(&x, i, h, |v| {
            let eval = || -> Result<f64> {
                let grid = rebuild(v)?;
                let cascade = match cfg.weight_grad {
                    WeightGradient::Stop => cascade_loss_frozen(&grid, gt, cfg, &frozen)?,
                    WeightGradient::Through => cascade_loss(&grid, gt, cfg)?.0,
                };
                Ok(cascade + rounding_reg(&grid, cfg.batch_norm))
            };
            eval().unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        });
        rows.push(GradRow {
            index: i,
            analytic: out.grad[i],
            numeric,
            rel_err: relative_error(out.grad[i], numeric, ZERO_FLOOR),
        });
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

/// The matching restricted to candidate `i`, renumbered as candidate 0.
fn single_candidate(ctr: &CtrResult, i: usize) -> CtrResult {
    let only = |pairs: &[(usize, usize)]| -> Vec<(usize, usize)> {
        pairs
            .iter()
            .filter(|p| p.0 == i)
            .map(|&(_, g)| (0, g))
            .collect()
    };
    let s1 = if ctr.s1.contains(&i) {
        vec![0]
    } else {
        Vec::new()
    };
    CtrResult {
        omega1: only(&ctr.omega1),
        s2: Vec::new(),
        s_prime: Vec::new(),
        g_prime: Vec::new(),
        omega2: only(&ctr.omega2),
        s1,
    }
}

/// Compares locating-loss gradients in `x`, `y` and `p` of every candidate
/// with central differences under the given (frozen) matching. Coordinates
/// of candidates within [`KINK_EXCLUSION`] of a matched point and
/// probabilities near the clamp are skipped.
///
/// With the matching fixed the loss is a sum of per-candidate terms, so each
/// candidate is differenced on its own terms; differencing the full sum would
/// bury small components under the rounding error of a large total. For the
/// same reason `p` is differenced on the classification part alone and the
/// coordinates on the distance part alone; each part is constant in the other
/// variables.
pub fn check_locate_loss(
    candidates: &[ScoredPoint],
    gts: &[GroundTruthPoint],
    ctr: &CtrResult,
    use_ctr: bool,
    cfg: LocateConfig,
    h: f64,
) -> Vec<GradRow> {
    let out = locate_loss(candidates, gts, ctr, use_ctr, cfg);
    let mut pairs = ctr.omega1.clone();
    if use_ctr {
        pairs.extend_from_slice(&ctr.omega2);
    }
    let mut rows = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let coincident = pairs
            .iter()
            .any(|&(s, g)| s == i && (c.x - gts[g].x).hypot(c.y - gts[g].y) < KINK_EXCLUSION);
        let clamped = c.p - h < EPS + KINK_EXCLUSION || c.p + h > 1.0 - EPS - KINK_EXCLUSION;
        let sub = single_candidate(ctr, i);
        let own = [c.x, c.y, c.p];
        for k in 0..3 {
            if (k < 2 && coincident) || (k == 2 && clamped) {
                continue;
            }
            let numeric = central_difference(&own, k, h, |v| {
                let probe = [ScoredPoint {
                    x: v[0],
                    y: v[1],
                    p: v[2],
                }];
                let part = locate_loss(&probe, gts, &sub, use_ctr, cfg);
                if k == 2 {
                    part.cls
                } else {
                    part.dist
                }
            });
            rows.push(GradRow {
                index: 3 * i + k,
                analytic: out.grads[i][k],
                numeric,
                rel_err: relative_error(out.grads[i][k], numeric, ZERO_FLOOR),
            });
        }
    }
    rows
}

/// Seeded counting-loss instance: integer targets in `0..=5` and real
/// predictions in `[0, 6)` on a `side x side` grid of 16-pixel cells.
pub fn random_count_instance(side: usize, seed: u64) -> Result<(DensityGrid, DensityGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = CellSize::square(16)?;
    let n = side * side;
    let gt: Vec<f64> = (0..n)
        .map(|_| f64::from(rng.random_range(0..=5u8)))
        .collect();
    let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
    Ok((
        DensityGrid::from_values(side, side, cell, pred)?,
        DensityGrid::from_values(side, side, cell, gt)?,
    ))
}
