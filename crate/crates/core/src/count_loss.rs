//! Cascade region counting loss, rounding regularizer and their gradients.
//!
//! Level `r` pools `2^r x 2^r` blocks of grid cells. Levels are walked from
//! the coarsest (`r = t`, unit weights) down to single cells; every region
//! below the top is reweighted by a softmax over its parent level's region
//! losses, so children of an already well-counted parent contribute less.
//! Grids whose sides are not multiples of `2^r` are zero-padded.

use crate::error::{Error, Result};
use crate::math::{round_half_even, sign0};
use crate::scene::{CellSize, DensityGrid};

/// Normalization set of the parent-level softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxScope {
    /// All parent-level regions of the image.
    #[default]
    Image,
    /// Parent-level regions sharing the same grandparent region.
    Siblings,
}

/// How region weights enter the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightGradient {
    /// Weights are constants.
    #[default]
    Stop,
    /// Differentiate through the softmax of parent losses.
    Through,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    /// Coarsest level; level `r` regions span `2^r` cells per side.
    pub t: u32,
    /// Normalization constant applied to every region loss and to the regularizer.
    pub batch_norm: f64,
    pub scope: SoftmaxScope,
    pub weight_grad: WeightGradient,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            t: 0,
            batch_norm: 1.0,
            scope: SoftmaxScope::Image,
            weight_grad: WeightGradient::Stop,
        }
    }
}

impl CascadeConfig {
    pub fn with_levels(t: u32) -> Self {
        Self {
            t,
            ..Self::default()
        }
    }

    pub fn validate(&self, cols: usize, rows: usize) -> Result<()> {
        if !(self.batch_norm > 0.0 && self.batch_norm.is_finite()) {
            return Err(Error::invalid("batch_norm", "must be positive and finite"));
        }
        if self.t >= usize::BITS || (1usize << self.t) > cols.min(rows) {
            return Err(Error::invalid(
                "t",
                format!(
                    "2^{} exceeds the smaller grid side ({})",
                    self.t,
                    cols.min(rows)
                ),
            ));
        }
        Ok(())
    }
}

/// Region losses and weights of one cascade level.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLevel {
    pub r: u32,
    pub cols: usize,
    pub rows: usize,
    /// `|pred_R - gt_R| / B` per region, row-major.
    pub losses: Vec<f64>,
    /// Softmax weight of each region's parent (1 at the coarsest level).
    pub weights: Vec<f64>,
    /// Size-reduction factor `2^(r+1) / (rows * cols)` of the full grid.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountLossOutput {
    pub cascade: f64,
    pub regularizer: f64,
    pub total: f64,
    /// Levels ordered coarse to fine (`r = t` first).
    pub levels: Vec<RegionLevel>,
    /// `d total / d pred` per cell, row-major.
    pub grad: Vec<f64>,
}

/// Block sums over `2^r x 2^r` regions (zero padding at the far edges).
pub fn region_counts(grid: &DensityGrid, r: u32) -> DensityGrid {
    let side = 1usize << r;
    let cols = grid.cols().div_ceil(side);
    let rows = grid.rows().div_ceil(side);
    let mut out = vec![0.0; cols * rows];
    for v in 0..grid.rows() {
        for u in 0..grid.cols() {
            out[(v / side) * cols + u / side] += grid.get(u, v);
        }
    }
    let cell = grid.cell();
    let coarse = CellSize {
        w: cell.w.saturating_mul(side as u32),
        h: cell.h.saturating_mul(side as u32),
    };
    DensityGrid::from_values(cols, rows, coarse, out).expect("sums of valid cells are valid")
}

fn check_pair(pred: &DensityGrid, gt: &DensityGrid, cfg: &CascadeConfig) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} ground truth", pred.cols(), pred.rows()),
            actual: format!("{}x{}", gt.cols(), gt.rows()),
        });
    }
    cfg.validate(pred.cols(), pred.rows())
}

/// Region index of the parent-level region `(pu, pv)` used to group the
/// softmax normalization.
fn softmax_group(
    scope: SoftmaxScope,
    is_top: bool,
    pu: usize,
    pv: usize,
    grand_cols: usize,
) -> usize {
    match scope {
        SoftmaxScope::Image => 0,
        SoftmaxScope::Siblings if is_top => 0,
        SoftmaxScope::Siblings => (pv / 2) * grand_cols + pu / 2,
    }
}

/// Softmax of `losses` within groups; returns the weights and group ids.
fn grouped_softmax(losses: &[f64], groups: &[usize]) -> Vec<f64> {
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    for (&l, &g) in losses.iter().zip(groups) {
        max[g] = max[g].max(l);
    }
    let mut denom = vec![0.0; n_groups];
    for (&l, &g) in losses.iter().zip(groups) {
        denom[g] += (l - max[g]).exp();
    }
    losses
        .iter()
        .zip(groups)
        .map(|(&l, &g)| (l - max[g]).exp() / denom[g])
        .collect()
}

struct LevelState {
    level: RegionLevel,
    /// signed residual `pred_R - gt_R` per region
    residual: Vec<f64>,
    /// softmax group of each region when it acts as a parent
    groups: Vec<usize>,
}

fn cascade_levels(pred: &DensityGrid, gt: &DensityGrid, cfg: &CascadeConfig) -> Vec<LevelState> {
    let n_cells = (pred.cols() * pred.rows()) as f64;
    let mut states: Vec<LevelState> = Vec::with_capacity(cfg.t as usize + 1);
    for r in (0..=cfg.t).rev() {
        let p = region_counts(pred, r);
        let g = region_counts(gt, r);
        let residual: Vec<f64> = p
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| a - b)
            .collect();
        let losses: Vec<f64> = residual.iter().map(|d| d.abs() / cfg.batch_norm).collect();
        let (cols, rows) = (p.cols(), p.rows());
        let grand_cols = cols.div_ceil(2);
        let groups = (0..cols * rows)
            .map(|i| softmax_group(cfg.scope, r == cfg.t, i % cols, i / cols, grand_cols))
            .collect();
        let weights = match states.last() {
            None => vec![1.0; cols * rows],
            Some(parent) => {
                let sm = grouped_softmax(&parent.level.losses, &parent.groups);
                (0..cols * rows)
                    .map(|i| sm[(i / cols / 2) * parent.level.cols + (i % cols) / 2])
                    .collect()
            }
        };
        states.push(LevelState {
            level: RegionLevel {
                r,
                cols,
                rows,
                losses,
                weights,
                alpha: f64::from(1u32 << (r + 1).min(31)) / n_cells,
            },
            residual,
            groups,
        });
    }
    states
}

fn weighted_sum(levels: &[RegionLevel]) -> f64 {
    levels
        .iter()
        .map(|l| {
            l.alpha
                * l.losses
                    .iter()
                    .zip(&l.weights)
                    .map(|(loss, w)| w * loss)
                    .sum::<f64>()
        })
        .sum()
}

/// Cascade loss value and its per-level region weights (coarse to fine).
pub fn cascade_loss(
    pred: &DensityGrid,
    gt: &DensityGrid,
    cfg: &CascadeConfig,
) -> Result<(f64, Vec<RegionLevel>)> {
    check_pair(pred, gt, cfg)?;
    let levels: Vec<RegionLevel> = cascade_levels(pred, gt, cfg)
        .into_iter()
        .map(|s| s.level)
        .collect();
    Ok((weighted_sum(&levels), levels))
}

/// Cascade loss of `pred` with region weights held at `frozen` (as returned
/// by [`cascade_loss`] for some reference prediction).
pub fn cascade_loss_frozen(
    pred: &DensityGrid,
    gt: &DensityGrid,
    cfg: &CascadeConfig,
    frozen: &[RegionLevel],
) -> Result<f64> {
    check_pair(pred, gt, cfg)?;
    let mut levels: Vec<RegionLevel> = cascade_levels(pred, gt, cfg)
        .into_iter()
        .map(|s| s.level)
        .collect();
    if levels.len() != frozen.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} levels", levels.len()),
            actual: format!("{} levels", frozen.len()),
        });
    }
    for (l, f) in levels.iter_mut().zip(frozen) {
        if l.weights.len() != f.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} weights at r={}", l.weights.len(), l.r),
                actual: format!("{}", f.weights.len()),
            });
        }
        l.weights.clone_from(&f.weights);
    }
    Ok(weighted_sum(&levels))
}

/// Mean distance of each cell to its rounded value: `(1/B) sum |round(D) - D|`.
pub fn rounding_reg(pred: &DensityGrid, batch_norm: f64) -> f64 {
    pred.values()
        .iter()
        .map(|&d| (round_half_even(d) - d).abs())
        .sum::<f64>()
        / batch_norm
}

/// Cascade loss plus rounding regularizer, with the gradient with respect
/// to every predicted cell.
///
/// `|.|` uses the sign subgradient (0 at the kink) and `round` is treated as
/// piecewise constant.
pub fn count_loss(
    pred: &DensityGrid,
    gt: &DensityGrid,
    cfg: &CascadeConfig,
) -> Result<CountLossOutput> {
    check_pair(pred, gt, cfg)?;
    let states = cascade_levels(pred, gt, cfg);
    let b = cfg.batch_norm;
    let cols = pred.cols();
    let mut grad = vec![0.0; pred.len()];

    // d(level loss)/d(region loss) per level, before chaining to cells
    let mut region_grads: Vec<Vec<f64>> = states
        .iter()
        .map(|s| s.level.weights.iter().map(|w| s.level.alpha * w).collect())
        .collect();

    if cfg.weight_grad == WeightGradient::Through {
        // child level k+1 is weighted by softmax over parent level k
        for k in 0..states.len().saturating_sub(1) {
            let parent = &states[k];
            let child = &states[k + 1];
            let sm = grouped_softmax(&parent.level.losses, &parent.groups);
            let pcols = parent.level.cols;
            let mut child_sum = vec![0.0; sm.len()];
            for (i, loss) in child.level.losses.iter().enumerate() {
                let (cu, cv) = (i % child.level.cols, i / child.level.cols);
                child_sum[(cv / 2) * pcols + cu / 2] += loss;
            }
            let n_groups = parent.groups.iter().copied().max().map_or(0, |g| g + 1);
            let mut expect = vec![0.0; n_groups];
            for (j, &g) in parent.groups.iter().enumerate() {
                expect[g] += sm[j] * child_sum[j];
            }
            for (j, &g) in parent.groups.iter().enumerate() {
                region_grads[k][j] += child.level.alpha * sm[j] * (child_sum[j] - expect[g]);
            }
        }
    }

    for (s, rg) in states.iter().zip(&region_grads) {
        let side = 1usize << s.level.r;
        for (idx, g) in grad.iter_mut().enumerate() {
            let (u, v) = (idx % cols, idx / cols);
            let ridx = (v / side) * s.level.cols + u / side;
            *g += rg[ridx] * sign0(s.residual[ridx]) / b;
        }
    }

    for (g, &d) in grad.iter_mut().zip(pred.values()) {
        *g += sign0(d - round_half_even(d)) / b;
    }

    let levels: Vec<RegionLevel> = states.into_iter().map(|s| s.level).collect();
    let cascade = weighted_sum(&levels);
    let regularizer = rounding_reg(pred, b);
    Ok(CountLossOutput {
        cascade,
        regularizer,
        total: cascade + regularizer,
        levels,
        grad,
    })
}

/// Per cell, the smallest distance of any quantity the loss is non-smooth in:
/// every enclosing region residual, the distance to the nearest integer and
/// to the nearest half-integer.
pub fn kink_margin(pred: &DensityGrid, gt: &DensityGrid, cfg: &CascadeConfig) -> Result<Vec<f64>> {
    check_pair(pred, gt, cfg)?;
    let states = cascade_levels(pred, gt, cfg);
    let cols = pred.cols();
    Ok(pred
        .values()
        .iter()
        .enumerate()
        .map(|(idx, &d)| {
            let (u, v) = (idx % cols, idx / cols);
            let region = states
                .iter()
                .map(|s| {
                    let side = 1usize << s.level.r;
                    s.residual[(v / side) * s.level.cols + u / side].abs()
                })
                .fold(f64::INFINITY, f64::min);
            let to_int = (d - d.round()).abs();
            let to_half = (d - d.floor() - 0.5).abs();
            region.min(to_int).min(to_half)
        })
        .collect())
}
