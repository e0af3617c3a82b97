//! Anchor priors: K-means over ground-truth points expressed relative to
//! their grid cell, run once per pyramid level.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CellSize, Scene};

pub type Point2 = [f64; 2];

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-9;

/// One pyramid level: `s` anchor positions relative to the cell origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub s: usize,
    pub centers: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPyramid {
    cell: CellSize,
    levels: Vec<AnchorLevel>,
}

#[derive(Serialize, Deserialize)]
struct PyramidFile {
    cell_h: u32,
    cell_w: u32,
    levels: Vec<AnchorLevel>,
}

impl AnchorPyramid {
    /// Validates ordering (`s` strictly increasing, at least one level),
    /// center counts and that every center lies in `[0, cell)`.
    pub fn new(cell: CellSize, levels: Vec<AnchorLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("levels", "pyramid needs at least one level"));
        }
        if levels.windows(2).any(|w| w[0].s >= w[1].s) || levels[0].s == 0 {
            return Err(Error::invalid(
                "levels",
                "anchor counts must be positive and strictly increasing",
            ));
        }
        let (cw, ch) = (f64::from(cell.w), f64::from(cell.h));
        for (i, level) in levels.iter().enumerate() {
            if level.centers.len() != level.s {
                return Err(Error::invalid(
                    "levels",
                    format!(
                        "level {i} has {} centers, expected {}",
                        level.centers.len(),
                        level.s
                    ),
                ));
            }
            let inside = |c: &Point2| c[0] >= 0.0 && c[0] < cw && c[1] >= 0.0 && c[1] < ch;
            if !level.centers.iter().all(inside) {
                return Err(Error::invalid(
                    "levels",
                    format!("level {i} has a center outside the cell"),
                ));
            }
        }
        Ok(Self { cell, levels })
    }

    /// Pyramid whose levels all use [`uniform_layout`].
    pub fn uniform(cell: CellSize, s_levels: &[usize]) -> Result<Self> {
        let levels = s_levels
            .iter()
            .map(|&s| AnchorLevel {
                s,
                centers: uniform_layout(s, cell),
            })
            .collect();
        Self::new(cell, levels)
    }

    pub fn cell(&self) -> CellSize {
        self.cell
    }

    pub fn levels(&self) -> &[AnchorLevel] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn s_values(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.s).collect()
    }

    pub fn to_json(&self) -> String {
        let file = PyramidFile {
            cell_h: self.cell.h,
            cell_w: self.cell.w,
            levels: self.levels.clone(),
        };
        serde_json::to_string_pretty(&file).expect("pyramid serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PyramidFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<pyramid>".into(),
            line: Some(e.line() as u64),
            field: "<pyramid>".to_string(),
            message: e.to_string(),
        })?;
        Self::new(CellSize::new(file.cell_w, file.cell_h)?, file.levels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse {
                line,
                field,
                message,
                ..
            } => Error::Parse {
                path: path.to_path_buf(),
                line,
                field,
                message,
            },
            other => other,
        })
    }
}

/// Points of every nonempty cell, relative to the cell origin. Cells are
/// visited scene by scene, row-major within a scene; empty cells are skipped.
pub fn crop_to_cells(scenes: &[Scene], cell: CellSize) -> Vec<Vec<Point2>> {
    let mut out = Vec::new();
    for scene in scenes {
        let mut cells: BTreeMap<(usize, usize), Vec<Point2>> = BTreeMap::new();
        for p in scene.points() {
            let (u, v) = cell.cell_of(p.x, p.y);
            let rel = [
                p.x - (u as f64) * f64::from(cell.w),
                p.y - (v as f64) * f64::from(cell.h),
            ];
            cells.entry((v, u)).or_default().push(rel);
        }
        out.extend(cells.into_values());
    }
    out
}

/// All relative points of all nonempty cells, flattened in crop order.
pub fn pooled_relative_points(scenes: &[Scene], cell: CellSize) -> Vec<Point2> {
    crop_to_cells(scenes, cell).into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Point2>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &Point2, b: &Point2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Index of the nearest center (lowest index on ties) and its squared distance.
fn nearest(p: &Point2, centers: &[Point2]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its nearest center.
pub fn inertia(points: &[Point2], centers: &[Point2]) -> f64 {
    points.iter().map(|p| nearest(p, centers).1).sum()
}

fn plus_plus_init(points: &[Point2], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // every point coincides with a chosen center
            rng.random_range(0..points.len())
        };
        let c = points[idx];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
    }
    centers
}

/// Seeded k-means++ followed by Lloyd iterations.
///
/// Iteration stops once no center moves by `tol` or more, or after
/// `max_iter` rounds. A cluster that ends up empty is reseeded at the point
/// farthest from its own center.
pub fn kmeans(
    points: &[Point2],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::invalid("k", "cluster count must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::TooFewPoints {
            k,
            available: points.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("k-means input"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut labels = vec![0usize; points.len()];
    let mut dists = vec![0.0f64; points.len()];
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centers);
            labels[i] = j;
            dists[i] = d;
        }

        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&labels) {
            sums[j][0] += p[0];
            sums[j][1] += p[1];
            counts[j] += 1;
        }

        let mut moved = 0.0f64;
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            let next = if counts[j] > 0 {
                let n = counts[j] as f64;
                [sums[j][0] / n, sums[j][1] / n]
            } else {
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("points.len() >= k");
                taken[far] = true;
                dists[far] = 0.0;
                points[far]
            };
            moved = moved.max(sq_dist(&next, &centers[j]).sqrt());
            centers[j] = next;
        }
        if moved < tol {
            break;
        }
    }

    Ok(KMeansFit {
        inertia: inertia(points, &centers),
        centers,
        iterations,
    })
}

/// Best-inertia fit over `restarts` seeds derived from `seed`.
pub fn kmeans_best_of(
    points: &[Point2],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeansFit> {
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts.max(1) {
        let fit = kmeans(
            points,
            k,
            seed.wrapping_add(r as u64),
            DEFAULT_MAX_ITER,
            DEFAULT_TOL,
        )?;
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `s` positions laid out on a near-square lattice of cell-centered slots.
pub fn uniform_layout(s: usize, cell: CellSize) -> Vec<Point2> {
    if s == 0 {
        return Vec::new();
    }
    let ncols = (s as f64).sqrt().ceil() as usize;
    let nrows = s.div_ceil(ncols);
    let (cw, ch) = (f64::from(cell.w), f64::from(cell.h));
    (0..s)
        .map(|i| {
            let (c, r) = (i % ncols, i / ncols);
            [
                (c as f64 + 0.5) * cw / ncols as f64,
                (r as f64 + 0.5) * ch / nrows as f64,
            ]
        })
        .collect()
}

fn clamp_into_cell(c: Point2, cell: CellSize) -> Point2 {
    let clamp = |v: f64, side: u32| {
        let side = f64::from(side);
        v.clamp(0.0, side - side * f64::EPSILON)
    };
    [clamp(c[0], cell.w), clamp(c[1], cell.h)]
}

/// Learns one anchor level per entry of `s_levels` from the pooled relative
/// points of every nonempty cell in `scenes`.
///
/// A level whose `s` exceeds the pooled population gets [`uniform_layout`].
/// Each level is fitted independently with the same `seed`.
pub fn learn_pyramid(
    scenes: &[Scene],
    s_levels: &[usize],
    cell: CellSize,
    seed: u64,
) -> Result<AnchorPyramid> {
    if s_levels.is_empty() || s_levels[0] == 0 || s_levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "s_levels",
            "anchor counts must be positive and strictly increasing",
        ));
    }
    let pooled = pooled_relative_points(scenes, cell);
    if pooled.is_empty() {
        return Err(Error::invalid(
            "scenes",
            "no annotated points to learn priors from",
        ));
    }
    let levels = s_levels
        .iter()
        .map(|&s| {
            let centers = if pooled.len() < s {
                uniform_layout(s, cell)
            } else {
                kmeans(&pooled, s, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?
                    .centers
                    .into_iter()
                    .map(|c| clamp_into_cell(c, cell))
                    .collect()
            };
            Ok(AnchorLevel { s, centers })
        })
        .collect::<Result<Vec<_>>>()?;
    AnchorPyramid::new(cell, levels)
}
