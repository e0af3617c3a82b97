//! Localization and counting metrics.
//!
//! A prediction is a true positive when it is matched to a ground-truth
//! point within that point's radius σ. Matching maximizes the number of
//! pairs first and then minimizes their total distance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ctr::{hungarian, CostMatrix};
use crate::error::{Error, Result};
use crate::scene::GroundTruthPoint;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Fixed(f64),
    /// `σ = sqrt(h² + w²)` from each point's box.
    PerPointBox,
    /// Average P/R/F1 over every integer σ in `lo..=hi`.
    AveragedRange {
        lo: u32,
        hi: u32,
    },
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    /// Parses `fixed:8`, `box` or `range:1:100`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(
                "sigma",
                format!("expected fixed:<px>|box|range:<lo>:<hi>, got `{s}`"),
            )
        };
        let parts: Vec<&str> = s.split(':').collect();
        let mode = match parts.as_slice() {
            ["fixed", v] => SigmaMode::Fixed(v.parse().map_err(|_| bad())?),
            ["box"] => SigmaMode::PerPointBox,
            ["range", lo, hi] => SigmaMode::AveragedRange {
                lo: lo.parse().map_err(|_| bad())?,
                hi: hi.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl SigmaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SigmaMode::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::invalid("sigma", "fixed sigma must be positive"))
            }
            SigmaMode::AveragedRange { lo, hi } if lo < 1 || lo > hi => {
                Err(Error::invalid("sigma", "range needs 1 <= lo <= hi"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Sum tp/fp/fn over all images, then compute the ratios.
    #[default]
    Micro,
    /// Compute P/R/F1 per image and average them.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub sigma: SigmaMode,
    pub aggregation: Aggregation,
}

impl EvalConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            sigma: SigmaMode::Fixed(sigma),
            aggregation: Aggregation::Micro,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MatchCounts {
    fn add(&mut self, o: MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatch {
    pub counts: MatchCounts,
    /// `(pred, gt)` index pairs, sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
}

pub fn sigma_from_box(h: f64, w: f64) -> Result<f64> {
    if !(h > 0.0 && w > 0.0) {
        return Err(Error::invalid(
            "box",
            format!("extent must be positive, got h={h}, w={w}"),
        ));
    }
    Ok(h.hypot(w))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Maximum-cardinality, then minimum-distance matching of predictions to
/// ground truth where pair `(i, j)` is allowed iff `dist <= sigmas[j]`.
///
/// Each connected component of the allowed-pair graph is solved separately.
pub fn match_for_eval(preds: &[[f64; 2]], gts: &[[f64; 2]], sigmas: &[f64]) -> Result<EvalMatch> {
    if sigmas.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} sigmas", gts.len()),
            actual: format!("{}", sigmas.len()),
        });
    }
    if let Some(j) = sigmas.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::invalid(
            "sigma",
            format!("sigma of gt {j} must be positive"),
        ));
    }

    let (n, m) = (preds.len(), gts.len());
    // nodes 0..n are predictions, n..n+m ground truth
    let mut parent: Vec<usize> = (0..n + m).collect();
    let mut edges = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = dist(*p, *g);
            if d <= sigmas[j] {
                edges.push((i, j, d));
                let (a, b) = (find(&mut parent, i), find(&mut parent, n + j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }

    let mut components: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> =
        Default::default();
    for &(i, j, _) in &edges {
        let root = find(&mut parent, i);
        let entry = components.entry(root).or_default();
        entry.0.push(i);
        entry.1.push(j);
    }

    let mut pairs = Vec::new();
    for (_, (mut rows, mut cols)) in components {
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let local_d = |a: usize, b: usize| {
            let d = dist(preds[rows[a]], gts[cols[b]]);
            (d <= sigmas[cols[b]]).then_some(d)
        };
        let max_d = (0..rows.len())
            .flat_map(|a| (0..cols.len()).filter_map(move |b| local_d(a, b)))
            .fold(0.0f64, f64::max);
        // every allowed pair is worth more than any total distance
        let bonus = 1.0 + (rows.len().min(cols.len()) as f64) * max_d;
        let cost = CostMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            local_d(a, b).map_or(0.0, |d| d - bonus)
        });
        for &(a, b) in hungarian(&cost)?.pairs() {
            if local_d(a, b).is_some() {
                pairs.push((rows[a], cols[b]));
            }
        }
    }
    pairs.sort_unstable();

    let tp = pairs.len() as u64;
    Ok(EvalMatch {
        counts: MatchCounts {
            tp,
            fp: n as u64 - tp,
            fn_: m as u64 - tp,
        },
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaPoint {
    /// `None` for per-point box radii.
    pub sigma: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mae: f64,
    /// Mean squared count error (no square root).
    pub mse: f64,
    pub rmse: f64,
    pub images: usize,
    /// One entry per evaluated σ; a single entry unless a range was requested.
    #[serde(skip)]
    pub per_sigma: Vec<SigmaPoint>,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    x: f64,
    y: f64,
}

/// Reads predicted points from a CSV with `x` and `y` columns; other
/// columns (for example a candidate dump's) are ignored.
pub fn read_predictions_csv(path: &std::path::Path) -> Result<Vec<[f64; 2]>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| crate::scene::csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| crate::scene::csv_error(path, e))?;
        if !(row.x.is_finite() && row.y.is_finite()) {
            return Err(Error::non_finite(format!(
                "prediction {i} in {}",
                path.display()
            )));
        }
        out.push([row.x, row.y]);
    }
    Ok(out)
}

/// Every σ the mode evaluates; `None` stands for per-point box radii.
pub fn sigma_values(mode: SigmaMode) -> Vec<Option<f64>> {
    match mode {
        SigmaMode::Fixed(s) => vec![Some(s)],
        SigmaMode::PerPointBox => vec![None],
        SigmaMode::AveragedRange { lo, hi } => (lo..=hi).map(|s| Some(f64::from(s))).collect(),
    }
}

/// Per-σ counts for one image.
pub fn image_counts(
    preds: &[[f64; 2]],
    gts: &[GroundTruthPoint],
    mode: SigmaMode,
) -> Result<Vec<MatchCounts>> {
    mode.validate()?;
    let gt_xy: Vec<[f64; 2]> = gts.iter().map(|g| [g.x, g.y]).collect();
    sigma_values(mode)
        .into_iter()
        .map(|sigma| {
            let sigmas = match sigma {
                Some(s) => vec![s; gts.len()],
                None => gts
                    .iter()
                    .enumerate()
                    .map(|(j, g)| {
                        let b = g.extent.ok_or_else(|| {
                            Error::invalid(
                                "sigma",
                                format!("gt {j} has no box for per-point sigma"),
                            )
                        })?;
                        sigma_from_box(b.h, b.w)
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            Ok(match_for_eval(preds, &gt_xy, &sigmas)?.counts)
        })
        .collect()
}

/// Combines per-image counts (`per_image[k][s]` for image `k`, σ step `s`)
/// and per-image point totals into the final metrics.
pub fn summarize(per_image: &[Vec<MatchCounts>], cfg: &EvalConfig) -> EvalResult {
    let sigmas = sigma_values(cfg.sigma);
    let mut per_sigma = Vec::with_capacity(sigmas.len());
    for (s_idx, &sigma) in sigmas.iter().enumerate() {
        let mut total = MatchCounts::default();
        for img in per_image {
            total.add(img[s_idx]);
        }
        let (precision, recall, f) = match cfg.aggregation {
            Aggregation::Micro => (total.precision(), total.recall(), total.f1()),
            Aggregation::PerImage => {
                let k = per_image.len().max(1) as f64;
                let p = per_image.iter().map(|c| c[s_idx].precision()).sum::<f64>() / k;
                let r = per_image.iter().map(|c| c[s_idx].recall()).sum::<f64>() / k;
                let f = per_image.iter().map(|c| c[s_idx].f1()).sum::<f64>() / k;
                (p, r, f)
            }
        };
        per_sigma.push(SigmaPoint {
            sigma,
            precision,
            recall,
            f1: f,
            counts: total,
        });
    }

    let steps = per_sigma.len().max(1) as f64;
    let mut counts = MatchCounts::default();
    for sp in &per_sigma {
        counts.add(sp.counts);
    }

    // every σ step sees the same point totals; use the first for counting
    let n_img = per_image.len();
    let (mut abs, mut sq) = (0.0, 0.0);
    for img in per_image {
        let c = img.first().copied().unwrap_or_default();
        let err = (c.tp + c.fp) as f64 - (c.tp + c.fn_) as f64;
        abs += err.abs();
        sq += err * err;
    }
    let denom = n_img.max(1) as f64;
    let mse = sq / denom;

    EvalResult {
        tp: counts.tp,
        fp: counts.fp,
        fn_: counts.fn_,
        precision: per_sigma.iter().map(|s| s.precision).sum::<f64>() / steps,
        recall: per_sigma.iter().map(|s| s.recall).sum::<f64>() / steps,
        f1: per_sigma.iter().map(|s| s.f1).sum::<f64>() / steps,
        mae: abs / denom,
        mse,
        rmse: mse.sqrt(),
        images: n_img,
        per_sigma,
    }
}

/// Evaluates aligned per-image predictions and ground truth.
///
/// In range mode `tp`/`fp`/`fn` are accumulated over every σ step while
/// precision, recall and F1 are averaged over the steps.
pub fn evaluate(
    preds: &[Vec<[f64; 2]>],
    gts: &[Vec<GroundTruthPoint>],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} prediction lists", gts.len()),
            actual: format!("{}", preds.len()),
        });
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| image_counts(p, g, cfg.sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&per_image, cfg))
}

/// `|s1 ∩ s2| / |s1 ∪ s2|`, defined as 1 when both sets are empty.
pub fn consistency_iou(s1: &[usize], s2: &[usize]) -> f64 {
    let a: BTreeSet<usize> = s1.iter().copied().collect();
    let b: BTreeSet<usize> = s2.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
