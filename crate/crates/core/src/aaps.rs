//! Density-gated anchor selection.
//!
//! A density grid picks, per cell, one level of the anchor pyramid. Active
//! cells instantiate that level's anchors; per-anchor logits decode into
//! candidates whose offsets stay within half a cell of their anchor.
//!
//! Level and slot indices are 0-based throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{round_half_even, sigmoid};
use crate::priors::AnchorPyramid;
use crate::scene::{CellSize, DensityGrid};

/// Cells whose density is below the first level's count still receive that
/// level when the density rounds to at least one object.
pub const SUB_FIRST_LEVEL_THRESHOLD: f64 = 0.5;

/// Per-cell active level (`None` means the cell has no anchors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorMask {
    cols: usize,
    rows: usize,
    levels: Vec<Option<usize>>,
}

impl AnchorMask {
    pub fn new(cols: usize, rows: usize, levels: Vec<Option<usize>>) -> Result<Self> {
        if levels.len() != cols * rows {
            return Err(Error::DimensionMismatch {
                expected: format!("{} cells", cols * rows),
                actual: format!("{} cells", levels.len()),
            });
        }
        Ok(Self { cols, rows, levels })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn get(&self, u: usize, v: usize) -> Option<usize> {
        self.levels[v * self.cols + u]
    }

    pub fn levels(&self) -> &[Option<usize>] {
        &self.levels
    }

    /// Binary view of one level: `true` where that level is active.
    pub fn level_map(&self, level: usize) -> Vec<bool> {
        self.levels.iter().map(|l| *l == Some(level)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub u: usize,
    pub v: usize,
    pub level: usize,
    pub slot: usize,
    pub base_x: f64,
    pub base_y: f64,
}

/// Logits produced for one anchor: offsets and classification.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RawPrediction {
    pub ox: f64,
    pub oy: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub x: f64,
    pub y: f64,
    pub p: f64,
    pub anchor: Anchor,
    pub raw: RawPrediction,
}

/// Level for a single density value given increasing anchor counts.
///
/// Bands are `[s_i, s_{i+1})` with an unbounded top band; values below `s_1`
/// map to the first level when they are at least
/// [`SUB_FIRST_LEVEL_THRESHOLD`].
pub fn level_for_density(d: f64, s_values: &[usize]) -> Option<usize> {
    match s_values.iter().rposition(|&s| s as f64 <= d) {
        Some(i) => Some(i),
        None if d >= SUB_FIRST_LEVEL_THRESHOLD && !s_values.is_empty() => Some(0),
        None => None,
    }
}

pub fn build_anchor_mask(density: &DensityGrid, pyramid: &AnchorPyramid) -> Result<AnchorMask> {
    if density.cell() != pyramid.cell() {
        return Err(Error::DimensionMismatch {
            expected: format!("cell {:?}", pyramid.cell()),
            actual: format!("cell {:?}", density.cell()),
        });
    }
    let s = pyramid.s_values();
    let levels = density
        .values()
        .iter()
        .map(|&d| level_for_density(d, &s))
        .collect();
    AnchorMask::new(density.cols(), density.rows(), levels)
}

fn check_level_range(mask: &AnchorMask, pyramid: &AnchorPyramid) -> Result<()> {
    match mask
        .levels
        .iter()
        .flatten()
        .find(|&&l| l >= pyramid.num_levels())
    {
        Some(l) => Err(Error::invalid(
            "mask",
            format!(
                "level {l} exceeds pyramid with {} levels",
                pyramid.num_levels()
            ),
        )),
        None => Ok(()),
    }
}

/// Anchors of every active cell, row-major by cell then by slot.
pub fn instantiate_anchors(mask: &AnchorMask, pyramid: &AnchorPyramid) -> Result<Vec<Anchor>> {
    check_level_range(mask, pyramid)?;
    let cell = pyramid.cell();
    let mut anchors = Vec::with_capacity(candidate_count(mask, pyramid)?);
    for v in 0..mask.rows {
        for u in 0..mask.cols {
            let Some(level) = mask.get(u, v) else {
                continue;
            };
            let ox = (u as f64) * f64::from(cell.w);
            let oy = (v as f64) * f64::from(cell.h);
            for (slot, c) in pyramid.levels()[level].centers.iter().enumerate() {
                anchors.push(Anchor {
                    u,
                    v,
                    level,
                    slot,
                    base_x: ox + c[0],
                    base_y: oy + c[1],
                });
            }
        }
    }
    Ok(anchors)
}

/// Number of anchors the mask activates.
pub fn candidate_count(mask: &AnchorMask, pyramid: &AnchorPyramid) -> Result<usize> {
    check_level_range(mask, pyramid)?;
    let s = pyramid.s_values();
    Ok(mask.levels.iter().flatten().map(|&l| s[l]).sum())
}

/// Decodes one anchor's logits.
pub fn decode_one(anchor: &Anchor, raw: RawPrediction, cell: CellSize) -> Candidate {
    let (cw, ch) = (f64::from(cell.w), f64::from(cell.h));
    Candidate {
        x: anchor.base_x + sigmoid(raw.ox) * cw - cw / 2.0,
        y: anchor.base_y + sigmoid(raw.oy) * ch - ch / 2.0,
        p: sigmoid(raw.c),
        anchor: *anchor,
        raw,
    }
}

pub fn decode_candidates(
    anchors: &[Anchor],
    raw: &[RawPrediction],
    cell: CellSize,
) -> Result<Vec<Candidate>> {
    if anchors.len() != raw.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} raw predictions", anchors.len()),
            actual: format!("{}", raw.len()),
        });
    }
    if let Some(i) = raw
        .iter()
        .position(|r| !(r.ox.is_finite() && r.oy.is_finite() && r.c.is_finite()))
    {
        return Err(Error::non_finite(format!("raw prediction {i}")));
    }
    Ok(anchors
        .iter()
        .zip(raw)
        .map(|(a, r)| decode_one(a, *r, cell))
        .collect())
}

/// Inference-time selection: in each cell keep the `round(D(u, v))`
/// candidates with the highest probability (all of them if fewer exist).
///
/// Ties go to the lower slot. Output is row-major by cell, then by
/// descending probability.
pub fn infer_select(candidates: &[Candidate], density: &DensityGrid) -> Result<Vec<Candidate>> {
    let mut by_cell: BTreeMap<(usize, usize), Vec<&Candidate>> = BTreeMap::new();
    for c in candidates {
        let (u, v) = (c.anchor.u, c.anchor.v);
        if u >= density.cols() || v >= density.rows() {
            return Err(Error::invalid(
                "candidates",
                format!("candidate cell ({u}, {v}) is outside the density grid"),
            ));
        }
        by_cell.entry((v, u)).or_default().push(c);
    }
    let mut out = Vec::new();
    for ((v, u), mut group) in by_cell {
        let keep = round_half_even(density.get(u, v)).max(0.0) as usize;
        group.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.anchor.slot.cmp(&b.anchor.slot)));
        out.extend(group.into_iter().take(keep).copied());
    }
    Ok(out)
}

/// One row of the candidate dump CSV (`cell_u,cell_v,level,slot,x,y,p`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub cell_u: usize,
    pub cell_v: usize,
    pub level: usize,
    pub slot: usize,
    pub x: f64,
    pub y: f64,
    pub p: f64,
}

impl From<&Candidate> for CandidateRecord {
    fn from(c: &Candidate) -> Self {
        Self {
            cell_u: c.anchor.u,
            cell_v: c.anchor.v,
            level: c.anchor.level,
            slot: c.anchor.slot,
            x: c.x,
            y: c.y,
            p: c.p,
        }
    }
}

pub fn write_candidates_csv<W: std::io::Write>(
    writer: W,
    candidates: &[Candidate],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for c in candidates {
        w.serialize(CandidateRecord::from(c))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidates_csv(path: &std::path::Path) -> Result<Vec<CandidateRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| crate::scene::csv_error(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| crate::scene::csv_error(path, e)))
        .collect()
}
