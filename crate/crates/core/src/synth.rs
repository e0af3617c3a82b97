//! Synthetic crowds and a toy training loop.
//!
//! The toy predictor owns free logits for every anchor slot of every cell
//! and level, standing in for learned locating heads, plus an optional
//! per-cell density logit. Training runs plain gradient descent on the full
//! loss stack so the matching behaviour can be observed step by step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::aaps::{
    build_anchor_mask, decode_candidates, infer_select, instantiate_anchors, Anchor, Candidate,
    RawPrediction,
};
use crate::count_loss::{count_loss, CascadeConfig};
use crate::ctr::{ctr_match, locate_loss, CtrResult, LocateConfig, ScoredPoint};
use crate::error::{Error, Result};
use crate::eval::{consistency_iou, match_for_eval};
use crate::math::{sigmoid, sigmoid_grad_from_output};
use crate::priors::AnchorPyramid;
use crate::scene::{gt_density_grid, DensityGrid, GroundTruthPoint, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub n_clusters: usize,
    /// Inclusive range of points drawn per cluster.
    pub points_per_cluster: (usize, usize),
    pub cluster_sigma: f64,
    pub background_points: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            n_clusters: 2,
            points_per_cluster: (10, 20),
            cluster_sigma: 6.0,
            background_points: 8,
            seed: 0,
        }
    }
}

/// Gaussian clusters around uniform centers plus uniform background points,
/// all clipped into the image.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    Ok(generate_scene_with_centers(cfg)?.0)
}

/// [`generate_scene`] that also returns the drawn cluster centers.
pub fn generate_scene_with_centers(cfg: &SceneConfig) -> Result<(Scene, Vec<[f64; 2]>)> {
    if cfg.points_per_cluster.0 > cfg.points_per_cluster.1 {
        return Err(Error::invalid(
            "points_per_cluster",
            "lower bound exceeds upper bound",
        ));
    }
    if !(cfg.cluster_sigma >= 0.0 && cfg.cluster_sigma.is_finite()) {
        return Err(Error::invalid(
            "cluster_sigma",
            "must be finite and non-negative",
        ));
    }
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::invalid("scene", "width and height must be positive"));
    }
    let (w, h) = (f64::from(cfg.width), f64::from(cfg.height));
    let clip = |v: f64, side: f64| v.clamp(0.0, side.next_down());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.cluster_sigma).expect("validated sigma");
    let mut points = Vec::new();
    let mut centers = Vec::with_capacity(cfg.n_clusters);
    for _ in 0..cfg.n_clusters {
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        centers.push([cx, cy]);
        let n = rng.random_range(cfg.points_per_cluster.0..=cfg.points_per_cluster.1);
        for _ in 0..n {
            let x = clip(cx + noise.sample(&mut rng), w);
            let y = clip(cy + noise.sample(&mut rng), h);
            points.push(GroundTruthPoint::new(x, y));
        }
    }
    for _ in 0..cfg.background_points {
        points.push(GroundTruthPoint::new(
            rng.random_range(0.0..w),
            rng.random_range(0.0..h),
        ));
    }
    Ok((Scene::new(cfg.width, cfg.height, points)?, centers))
}

/// Free per-anchor logits for every `(cell, level, slot)` of a grid, plus
/// per-cell density logits decoded as `density_cap * sigmoid(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictor {
    cols: usize,
    rows: usize,
    /// start of each level's block inside one cell's slots
    level_offsets: Vec<usize>,
    per_cell: usize,
    params: Vec<RawPrediction>,
    density_logits: Vec<f64>,
    density_cap: f64,
}

impl ToyPredictor {
    pub fn zeros(cols: usize, rows: usize, pyramid: &AnchorPyramid) -> Self {
        let mut level_offsets = Vec::with_capacity(pyramid.num_levels());
        let mut per_cell = 0;
        for level in pyramid.levels() {
            level_offsets.push(per_cell);
            per_cell += level.s;
        }
        let s_top = pyramid.levels().last().map_or(1, |l| l.s);
        Self {
            cols,
            rows,
            level_offsets,
            per_cell,
            params: vec![RawPrediction::default(); cols * rows * per_cell],
            density_logits: vec![0.0; cols * rows],
            density_cap: 2.0 * s_top as f64,
        }
    }

    pub fn param_index(&self, anchor: &Anchor) -> usize {
        (anchor.v * self.cols + anchor.u) * self.per_cell
            + self.level_offsets[anchor.level]
            + anchor.slot
    }

    pub fn params(&self) -> &[RawPrediction] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [RawPrediction] {
        &mut self.params
    }

    pub fn density_logits(&self) -> &[f64] {
        &self.density_logits
    }

    pub fn raw_for(&self, anchors: &[Anchor]) -> Vec<RawPrediction> {
        anchors
            .iter()
            .map(|a| self.params[self.param_index(a)])
            .collect()
    }

    pub fn predicted_density(&self, template: &DensityGrid) -> Result<DensityGrid> {
        let values = self
            .density_logits
            .iter()
            .map(|&d| self.density_cap * sigmoid(d))
            .collect();
        DensityGrid::from_values(self.cols, self.rows, template.cell(), values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub use_ctr: bool,
    /// Use the ground-truth count grid instead of learning one.
    pub oracle_density: bool,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Standard deviation of the seeded initial logit noise (0 keeps the zero init).
    pub init_noise: f64,
    pub cascade: CascadeConfig,
    pub locate: LocateConfig,
    /// Match radius of the per-step F1.
    pub eval_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            use_ctr: true,
            oracle_density: true,
            steps: 500,
            lr: 0.5,
            seed: 0,
            init_noise: 0.0,
            cascade: CascadeConfig::default(),
            locate: LocateConfig::default(),
            eval_sigma: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub locate_loss: f64,
    pub count_loss: f64,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// CSV with header `step,locate_loss,count_loss,iou,f1`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything computed for the current parameters at one step.
#[derive(Debug, Clone)]
pub struct StepState {
    pub density: DensityGrid,
    pub candidates: Vec<Candidate>,
    pub ctr: CtrResult,
    pub record: TraceRecord,
}

struct StepGrads {
    params: Vec<(usize, RawPrediction)>,
    density: Vec<f64>,
}

fn forward(
    step: usize,
    predictor: &ToyPredictor,
    scene: &Scene,
    gt_grid: &DensityGrid,
    pyramid: &AnchorPyramid,
    cfg: &TrainConfig,
) -> Result<(StepState, StepGrads)> {
    let density = if cfg.oracle_density {
        gt_grid.clone()
    } else {
        predictor.predicted_density(gt_grid)?
    };
    let mask = build_anchor_mask(&density, pyramid)?;
    let anchors = instantiate_anchors(&mask, pyramid)?;
    let raw = predictor.raw_for(&anchors);
    let candidates =
        decode_candidates(&anchors, &raw, pyramid.cell()).map_err(|e| Error::Diverged {
            step,
            what: e.to_string(),
        })?;
    let scored: Vec<ScoredPoint> = candidates.iter().map(ScoredPoint::from).collect();
    let gts = scene.points();

    let ctr = ctr_match(&scored, gts, cfg.locate.focal)?;
    let loc = locate_loss(&scored, gts, &ctr, cfg.use_ctr, cfg.locate);

    let count = if cfg.oracle_density {
        None
    } else {
        Some(count_loss(&density, gt_grid, &cfg.cascade)?)
    };

    let selected = infer_select(&candidates, &density)?;
    let sel_xy: Vec<[f64; 2]> = selected.iter().map(|c| [c.x, c.y]).collect();
    let gt_xy: Vec<[f64; 2]> = gts.iter().map(|g| [g.x, g.y]).collect();
    let f1 = match_for_eval(&sel_xy, &gt_xy, &vec![cfg.eval_sigma; gts.len()])?
        .counts
        .f1();

    let record = TraceRecord {
        step,
        locate_loss: loc.total,
        count_loss: count.as_ref().map_or(0.0, |c| c.total),
        iou: consistency_iou(&ctr.s1, &ctr.s2),
        f1,
    };
    if !(record.locate_loss.is_finite() && record.count_loss.is_finite()) {
        return Err(Error::Diverged {
            step,
            what: "non-finite loss".to_string(),
        });
    }

    let cell = pyramid.cell();
    let (cw, ch) = (f64::from(cell.w), f64::from(cell.h));
    let params = candidates
        .iter()
        .zip(&loc.grads)
        .map(|(c, g)| {
            let grad = RawPrediction {
                ox: g[0] * cw * sigmoid_grad_from_output(sigmoid(c.raw.ox)),
                oy: g[1] * ch * sigmoid_grad_from_output(sigmoid(c.raw.oy)),
                c: g[2] * sigmoid_grad_from_output(c.p),
            };
            (predictor.param_index(&c.anchor), grad)
        })
        .collect();
    let density_grad = match &count {
        Some(out) => out
            .grad
            .iter()
            .zip(predictor.density_logits())
            .map(|(g, &d)| g * predictor.density_cap * sigmoid_grad_from_output(sigmoid(d)))
            .collect(),
        None => Vec::new(),
    };

    Ok((
        StepState {
            density,
            candidates,
            ctr,
            record,
        },
        StepGrads {
            params,
            density: density_grad,
        },
    ))
}

/// Evaluates the predictor once without updating it.
pub fn evaluate_step(
    predictor: &ToyPredictor,
    scene: &Scene,
    pyramid: &AnchorPyramid,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepState> {
    let gt_grid = gt_density_grid(scene, pyramid.cell());
    Ok(forward(step, predictor, scene, &gt_grid, pyramid, cfg)?.0)
}

/// Stepwise gradient-descent loop over one scene.
///
/// Each [`Trainer::step`] measures the current predictor (losses, consistency
/// IOU of the dual-matched and top-probability sets, F1 of the inference
/// selection) and then applies one update with the matchings frozen.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    scene: &'a Scene,
    pyramid: &'a AnchorPyramid,
    cfg: TrainConfig,
    gt_grid: DensityGrid,
    predictor: ToyPredictor,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// Zero-initialized logits, or seeded Gaussian logits when `cfg.init_noise > 0`.
    pub fn new(scene: &'a Scene, pyramid: &'a AnchorPyramid, cfg: TrainConfig) -> Result<Self> {
        if scene.is_empty() {
            return Err(Error::invalid(
                "scene",
                "training needs at least one annotated point",
            ));
        }
        if !cfg.lr.is_finite() || cfg.lr < 0.0 {
            return Err(Error::invalid("lr", "must be finite and non-negative"));
        }
        if !(cfg.init_noise >= 0.0 && cfg.init_noise.is_finite()) {
            return Err(Error::invalid(
                "init_noise",
                "must be finite and non-negative",
            ));
        }
        let gt_grid = gt_density_grid(scene, pyramid.cell());
        if !cfg.oracle_density {
            cfg.cascade.validate(gt_grid.cols(), gt_grid.rows())?;
        }
        let mut predictor = ToyPredictor::zeros(gt_grid.cols(), gt_grid.rows(), pyramid);
        if cfg.init_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let noise = Normal::new(0.0, cfg.init_noise).expect("validated noise");
            for p in predictor.params_mut() {
                p.ox = noise.sample(&mut rng);
                p.oy = noise.sample(&mut rng);
                p.c = noise.sample(&mut rng);
            }
        }
        Ok(Self {
            scene,
            pyramid,
            cfg,
            gt_grid,
            predictor,
            step: 0,
        })
    }

    pub fn predictor(&self) -> &ToyPredictor {
        &self.predictor
    }

    /// Measures the current state without updating.
    pub fn peek(&self) -> Result<StepState> {
        Ok(forward(
            self.step,
            &self.predictor,
            self.scene,
            &self.gt_grid,
            self.pyramid,
            &self.cfg,
        )?
        .0)
    }

    pub fn step(&mut self) -> Result<StepState> {
        let (state, grads) = forward(
            self.step,
            &self.predictor,
            self.scene,
            &self.gt_grid,
            self.pyramid,
            &self.cfg,
        )?;
        let lr = self.cfg.lr;
        for (idx, g) in grads.params {
            let p = &mut self.predictor.params[idx];
            p.ox -= lr * g.ox;
            p.oy -= lr * g.oy;
            p.c -= lr * g.c;
        }
        for (d, g) in self.predictor.density_logits.iter_mut().zip(&grads.density) {
            *d -= lr * g;
        }
        self.step += 1;
        Ok(state)
    }

    pub fn into_predictor(self) -> ToyPredictor {
        self.predictor
    }
}

/// Runs `cfg.steps` steps of a fresh [`Trainer`] and collects the trace.
pub fn train_toy(
    scene: &Scene,
    pyramid: &AnchorPyramid,
    cfg: &TrainConfig,
) -> Result<(ToyPredictor, TrainTrace)> {
    if cfg.steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    let mut trainer = Trainer::new(scene, pyramid, *cfg)?;
    let mut trace = TrainTrace::default();
    for _ in 0..cfg.steps {
        trace.records.push(trainer.step()?.record);
    }
    Ok((trainer.into_predictor(), trace))
}
