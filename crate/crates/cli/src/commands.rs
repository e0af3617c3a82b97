use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crowdloc::aaps::write_candidates_csv;
use crowdloc::count_loss::{CascadeConfig, SoftmaxScope, WeightGradient};
use crowdloc::ctr::{ctr_match, locate_loss, CtrResult, FocalParams, LocateConfig, ScoredPoint};
use crowdloc::eval::{
    image_counts, read_predictions_csv, summarize, Aggregation, EvalConfig, MatchCounts, SigmaMode,
};
use crowdloc::gradcheck::{check_count_loss, random_count_instance};
use crowdloc::priors::{inertia, learn_pyramid, pooled_relative_points, AnchorPyramid};
use crowdloc::scene::{
    load_annotations, scene_to_json, AnnotationFormat, CellSize, GroundTruthPoint, ImageSize, Scene,
};
use crowdloc::synth::{evaluate_step, generate_scene, train_toy, SceneConfig, TrainConfig};

use crate::failure::Failure;
use crate::output::{csv_bytes, json_bytes, Outputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Micro,
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Image,
    Siblings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightGradArg {
    Stop,
    Through,
}

/// Cell size as `N` (square) or `WxH`.
fn parse_cell(s: &str) -> Result<CellSize, String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<u32>()
            .map_err(|e| format!("bad cell size `{s}`: {e}"))
    };
    let cell = match s.split_once(['x', 'X']) {
        Some((w, h)) => CellSize::new(parse(w)?, parse(h)?),
        None => CellSize::square(parse(s)?),
    };
    cell.map_err(|e| e.to_string())
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got `{s}`"))?;
    let lo = lo
        .parse()
        .map_err(|_| format!("bad lower bound in `{s}`"))?;
    let hi = hi
        .parse()
        .map_err(|_| format!("bad upper bound in `{s}`"))?;
    Ok((lo, hi))
}

#[derive(Debug, Args)]
pub struct ImageSizeArgs {
    /// Image width for CSV annotations without a size sidecar.
    #[arg(long, requires = "height")]
    width: Option<u32>,
    /// Image height for CSV annotations without a size sidecar.
    #[arg(long, requires = "width")]
    height: Option<u32>,
}

impl ImageSizeArgs {
    fn size(&self) -> Option<ImageSize> {
        Some(ImageSize {
            width: self.width?,
            height: self.height?,
        })
    }
}

fn load_scene(path: &Path, size: Option<ImageSize>) -> Result<Scene, Failure> {
    let format = AnnotationFormat::from_path(path).ok_or_else(|| {
        Failure::usage(format!(
            "{}: expected a .json or .csv annotation file",
            path.display()
        ))
    })?;
    Ok(load_annotations(path, format, size)?)
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

// ---------------------------------------------------------------- learn-priors

#[derive(Debug, Args)]
pub struct LearnPriorsArgs {
    /// Annotation files (.json, or .csv with a size sidecar or --width/--height).
    #[arg(long, required = true, num_args = 1..)]
    annotations: Vec<PathBuf>,
    /// Anchors per cell of each pyramid level, sparse to dense.
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    levels: Vec<usize>,
    #[arg(long, value_parser = parse_cell, default_value = "16")]
    cell: CellSize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pyramid JSON output.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    size: ImageSizeArgs,
}

pub fn learn_priors(args: LearnPriorsArgs) -> Result<String, Failure> {
    let scenes = args
        .annotations
        .iter()
        .map(|p| load_scene(p, args.size.size()))
        .collect::<Result<Vec<_>, _>>()?;
    if scenes.iter().all(Scene::is_empty) {
        return Err(Failure::data(anyhow::anyhow!(
            "the annotation files contain no points"
        )));
    }
    let pyramid = learn_pyramid(&scenes, &args.levels, args.cell, args.seed)?;
    let pooled = pooled_relative_points(&scenes, args.cell);

    let mut outputs = Outputs::default();
    outputs.add(&args.out, format!("{}\n", pyramid.to_json()).into_bytes());
    outputs.commit()?;

    let mut summary = format!(
        "OK learn-priors levels={} points={}",
        pyramid.num_levels(),
        pooled.len()
    );
    for (i, level) in pyramid.levels().iter().enumerate() {
        let _ = write!(
            summary,
            " inertia_{i}={}",
            fmt_f(inertia(&pooled, &level.centers))
        );
    }
    let _ = write!(summary, " out={}", args.out.display());
    Ok(summary)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted points per image: CSV with x,y columns, or annotation JSON.
    #[arg(long, required = true, num_args = 1..)]
    preds: Vec<PathBuf>,
    /// Ground-truth annotations, one per prediction file, in the same order.
    #[arg(long, required = true, num_args = 1..)]
    gts: Vec<PathBuf>,
    /// fixed:<px>, box, or range:<lo>:<hi>.
    #[arg(long, default_value = "fixed:8")]
    sigma: String,
    #[arg(long, value_enum, default_value = "micro")]
    aggregate: AggregationArg,
    #[arg(long, value_enum, default_value = "json")]
    format: OutputFormat,
    /// Result file (stdout summary only when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-σ CSV (one row per evaluated σ).
    #[arg(long)]
    per_sigma: Option<PathBuf>,
    /// Worker threads for per-image matching (0 = all cores).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    size: ImageSizeArgs,
}

fn load_predictions(path: &Path, size: Option<ImageSize>) -> Result<Vec<[f64; 2]>, Failure> {
    match AnnotationFormat::from_path(path) {
        Some(AnnotationFormat::Json) => Ok(load_scene(path, size)?
            .points()
            .iter()
            .map(|g| [g.x, g.y])
            .collect()),
        _ => Ok(read_predictions_csv(path)?),
    }
}

#[derive(Debug, Serialize)]
struct SigmaRow {
    sigma: Option<f64>,
    precision: f64,
    recall: f64,
    f1: f64,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
}

pub fn evaluate(args: EvaluateArgs) -> Result<String, Failure> {
    if args.preds.len() != args.gts.len() {
        return Err(Failure::usage(format!(
            "{} prediction files but {} ground-truth files",
            args.preds.len(),
            args.gts.len()
        )));
    }
    let sigma: SigmaMode = args.sigma.parse()?;
    let cfg = EvalConfig {
        sigma,
        aggregation: match args.aggregate {
            AggregationArg::Micro => Aggregation::Micro,
            AggregationArg::PerImage => Aggregation::PerImage,
        },
    };
    let size = args.size.size();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(Failure::internal)?;
    // results are collected in input order, so aggregation does not depend on scheduling
    let counts: Vec<Vec<MatchCounts>> = pool.install(|| {
        args.preds
            .par_iter()
            .zip(&args.gts)
            .map(|(p, g)| {
                let preds = load_predictions(p, size)?;
                let gts = load_scene(g, size)?;
                Ok(image_counts(&preds, gts.points(), sigma)?)
            })
            .collect::<Result<Vec<_>, Failure>>()
    })?;
    let result = summarize(&counts, &cfg);

    let mut outputs = Outputs::default();
    if let Some(out) = &args.out {
        let bytes = match args.format {
            OutputFormat::Json => json_bytes(&result)?,
            OutputFormat::Csv => csv_bytes(|buf| {
                let mut w = csv::Writer::from_writer(buf);
                w.serialize(&result)?;
                w.flush()?;
                Ok(())
            })?,
        };
        outputs.add(out, bytes);
    }
    if let Some(path) = &args.per_sigma {
        let bytes = csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            for point in &result.per_sigma {
                w.serialize(SigmaRow {
                    sigma: point.sigma,
                    precision: point.precision,
                    recall: point.recall,
                    f1: point.f1,
                    tp: point.counts.tp,
                    fp: point.counts.fp,
                    fn_: point.counts.fn_,
                })?;
            }
            w.flush()?;
            Ok(())
        })?;
        outputs.add(path, bytes);
    }
    outputs.commit()?;

    Ok(format!(
        "OK evaluate images={} tp={} fp={} fn={} precision={} recall={} f1={} mae={} mse={} rmse={}",
        result.images,
        result.tp,
        result.fp,
        result.fn_,
        fmt_f(result.precision),
        fmt_f(result.recall),
        fmt_f(result.f1),
        fmt_f(result.mae),
        fmt_f(result.mse),
        fmt_f(result.rmse),
    ))
}

// ---------------------------------------------------------------- match-demo

#[derive(Debug, Args)]
pub struct MatchDemoArgs {
    /// Candidate dump CSV (cell_u,cell_v,level,slot,x,y,p).
    #[arg(long)]
    candidates: PathBuf,
    /// Ground-truth annotations.
    #[arg(long)]
    gts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Multiplier of the proxy distance term.
    #[arg(long, default_value_t = 1.0)]
    proxy_scale: f64,
    #[command(flatten)]
    size: ImageSizeArgs,
}

#[derive(Debug, Serialize)]
struct LossSummary {
    cls: f64,
    dist: f64,
    total: f64,
}

#[derive(Debug, Serialize)]
struct MatchLosses {
    with_ctr: LossSummary,
    without_ctr: LossSummary,
}

#[derive(Debug, Serialize)]
struct MatchReport<'a> {
    #[serde(flatten)]
    ctr: &'a CtrResult,
    losses: MatchLosses,
}

pub fn match_demo(args: MatchDemoArgs) -> Result<String, Failure> {
    if !(args.proxy_scale.is_finite() && args.proxy_scale >= 0.0) {
        return Err(Failure::usage(
            "--proxy-scale must be finite and non-negative",
        ));
    }
    let records = crowdloc::aaps::read_candidates_csv(&args.candidates)?;
    let candidates: Vec<ScoredPoint> = records
        .iter()
        .map(|r| ScoredPoint {
            x: r.x,
            y: r.y,
            p: r.p,
        })
        .collect();
    if let Some(i) = candidates
        .iter()
        .position(|c| !(c.x.is_finite() && c.y.is_finite() && (0.0..=1.0).contains(&c.p)))
    {
        return Err(Failure::data(anyhow::anyhow!(
            "candidate {i} in {} has a non-finite position or p outside [0, 1]",
            args.candidates.display()
        )));
    }
    let scene = load_scene(&args.gts, args.size.size())?;
    let gts: &[GroundTruthPoint] = scene.points();
    let cfg = LocateConfig {
        focal: FocalParams::default(),
        proxy_scale: args.proxy_scale,
    };
    let ctr = ctr_match(&candidates, gts, cfg.focal)?;
    let summary_of = |use_ctr| {
        let out = locate_loss(&candidates, gts, &ctr, use_ctr, cfg);
        LossSummary {
            cls: out.cls,
            dist: out.dist,
            total: out.total,
        }
    };
    let report = MatchReport {
        ctr: &ctr,
        losses: MatchLosses {
            with_ctr: summary_of(true),
            without_ctr: summary_of(false),
        },
    };
    let mut outputs = Outputs::default();
    outputs.add(&args.out, json_bytes(&report)?);
    outputs.commit()?;
    Ok(format!(
        "OK match-demo candidates={} gts={} matched={} proxies={} iou={}",
        candidates.len(),
        gts.len(),
        ctr.s1.len(),
        ctr.s_prime.len(),
        fmt_f(crowdloc::eval::consistency_iou(&ctr.s1, &ctr.s2)),
    ))
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "on")]
    ctr: Switch,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Standard deviation of seeded initial logit noise (0 = zero init).
    #[arg(long, default_value_t = 0.0)]
    init_noise: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    levels: Vec<usize>,
    #[arg(long, value_parser = parse_cell, default_value = "16")]
    cell: CellSize,
    /// Pyramid JSON; learned from the generated scene when omitted.
    #[arg(long)]
    pyramid: Option<PathBuf>,
    /// Learn the density grid with the counting loss instead of using ground truth.
    #[arg(long)]
    learned_density: bool,
    /// Coarsest cascade level when learning density.
    #[arg(long, default_value_t = 1)]
    t: u32,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    /// Points per cluster as lo:hi (inclusive).
    #[arg(long, value_parser = parse_range, default_value = "15:30")]
    cluster_points: (usize, usize),
    #[arg(long, default_value_t = 8.0)]
    cluster_sigma: f64,
    #[arg(long, default_value_t = 10)]
    background: usize,
    /// Match radius of the per-step F1.
    #[arg(long, default_value_t = 8.0)]
    eval_sigma: f64,
    /// Trace CSV (step,locate_loss,count_loss,iou,f1).
    #[arg(long)]
    out: PathBuf,
    /// Generated scene as annotation JSON.
    #[arg(long)]
    scene_out: Option<PathBuf>,
    /// Candidates of the trained predictor.
    #[arg(long)]
    candidates_out: Option<PathBuf>,
}

pub fn simulate(args: SimulateArgs) -> Result<String, Failure> {
    let scene = generate_scene(&SceneConfig {
        width: args.width,
        height: args.height,
        n_clusters: args.clusters,
        points_per_cluster: args.cluster_points,
        cluster_sigma: args.cluster_sigma,
        background_points: args.background,
        seed: args.seed,
    })?;
    let pyramid = match &args.pyramid {
        Some(path) => AnchorPyramid::load(path)?,
        None => learn_pyramid(
            std::slice::from_ref(&scene),
            &args.levels,
            args.cell,
            args.seed,
        )?,
    };
    if !(args.eval_sigma > 0.0 && args.eval_sigma.is_finite()) {
        return Err(Failure::usage("--eval-sigma must be positive"));
    }
    if !(args.init_noise >= 0.0 && args.init_noise.is_finite()) {
        return Err(Failure::usage(
            "--init-noise must be finite and non-negative",
        ));
    }
    let cfg = TrainConfig {
        use_ctr: args.ctr.on(),
        oracle_density: !args.learned_density,
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        init_noise: args.init_noise,
        cascade: CascadeConfig::with_levels(args.t),
        locate: LocateConfig::default(),
        eval_sigma: args.eval_sigma,
    };
    let (predictor, trace) = train_toy(&scene, &pyramid, &cfg)?;

    let mut outputs = Outputs::default();
    outputs.add(&args.out, csv_bytes(|buf| trace.write_csv(buf))?);
    if let Some(path) = &args.scene_out {
        outputs.add(path, format!("{}\n", scene_to_json(&scene)).into_bytes());
    }
    if let Some(path) = &args.candidates_out {
        let state = evaluate_step(&predictor, &scene, &pyramid, &cfg, cfg.steps)?;
        outputs.add(
            path,
            csv_bytes(|buf| write_candidates_csv(buf, &state.candidates))?,
        );
    }
    outputs.commit()?;

    let last = trace.last().expect("at least one step");
    Ok(format!(
        "OK simulate seed={} ctr={} steps={} points={} iou={} f1={} locate_loss={} out={}",
        args.seed,
        if cfg.use_ctr { "on" } else { "off" },
        trace.records.len(),
        scene.len(),
        fmt_f(last.iou),
        fmt_f(last.f1),
        fmt_f(last.locate_loss),
        args.out.display(),
    ))
}

// ---------------------------------------------------------------- grad-check

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Grid side in cells.
    #[arg(long, default_value_t = 8)]
    cells: usize,
    /// Coarsest cascade level.
    #[arg(long, default_value_t = 2)]
    t: u32,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, value_enum, default_value = "image")]
    scope: ScopeArg,
    #[arg(long, value_enum, default_value = "stop")]
    weight_grad: WeightGradArg,
    /// Normalization constant of the counting loss.
    #[arg(long, default_value_t = 1.0)]
    batch_norm: f64,
    /// Per-cell CSV (trial,cell,analytic,numeric,rel_err).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct GradCheckRow {
    trial: usize,
    cell: usize,
    analytic: f64,
    numeric: f64,
    rel_err: f64,
}

pub fn grad_check(args: GradCheckArgs) -> Result<String, Failure> {
    if args.cells == 0 || args.trials == 0 {
        return Err(Failure::usage("--cells and --trials must be positive"));
    }
    if !(args.h > 0.0 && args.h.is_finite()) || !(args.tol > 0.0) {
        return Err(Failure::usage("--h and --tol must be positive"));
    }
    let cfg = CascadeConfig {
        t: args.t,
        batch_norm: args.batch_norm,
        scope: match args.scope {
            ScopeArg::Image => SoftmaxScope::Image,
            ScopeArg::Siblings => SoftmaxScope::Siblings,
        },
        weight_grad: match args.weight_grad {
            WeightGradArg::Stop => WeightGradient::Stop,
            WeightGradArg::Through => WeightGradient::Through,
        },
    };
    cfg.validate(args.cells, args.cells)?;

    let mut rows = Vec::new();
    for trial in 0..args.trials {
        let (pred, gt) = random_count_instance(args.cells, args.seed.wrapping_add(trial as u64))?;
        for r in check_count_loss(&pred, &gt, &cfg, args.h)? {
            rows.push(GradCheckRow {
                trial,
                cell: r.index,
                analytic: r.analytic,
                numeric: r.numeric,
                rel_err: r.rel_err,
            });
        }
    }
    let max_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);

    let mut outputs = Outputs::default();
    if let Some(out) = &args.out {
        outputs.add(
            out,
            csv_bytes(|buf| {
                let mut w = csv::Writer::from_writer(buf);
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush()?;
                Ok(())
            })?,
        );
    }
    if !(max_err < args.tol) {
        return Err(Failure::internal(anyhow::anyhow!(
            "max relative error {max_err:e} exceeds {:e}",
            args.tol
        )));
    }
    outputs.commit()?;
    Ok(format!(
        "OK grad-check trials={} checked={} max_rel_err={max_err:e}",
        args.trials,
        rows.len()
    ))
}
