use crowdloc::ctr::{hungarian, dual_cost, FocalParams, ScoredPoint};
use crowdloc::priors::AnchorPyramid;
use crowdloc::scene::{gt_density_grid, CellSize, GroundTruthPoint, Scene};
use crowdloc::synth::{generate_scene, generate_scene_with_centers, train_toy, SceneConfig, TrainConfig, Trainer};

fn pyramid(levels: &[usize]) -> AnchorPyramid {
    AnchorPyramid::uniform(CellSize::square(16).unwrap(), levels).unwrap()
}

fn mixed(seed: u64) -> SceneConfig {
    SceneConfig {
        width: 128,
        height: 128,
        n_clusters: 2,
        points_per_cluster: (15, 30),
        cluster_sigma: 8.0,
        background_points: 10,
        seed,
    }
}

#[test]
fn cluster_points_concentrate() {
    let sigma = 2.0;
    let mut within = Vec::new();
    for seed in 0..100 {
        let cfg = SceneConfig {
            width: 400,
            height: 400,
            n_clusters: 1,
            points_per_cluster: (20, 20),
            cluster_sigma: sigma,
            background_points: 0,
            seed,
        };
        let (scene, centers) = generate_scene_with_centers(&cfg).unwrap();
        let c = centers[0];
        if c[0] < 3.0 * sigma || c[1] < 3.0 * sigma || c[0] > 400.0 - 3.0 * sigma || c[1] > 400.0 - 3.0 * sigma {
            continue;
        }
        assert_eq!(scene.len(), 20);
        let n = scene
            .points()
            .iter()
            .filter(|p| (p.x - c[0]).hypot(p.y - c[1]) <= 3.0 * sigma)
            .count();
        within.push(n);
    }
    // P(r <= 3σ) = 1 - e^{-4.5} ≈ 0.989 per point, so about 98% of scenes keep 19 or 20
    let good = within.iter().filter(|&&n| n >= 19).count() as f64 / within.len() as f64;
    let mean = within.iter().sum::<usize>() as f64 / within.len() as f64;
    assert!(within.len() >= 90);
    assert!(good >= 0.9, "only {good} of scenes had >= 19 points within 3σ");
    assert!(mean >= 19.5, "mean {mean}");
}

#[test]
fn mixed_scenes_have_dense_and_sparse_cells() {
    let cell = CellSize::square(16).unwrap();
    for seed in 0..30 {
        let scene = generate_scene(&mixed(seed)).unwrap();
        let grid = gt_density_grid(&scene, cell);
        let max = grid.values().iter().copied().fold(0.0, f64::max);
        assert!(max >= 4.0, "seed {seed}: densest cell holds {max}");
        assert!(grid.values().iter().any(|&v| v == 1.0), "seed {seed}: no sparse cell");
    }
}

#[test]
fn training_is_deterministic() {
    let scene = generate_scene(&mixed(4)).unwrap();
    let pyr = pyramid(&[4, 8, 16]);
    let cfg = TrainConfig { steps: 40, lr: 0.05, init_noise: 1.0, seed: 4, ..TrainConfig::default() };
    let (pa, ta) = train_toy(&scene, &pyr, &cfg).unwrap();
    let (pb, tb) = train_toy(&scene, &pyr, &cfg).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(pa, pb);
    let mut a = Vec::new();
    let mut b = Vec::new();
    ta.write_csv(&mut a).unwrap();
    tb.write_csv(&mut b).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("step,locate_loss,count_loss,iou,f1\n"));
}

#[test]
fn single_point_loss_decreases() {
    let scene = Scene::new(64, 64, vec![GroundTruthPoint::new(21.0, 40.0)]).unwrap();
    let cfg = TrainConfig { steps: 200, lr: 0.5, ..TrainConfig::default() };
    let (_, trace) = train_toy(&scene, &pyramid(&[1, 4, 8]), &cfg).unwrap();
    let first = trace.records[0].locate_loss;
    let last = trace.last().unwrap().locate_loss;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(trace.last().unwrap().f1, 1.0);
}

#[test]
fn zero_lr_trace_is_constant() {
    let scene = generate_scene(&mixed(2)).unwrap();
    let cfg = TrainConfig { steps: 5, lr: 0.0, init_noise: 0.5, seed: 2, ..TrainConfig::default() };
    let (_, trace) = train_toy(&scene, &pyramid(&[2, 4, 8]), &cfg).unwrap();
    for r in &trace.records[1..] {
        let first = trace.records[0];
        assert_eq!((r.locate_loss, r.count_loss, r.iou, r.f1), (first.locate_loss, first.count_loss, first.iou, first.f1));
    }
}

#[test]
fn every_step_satisfies_matching_invariants() {
    let scene = generate_scene(&mixed(6)).unwrap();
    let pyr = pyramid(&[4, 8, 16]);
    let cfg = TrainConfig { lr: 0.05, init_noise: 2.0, seed: 6, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&scene, &pyr, cfg).unwrap();
    let gts = scene.points();
    let mut last_step = None;
    for _ in 0..60 {
        let state = trainer.step().unwrap();
        if let Some(prev) = last_step {
            assert!(state.record.step > prev);
        }
        last_step = Some(state.record.step);
        assert!((0.0..=1.0).contains(&state.record.iou));
        let ctr = &state.ctr;
        let k = state.candidates.len().min(gts.len());
        assert_eq!(ctr.s1.len(), k);
        assert_eq!(ctr.s2.len(), k);
        assert!(ctr.s_prime.iter().all(|i| !ctr.s1.contains(i)));
        assert_eq!(ctr.g_prime.len(), ctr.s_prime.len());
        assert_eq!(ctr.omega2.len(), ctr.s_prime.len());
        // omega1 is an optimal dual matching
        let scored: Vec<ScoredPoint> = state.candidates.iter().map(ScoredPoint::from).collect();
        let cost = dual_cost(&scored, gts, FocalParams::default());
        let best = hungarian(&cost).unwrap().cost(&cost);
        assert_eq!(ctr.omega1_matching().cost(&cost), best);
    }
}

#[test]
fn learned_density_reduces_count_loss() {
    let scene = generate_scene(&mixed(3)).unwrap();
    let cfg = TrainConfig {
        oracle_density: false,
        steps: 150,
        lr: 0.2,
        cascade: crowdloc::count_loss::CascadeConfig::with_levels(2),
        ..TrainConfig::default()
    };
    let (_, trace) = train_toy(&scene, &pyramid(&[1, 4, 8]), &cfg).unwrap();
    let first = trace.records[0].count_loss;
    let last = trace.last().unwrap().count_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}
