use crowdloc::aaps::{
    build_anchor_mask, candidate_count, decode_candidates, decode_one, infer_select,
    instantiate_anchors, Anchor, AnchorMask, RawPrediction,
};
use crowdloc::math::round_half_even;
use crowdloc::priors::AnchorPyramid;
use crowdloc::scene::{CellSize, DensityGrid};
use proptest::prelude::*;

fn arb_levels() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(1usize..24, 1..5).prop_map(|s| s.into_iter().collect())
}

/// Level index by direct band lookup: `[s_i, s_{i+1})`, unbounded top band,
/// sub-first-level densities of at least one half go to the first level.
fn oracle_level(d: f64, s: &[usize]) -> Option<usize> {
    let hits: Vec<usize> = (0..s.len())
        .filter(|&i| {
            let lo = s[i] as f64;
            let hi = s.get(i + 1).map_or(f64::INFINITY, |&v| v as f64);
            lo <= d && d < hi
        })
        .collect();
    assert!(hits.len() <= 1, "bands overlap at {d}");
    match hits.first() {
        Some(&i) => Some(i),
        None if d >= 0.5 => Some(0),
        None => None,
    }
}

fn arb_density(cols: usize, rows: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(
        prop_oneof![
            Just(0.0),
            0.0..1.0f64,
            (0u32..30).prop_map(f64::from),
            0.0..30.0f64
        ],
        cols * rows,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn count_matches_instantiation(levels in arb_levels(), cols in 1usize..7, rows in 1usize..7, seed in any::<u64>()) {
        let cell = CellSize::new(8 + (seed % 9) as u32, 8 + (seed % 5) as u32).unwrap();
        let pyr = AnchorPyramid::uniform(cell, &levels).unwrap();
        let k = levels.len();
        let mask_levels: Vec<Option<usize>> = (0..cols * rows)
            .map(|i| {
                let r = (seed.rotate_left(i as u32 * 7) ^ i as u64) % (k as u64 + 1);
                (r < k as u64).then_some(r as usize)
            })
            .collect();
        let expected: usize = mask_levels.iter().flatten().map(|&l| levels[l]).sum();
        let mask = AnchorMask::new(cols, rows, mask_levels).unwrap();
        let anchors = instantiate_anchors(&mask, &pyr).unwrap();
        prop_assert_eq!(candidate_count(&mask, &pyr).unwrap(), anchors.len());
        prop_assert_eq!(anchors.len(), expected);
        for a in &anchors {
            let (x0, y0) = ((a.u as u32 * cell.w) as f64, (a.v as u32 * cell.h) as f64);
            prop_assert!(a.base_x > x0 && a.base_x < x0 + f64::from(cell.w));
            prop_assert!(a.base_y > y0 && a.base_y < y0 + f64::from(cell.h));
        }
    }

    #[test]
    fn mask_follows_bands(levels in arb_levels(), (cols, rows, values) in (1usize..6, 1usize..6).prop_flat_map(|(c, r)| (Just(c), Just(r), arb_density(c, r)))) {
        let cell = CellSize::square(16).unwrap();
        let pyr = AnchorPyramid::uniform(cell, &levels).unwrap();
        let grid = DensityGrid::from_values(cols, rows, cell, values.clone()).unwrap();
        let mask = build_anchor_mask(&grid, &pyr).unwrap();
        for (i, &d) in values.iter().enumerate() {
            prop_assert_eq!(mask.levels()[i], oracle_level(d, &levels), "density {}", d);
        }
    }

    #[test]
    fn selection_size_per_cell(levels in arb_levels(), (cols, rows, values) in (1usize..5, 1usize..5).prop_flat_map(|(c, r)| (Just(c), Just(r), arb_density(c, r))), logits in proptest::collection::vec(-5.0..5.0f64, 0..2000)) {
        let cell = CellSize::square(16).unwrap();
        let pyr = AnchorPyramid::uniform(cell, &levels).unwrap();
        let grid = DensityGrid::from_values(cols, rows, cell, values.clone()).unwrap();
        let mask = build_anchor_mask(&grid, &pyr).unwrap();
        let anchors = instantiate_anchors(&mask, &pyr).unwrap();
        let raw: Vec<RawPrediction> = (0..anchors.len())
            .map(|i| RawPrediction { ox: 0.0, oy: 0.0, c: logits.get(i).copied().unwrap_or(0.0) })
            .collect();
        let cands = decode_candidates(&anchors, &raw, cell).unwrap();
        let picked = infer_select(&cands, &grid).unwrap();
        let mut total_cap = 0.0;
        for (i, &d) in values.iter().enumerate() {
            let (u, v) = (i % cols, i / cols);
            let avail = mask.levels()[i].map_or(0, |l| levels[l]);
            let want = (round_half_even(d) as usize).min(avail);
            let got: Vec<f64> = picked.iter().filter(|c| c.anchor.u == u && c.anchor.v == v).map(|c| c.p).collect();
            prop_assert_eq!(got.len(), want);
            // the picked ones are the most probable of the cell
            let mut all: Vec<f64> = cands.iter().filter(|c| c.anchor.u == u && c.anchor.v == v).map(|c| c.p).collect();
            all.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(&got[..], &all[..want]);
            total_cap += round_half_even(d);
        }
        prop_assert!(picked.len() as f64 <= total_cap);
    }

    #[test]
    fn decoding_is_monotone(ox in -20.0..20.0f64, c in -20.0..20.0f64, dx in 1e-3..5.0f64) {
        let cell = CellSize::new(16, 12).unwrap();
        let a = Anchor { u: 1, v: 2, level: 0, slot: 0, base_x: 24.0, base_y: 30.0 };
        let lo = decode_one(&a, RawPrediction { ox, oy: ox, c }, cell);
        let hi = decode_one(&a, RawPrediction { ox: ox + dx, oy: ox + dx, c: c + dx }, cell);
        prop_assert!(hi.x > lo.x && hi.y > lo.y && hi.p > lo.p);
        prop_assert!((lo.x - a.base_x).abs() <= 8.0 && (lo.y - a.base_y).abs() <= 6.0);
    }
}

#[test]
fn band_examples() {
    let cell = CellSize::square(16).unwrap();
    let pyr = AnchorPyramid::uniform(cell, &[1, 4, 8]).unwrap();
    let grid = DensityGrid::from_rows(cell, &[vec![5.0, 0.0, 12.0, 0.4]]).unwrap();
    let mask = build_anchor_mask(&grid, &pyr).unwrap();
    // 0-based: the 4-anchor level is index 1, the unbounded top band index 2
    assert_eq!(mask.levels(), &[Some(1), None, Some(2), None]);
}

#[test]
fn anchor_base_example() {
    let cell = CellSize::square(16).unwrap();
    let pyr = AnchorPyramid::new(
        cell,
        vec![crowdloc::priors::AnchorLevel {
            s: 1,
            centers: vec![[3.0, 5.0]],
        }],
    )
    .unwrap();
    let mask = AnchorMask::new(2, 1, vec![None, Some(0)]).unwrap();
    let anchors = instantiate_anchors(&mask, &pyr).unwrap();
    assert_eq!((anchors[0].base_x, anchors[0].base_y), (19.0, 5.0));
    let c = decode_one(&anchors[0], RawPrediction::default(), cell);
    assert_eq!((c.x, c.y, c.p), (19.0, 5.0, 0.5));
    let far = decode_one(
        &anchors[0],
        RawPrediction {
            ox: 60.0,
            oy: 0.0,
            c: 0.0,
        },
        cell,
    );
    assert!((far.x - 27.0).abs() < 1e-12);
}
