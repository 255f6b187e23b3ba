use proptest::prelude::*;

use super::*;
use crate::bbox::Bbox;
use crate::detector::Detection;
use crate::ndgrad::Array;

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
    Bbox::new(x1, y1, x2, y2)
}

// ---- scenes ----

#[test]
fn zero_objects_gives_background_only() {
    let spec = SceneSpec { min_objects: 0, max_objects: 0, ..SceneSpec::default() };
    let g = generate_scene(3, &spec).unwrap();
    assert!(g.scene.annotation.boxes.is_empty());
    assert_eq!((g.requested, g.dropped), (0, 0));
    assert!(g.scene.image.data().iter().all(|&v| v < 0.35));
}

#[test]
fn same_seed_gives_identical_scene() {
    let spec = SceneSpec::default();
    assert_eq!(generate_scene(11, &spec).unwrap(), generate_scene(11, &spec).unwrap());
    assert_ne!(generate_scene(11, &spec).unwrap().scene.image, generate_scene(12, &spec).unwrap().scene.image);
}

#[test]
fn crowded_specs_drop_objects_and_count_them() {
    let spec = SceneSpec {
        min_objects: 12,
        max_objects: 12,
        min_size: 20,
        max_size: 24,
        max_retries: 5,
        ..SceneSpec::default()
    };
    let g = generate_scene(0, &spec).unwrap();
    assert_eq!(g.requested, 12);
    assert!(g.dropped > 0);
    assert_eq!(g.scene.annotation.boxes.len(), 12 - g.dropped);
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SceneSpec { num_classes: 0, ..SceneSpec::default() },
        SceneSpec { num_classes: 9, ..SceneSpec::default() },
        SceneSpec { min_size: 4, ..SceneSpec::default() },
        SceneSpec { max_size: 100, ..SceneSpec::default() },
        SceneSpec { min_objects: 5, max_objects: 2, ..SceneSpec::default() },
    ] {
        assert!(generate_scene(0, &spec).is_err(), "{spec:?}");
    }
}

/// Foreground is any pixel whose darkest channel exceeds the brightest
/// possible background value.
fn foreground(img: &Array, x: usize, y: usize) -> bool {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    (0..3).all(|c| img.data()[c * w * h + y * w + x] > 0.35)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boxes_tightly_bound_their_pixels(seed in any::<u64>(), classes in 1usize..=5) {
        let spec = SceneSpec { num_classes: classes, max_objects: 5, ..SceneSpec::default() };
        let s = generate_scene(seed, &spec).unwrap().scene;
        let (h, w) = (s.height(), s.width());
        s.annotation.validate(w as f64, h as f64, classes).unwrap();
        let mut covered = vec![false; w * h];
        for b in &s.annotation.boxes {
            prop_assert!(b.width() >= 8.0 && b.height() >= 8.0);
            let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
            let (mut fx1, mut fy1, mut fx2, mut fy2) = (usize::MAX, usize::MAX, 0, 0);
            for y in y1..y2 {
                for x in x1..x2 {
                    covered[y * w + x] = true;
                    if foreground(&s.image, x, y) {
                        (fx1, fy1, fx2, fy2) = (fx1.min(x), fy1.min(y), fx2.max(x + 1), fy2.max(y + 1));
                    }
                }
            }
            prop_assert_eq!((fx1, fy1, fx2, fy2), (x1, y1, x2, y2));
        }
        for y in 0..h {
            for x in 0..w {
                prop_assert!(covered[y * w + x] || !foreground(&s.image, x, y), "stray pixel at {},{}", x, y);
            }
        }
    }
}

// ---- files ----

#[test]
fn ppm_round_trip_and_rejections() {
    let s = generate_scene(5, &SceneSpec::default()).unwrap().scene;
    let bytes = encode_ppm(&s.image).unwrap();
    assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(decode_ppm(&bytes).unwrap(), s.image);
    let commented = [b"P6\n# note\n64 64\n255\n".as_slice(), &bytes[13..]].concat();
    assert_eq!(decode_ppm(&commented).unwrap(), s.image);
    assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_ppm(b"P3\n1 1\n255\n   ").is_err());
    assert!(decode_ppm(b"P6\n1 1\n65535\n      ").is_err());
}

#[test]
fn dataset_round_trip_is_exact() {
    let spec = SceneSpec::default();
    let scenes = generate_dataset(&spec, 6, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = write_dataset(dir.path(), &scenes).unwrap();
    assert_eq!(std::fs::read_to_string(&index).unwrap().lines().count(), 6);
    for back in [read_dataset(dir.path()).unwrap(), read_dataset(&index).unwrap()] {
        assert_eq!(back, scenes);
    }
}

#[test]
fn dataset_records_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_dataset(&SceneSpec::default(), 1, 0).unwrap()).unwrap();
    let index = dir.path().join(INDEX_FILE);
    let line = std::fs::read_to_string(&index).unwrap().replace("\"labels\"", "\"extra\":1,\"labels\"");
    std::fs::write(&index, line).unwrap();
    let msg = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("extra"), "{msg}");
}

// ---- average precision ----

#[test]
fn ap_fixtures() {
    let g = vec![vec![bx(0.0, 0.0, 10.0, 10.0)]];
    assert_eq!(average_precision(&[vec![(bx(0.0, 0.0, 10.0, 10.0), 0.9)]], &g, 0.5), 1.0);
    assert_eq!(average_precision(&[vec![]], &g, 0.5), 0.0);

    let g2 = vec![vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)]];
    let d = vec![vec![
        (bx(0.0, 0.0, 10.0, 10.0), 0.9),
        (bx(40.0, 40.0, 50.0, 50.0), 0.8),
        (bx(20.0, 20.0, 30.0, 30.0), 0.7),
    ]];
    let ap = average_precision(&d, &g2, 0.5);
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15, "{ap}");
    assert!((ap - 0.8333).abs() < 1e-4);
}

#[test]
fn duplicate_detections_count_once() {
    let g = vec![vec![bx(0.0, 0.0, 10.0, 10.0)]];
    let d = vec![vec![(bx(0.0, 0.0, 10.0, 10.0), 0.9), (bx(0.0, 0.0, 10.0, 10.0), 0.8)]];
    let flags = match_detections(&d, &g, 0.5);
    assert_eq!(flags.iter().map(|f| f.1).collect::<Vec<_>>(), vec![true, false]);
    assert_eq!(average_precision(&d, &g, 0.5), 1.0);
}

/// Interpolated precision at each recall step `k / n_gt` is the best
/// precision over every prefix reaching that recall.
fn rank_walk_oracle(dets: &[(Bbox, f64)], gts: &[Bbox], t: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp_prefix = vec![0usize];
    for &i in &idx {
        let mut best: Option<usize> = None;
        for (k, g) in gts.iter().enumerate() {
            let iou = dets[i].0.iou(g);
            if !used[k] && iou >= t && best.map_or(true, |b| iou > dets[i].0.iou(&gts[b])) {
                best = Some(k);
            }
        }
        if let Some(k) = best {
            used[k] = true;
        }
        tp_prefix.push(tp_prefix.last().unwrap() + usize::from(best.is_some()));
    }
    (1..=gts.len())
        .map(|k| {
            let best = (1..tp_prefix.len())
                .filter(|&n| tp_prefix[n] >= k)
                .map(|n| tp_prefix[n] as f64 / n as f64)
                .fold(0.0, f64::max);
            best / gts.len() as f64
        })
        .sum()
}

fn arb_box() -> impl Strategy<Value = Bbox> {
    (0u8..12, 0u8..12, 2u8..8, 2u8..8).prop_map(|(x, y, w, h)| {
        bx(f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h))
    })
}

proptest! {
    #[test]
    fn ap_matches_rank_walk_oracle(
        gts in prop::collection::vec(arb_box(), 0..4),
        dets in prop::collection::vec((arb_box(), 0u8..6), 0..=5),
        t in prop::sample::select(vec![0.3, 0.5, 0.75]),
    ) {
        let dets: Vec<(Bbox, f64)> = dets.into_iter().map(|(b, s)| (b, f64::from(s) / 5.0)).collect();
        let ap = average_precision(&[dets.clone()], &[gts.clone()], t);
        let oracle = rank_walk_oracle(&dets, &gts, t);
        prop_assert!((ap - oracle).abs() < 1e-12, "{} vs {}", ap, oracle);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn ap_ignores_positive_score_scaling(
        gts in prop::collection::vec(arb_box(), 1..4),
        dets in prop::collection::vec((arb_box(), 1u8..50), 0..8),
        scale in 0.01f64..100.0,
    ) {
        let d: Vec<(Bbox, f64)> = dets.iter().map(|&(b, s)| (b, f64::from(s) / 50.0)).collect();
        let scaled: Vec<(Bbox, f64)> = d.iter().map(|&(b, s)| (b, s * scale)).collect();
        prop_assert_eq!(average_precision(&[d], &[gts.clone()], 0.5), average_precision(&[scaled], &[gts], 0.5));
    }

    #[test]
    fn ar_is_nondecreasing_in_k(
        gts in prop::collection::vec(arb_box(), 1..4),
        props in prop::collection::vec(arb_box(), 0..10),
    ) {
        let ks: Vec<usize> = (0..=10).collect();
        let ar = ar_at_k(&[props], &[gts], &ks);
        prop_assert!(ar.windows(2).all(|w| w[0].1 <= w[1].1));
    }
}

// ---- recall ----

#[test]
fn recall_fixtures() {
    let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 0.0, 30.0, 10.0), bx(40.0, 0.0, 50.0, 10.0)]];
    let exact = recall_curve(&gts, &gts, &coco_thresholds());
    assert!(exact.iter().all(|&(_, r)| r == 1.0));
    assert!(recall_curve(&[vec![]], &gts, &[0.5]).iter().all(|&(_, r)| r == 0.0));

    // IoUs 0.9, 0.6 and 0.3 by shrinking the height.
    let props = vec![vec![bx(0.0, 0.0, 10.0, 9.0), bx(20.0, 0.0, 30.0, 6.0), bx(40.0, 0.0, 50.0, 3.0)]];
    let curve = recall_curve(&props, &gts, &[0.25, 0.5, 0.6, 0.75, 0.95]);
    let want = [1.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 0.0];
    for ((_, r), w) in curve.iter().zip(want) {
        assert_eq!(*r, w);
    }
    // Oracle: AR over the ten thresholds counts {0.9 -> 9, 0.6 -> 3, 0.3 -> 0} hits.
    let ar = ar_at_k(&props, &gts, &[3])[0].1;
    assert!((ar - (9.0 + 3.0) / 30.0).abs() < 1e-15, "{ar}");
    assert!((ar_at_k(&props, &gts, &[1])[0].1 - 9.0 / 30.0).abs() < 1e-15);
}

#[test]
fn report_averages_classes_and_rejects_empty_input() {
    let scenes = generate_dataset(&SceneSpec { min_objects: 2, ..SceneSpec::default() }, 4, 1).unwrap();
    let perfect: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| {
            s.annotation
                .boxes
                .iter()
                .zip(&s.annotation.labels)
                .map(|(b, &c)| Detection { bbox: *b, class: c, score: 0.9 })
                .collect()
        })
        .collect();
    let r = EvalReport::from_detections(&scenes, &perfect, 3).unwrap();
    assert_eq!((r.ap50, r.ap75, r.map), (1.0, 1.0, 1.0));
    assert_eq!(r.ar_at_k.last().unwrap().1, 1.0);
    assert!(r.to_csv().starts_with("metric,value\nap50,1\n"));
    let err = EvalReport::from_detections(&[], &[], 3).unwrap_err().to_string();
    assert!(err.contains("no scenes"), "{err}");
}

// ---- deltas ----

#[test]
fn exact_proposals_land_in_the_centre_bin() {
    let b = bx(3.0, 4.0, 20.0, 30.0);
    let h = deltas::histogram(&[(b, Some(b)), (b, Some(b)), (b, None)]).unwrap();
    assert_eq!(h.count_at(20, 20), 2);
    assert_eq!(h.counts.iter().sum::<u64>(), 2);
    assert_eq!((h.matched, h.unmatched, h.mean_abs()), (2, 1, 0.0));
}

#[test]
fn closer_proposals_have_smaller_mean_delta() {
    let g = bx(10.0, 10.0, 30.0, 30.0);
    let far = deltas::histogram(&[(bx(14.0, 12.0, 34.0, 32.0), Some(g))]).unwrap();
    let near = deltas::histogram(&[(bx(11.0, 11.0, 31.0, 31.0), Some(g))]).unwrap();
    assert!(near.mean_abs() < far.mean_abs());
}

proptest! {
    #[test]
    fn histogram_matches_brute_force_binning(
        pairs in prop::collection::vec((arb_box(), arb_box(), any::<bool>()), 0..30),
    ) {
        let pairs: Vec<(Bbox, Option<Bbox>)> = pairs.into_iter().map(|(p, g, m)| (p, m.then_some(g))).collect();
        let h = deltas::histogram(&pairs).unwrap();
        let mut counts = vec![0u64; deltas::BINS * deltas::BINS];
        let mut out = 0;
        for (p, g) in &pairs {
            let Some(g) = g else { continue };
            let d = crate::assignment::box_delta(g, p).unwrap();
            let find = |v: f64| (0..deltas::BINS).find(|&k| {
                let lo = -1.0 + k as f64 * deltas::BIN_WIDTH;
                v >= lo - 1e-10 && (v < lo + deltas::BIN_WIDTH - 1e-10 || (k == deltas::BINS - 1 && v <= 1.0))
            });
            match (find(d.0), find(d.1)) {
                (Some(ix), Some(iy)) => counts[iy * deltas::BINS + ix] += 1,
                _ => out += 1,
            }
        }
        prop_assert_eq!(&h.counts, &counts);
        prop_assert_eq!(h.out_of_range, out);
        prop_assert_eq!(h.unmatched, pairs.iter().filter(|p| p.1.is_none()).count());
    }
}

// ---- overlay ----

#[test]
fn empty_overlay_keeps_pixels() {
    let s = generate_scene(2, &SceneSpec::default()).unwrap().scene;
    assert_eq!(draw_overlay(&s.image, &[]), s.image);
}

#[test]
fn full_image_box_draws_the_border() {
    let img = Array::zeros(&[3, 16, 16]);
    let m = Mark { bbox: bx(0.0, 0.0, 16.0, 16.0), class: 0, score: None };
    let out = draw_overlay(&img, &[m]);
    let lit = |x: usize, y: usize| out.data()[y * 16 + x] > 0.0;
    for i in 0..16 {
        assert!(lit(i, 0) && lit(i, 15) && lit(0, i) && lit(15, i));
    }
    assert!(!(1..15).any(|y| (1..15).any(|x| lit(x, y))));
}

#[test]
fn overlay_file_is_valid_ppm() {
    let s = generate_scene(2, &SceneSpec::default()).unwrap().scene;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.ppm");
    let marks: Vec<Mark> = s
        .annotation
        .boxes
        .iter()
        .map(|&b| Mark { bbox: b, class: 1, score: Some(0.87) })
        .collect();
    render_overlay(&s.image, &marks, &path).unwrap();
    let back = read_ppm(&path).unwrap();
    assert_eq!(back.shape(), s.image.shape());
    assert_eq!(back != s.image, !marks.is_empty());
}

#[test]
fn timing_statistics() {
    let t = Timing::of(&[1.0, 2.0, 3.0]);
    assert_eq!((t.mean, t.std), (2.0, 1.0));
    assert_eq!(Timing::of(&[4.0]).std, 0.0);
}
