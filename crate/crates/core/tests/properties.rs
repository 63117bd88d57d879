use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repparse_core::detect::{assign_detection_targets, box_iou, greedy_nms};
use repparse_core::loss::{compute_losses, LossConfig};
use repparse_core::metrics::{
    ap_thresholds, average_precision_part, greedy_match, iou_matrix, oracle_match, pcp, Prediction,
};
use repparse_core::optim::{optimizer_step, zero_velocity};
use repparse_core::params::init_params;
use repparse_core::repparse::{full_parse, geometry_maps_value, ParseFlags};
use repparse_core::synth::{bbox_from_labels, generate_scene, GenConfig, InstanceGt, TORSO};
use repparse_core::tensor::softmax;
use repparse_core::train::{TrainConfig, Trainer};
use repparse_core::{DecodeConfig, ModelConfig, Tape, Tensor};

const SIDE: usize = 8;
const PARTS: usize = 5;

fn small_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        pyramid_dim: 4,
        stem_dim: 4,
        block1_dim: 4,
        mask_stride: 4,
        image_height: 32,
        image_width: 32,
        size_bounds: [16.0, 32.0, 64.0, 128.0],
        ..ModelConfig::default()
    }
}

fn small_gen() -> GenConfig {
    GenConfig { height: 32, width: 32, persons: (1, 2), scale: (18.0, 26.0), ..Default::default() }
}

type Rect = (usize, usize, usize, usize);

fn paint(rect: Rect, out: &mut [u8]) {
    let (x0, y0, w, h) = rect;
    for y in y0..(y0 + h).min(SIDE) {
        for x in x0..(x0 + w).min(SIDE) {
            out[y * SIDE + x] = 1 + ((y - y0) * 4 / h) as u8;
        }
    }
}

/// Visible maps of rectangles painted in order, empty ones dropped.
fn gt_maps(rects: &[Rect]) -> Vec<Vec<u8>> {
    let mut owner = vec![usize::MAX; SIDE * SIDE];
    let mut full = Vec::new();
    for (i, &r) in rects.iter().enumerate() {
        let mut m = vec![0u8; SIDE * SIDE];
        paint(r, &mut m);
        for (o, &v) in owner.iter_mut().zip(&m) {
            if v != 0 {
                *o = i;
            }
        }
        full.push(m);
    }
    full.into_iter()
        .enumerate()
        .map(|(i, m)| m.iter().zip(&owner).map(|(&v, &o)| if o == i { v } else { 0 }).collect::<Vec<u8>>())
        .filter(|m| m.iter().any(|&v| v != 0))
        .collect()
}

#[derive(Clone, Debug)]
struct PredSpec {
    source: usize,
    rect: Rect,
    flips: Vec<(usize, u8)>,
    score: f64,
}

fn pred_maps(specs: &[PredSpec], gts: &[Vec<u8>]) -> Vec<(f64, Vec<u8>)> {
    specs
        .iter()
        .map(|s| {
            let mut m = if s.source < gts.len() {
                gts[s.source].clone()
            } else {
                let mut m = vec![0u8; SIDE * SIDE];
                paint(s.rect, &mut m);
                m
            };
            for &(i, v) in &s.flips {
                m[i] = v;
            }
            (s.score, m)
        })
        .collect()
}

fn rect() -> impl Strategy<Value = Rect> {
    (0usize..SIDE, 0usize..SIDE, 1usize..=SIDE, 1usize..=SIDE)
}

fn pred_spec() -> impl Strategy<Value = PredSpec> {
    (0usize..6, rect(), prop::collection::vec((0..SIDE * SIDE, 0u8..PARTS as u8), 0..8), 0.0f64..1.0)
        .prop_map(|(source, rect, flips, score)| PredSpec { source, rect, flips, score })
}

fn case() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<(f64, Vec<u8>)>)> {
    (prop::collection::vec(rect(), 1..=4), prop::collection::vec(pred_spec(), 0..=5)).prop_map(|(rects, specs)| {
        let gts = gt_maps(&rects);
        let preds = pred_maps(&specs, &gts);
        (gts, preds)
    })
}

fn views(preds: &[(f64, Vec<u8>)]) -> Vec<Prediction<'_>> {
    preds.iter().map(|(s, l)| Prediction { score: *s, labels: l }).collect()
}

fn refs(gts: &[Vec<u8>]) -> Vec<&[u8]> {
    gts.iter().map(|g| g.as_slice()).collect()
}

fn boxes() -> impl Strategy<Value = Vec<[f64; 4]>> {
    prop::collection::vec((0.0f64..40.0, 0.0f64..40.0, 2.0f64..30.0, 2.0f64..30.0), 0..=10)
        .prop_map(|v| v.into_iter().map(|(x, y, w, h)| [x, y, x + w, y + h]).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_sums_to_one(c in 1usize..6, n in 1usize..10, vals in prop::collection::vec(-50.0f64..50.0, 60)) {
        let x = Tensor::from_fn(&[c, n], |i| vals[i % vals.len()]);
        let s = softmax(&x, 0).unwrap();
        for j in 0..n {
            let sum: f64 = (0..c).map(|k| s.data()[k * n + j]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn geometry_is_small_at_the_part_pixel(x in 0.0f64..128.0, y in 0.0f64..128.0, s in prop::sample::select(vec![4usize, 8, 16])) {
        let (h, w) = (128 / s, 128 / s);
        let z = 64.0;
        let g = geometry_maps_value(&[(x, y)], h, w, s as f64, z);
        let (i, j) = ((x / s as f64) as usize, (y / s as f64) as usize);
        let bound = s as f64 / (2.0 * z) + 1e-12;
        prop_assert!(g.at(&[0, 0, j, i]).abs() <= bound);
        prop_assert!(g.at(&[0, 1, j, i]).abs() <= bound);
    }

    #[test]
    fn metrics_stay_in_unit_interval((gts, preds) in case()) {
        let ap = average_precision_part(&views(&preds), &refs(&gts), PARTS, &ap_thresholds());
        for v in ap.ap.iter().chain([&ap.ap_vol]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let p = pcp(&views(&preds), &refs(&gts), PARTS, 0.5);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn ap_vol_is_the_mean_over_thresholds((gts, preds) in case()) {
        let ap = average_precision_part(&views(&preds), &refs(&gts), PARTS, &ap_thresholds());
        let mean = ap.ap.iter().sum::<f64>() / 9.0;
        prop_assert!((ap.ap_vol - mean).abs() < 1e-12);
    }

    #[test]
    fn gt_order_does_not_matter((gts, preds) in case(), rot in 0usize..4) {
        // Equal IoUs fall back to the ground-truth index.
        let iou = iou_matrix(&views(&preds), &refs(&gts), PARTS);
        prop_assume!(iou.iter().all(|row| row.iter().enumerate().all(|(a, x)| *x == 0.0 || row[..a].iter().all(|y| y != x))));
        let mut shuffled = gts.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = average_precision_part(&views(&preds), &refs(&gts), PARTS, &ap_thresholds());
        let b = average_precision_part(&views(&preds), &refs(&shuffled), PARTS, &ap_thresholds());
        prop_assert_eq!(a, b);
        let pa = pcp(&views(&preds), &refs(&gts), PARTS, 0.5);
        let pb = pcp(&views(&preds), &refs(&shuffled), PARTS, 0.5);
        prop_assert!((pa - pb).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_monotone_score_maps((gts, preds) in case()) {
        let moved: Vec<(f64, Vec<u8>)> = preds.iter().map(|(s, l)| (3.0 * s * s * s + 0.5, l.clone())).collect();
        let a = average_precision_part(&views(&preds), &refs(&gts), PARTS, &ap_thresholds());
        let b = average_precision_part(&views(&moved), &refs(&gts), PARTS, &ap_thresholds());
        prop_assert_eq!(a.ap, b.ap);
    }

    #[test]
    fn duplicates_never_raise_ap((gts, preds) in case(), pick in 0usize..5) {
        prop_assume!(!preds.is_empty());
        let (s, l) = preds[pick % preds.len()].clone();
        let below = preds.iter().map(|p| p.0).filter(|&x| x < s).fold(f64::NEG_INFINITY, f64::max);
        let dup_score = if below.is_finite() { 0.5 * (s + below) } else { s - 1.0 };
        let mut more = preds.clone();
        more.push((dup_score, l));
        let ts = [0.5, 0.6, 0.7, 0.8, 0.9];
        let a = average_precision_part(&views(&preds), &refs(&gts), PARTS, &ts);
        let b = average_precision_part(&views(&more), &refs(&gts), PARTS, &ts);
        for (x, y) in a.ap.iter().zip(&b.ap) {
            prop_assert!(y <= &(x + 1e-12));
        }
    }

    #[test]
    fn greedy_agrees_with_oracle_from_half((gts, preds) in case()) {
        let (p, g) = (views(&preds), refs(&gts));
        for t in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let greedy = greedy_match(&p, &g, PARTS, t);
            let oracle = oracle_match(&p, &g, PARTS, t).unwrap();
            prop_assert_eq!(greedy.pairs.len(), oracle.pairs.len());
            prop_assert_eq!(greedy.tp_flags(p.len()), oracle.tp_flags(p.len()));
        }
    }

    #[test]
    fn greedy_never_beats_oracle_count((gts, preds) in case(), t in 0.0f64..1.0) {
        let (p, g) = (views(&preds), refs(&gts));
        let greedy = greedy_match(&p, &g, PARTS, t);
        let oracle = oracle_match(&p, &g, PARTS, t).unwrap();
        prop_assert!(greedy.pairs.len() <= oracle.pairs.len());
    }

    #[test]
    fn nms_matches_exhaustive_search(bx in boxes(), th in 0.1f64..0.9) {
        let kept = greedy_nms(&bx, th);
        let n = bx.len();
        let mut valid = Vec::new();
        for mask in 0u32..(1 << n) {
            let inside = |i: usize| mask & (1 << i) != 0;
            let separated = (0..n).all(|i| (0..i).all(|j| !(inside(i) && inside(j)) || box_iou(&bx[i], &bx[j]) <= th));
            let justified = (0..n).all(|i| inside(i) || (0..i).any(|j| inside(j) && box_iou(&bx[i], &bx[j]) > th));
            if separated && justified {
                valid.push((0..n).filter(|&i| inside(i)).collect::<Vec<_>>());
            }
        }
        prop_assert_eq!(valid, vec![kept]);
    }

    #[test]
    fn positives_sit_inside_their_box(seed in 0u64..10_000) {
        let cfg = ModelConfig::default();
        let scene = generate_scene(seed, &GenConfig::default()).unwrap();
        let t = assign_detection_targets(&scene.instances, &cfg);
        for i in t.positives() {
            let g = t.assigned[i].unwrap();
            let [x0, y0, x1, y1] = scene.instances[g].bbox;
            let (x, y) = t.centers[i];
            prop_assert!(x > x0 && x < x1 && y > y0 && y < y1);
            prop_assert!(t.boxes[i].iter().all(|&d| d > 0.0));
        }
    }

    #[test]
    fn synthetic_scenes_hold_their_invariants(seed in 0u64..100_000) {
        let scene = generate_scene(seed, &GenConfig::default()).unwrap();
        let n = scene.height * scene.width;
        for p in 0..n {
            prop_assert!(scene.instances.iter().filter(|i| i.visible_labels[p] != 0).count() <= 1);
        }
        for inst in &scene.instances {
            prop_assert!(inst.visible_labels.contains(&TORSO));
            prop_assert_eq!(Some(inst.bbox), bbox_from_labels(&inst.visible_labels, scene.width));
        }
        let apart = GenConfig { overlap_prob: 0.0, ..GenConfig::default() };
        let scene = generate_scene(seed, &apart).unwrap();
        let b: Vec<&InstanceGt> = scene.instances.iter().collect();
        for i in 0..b.len() {
            for j in 0..i {
                prop_assert_eq!(box_iou(&b[i].bbox, &b[j].bbox), 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_with_flat_weights_is_half_bce(z in prop::collection::vec(-20.0f64..20.0, 1..16), bits in any::<u16>()) {
        let y: Vec<f64> = (0..z.len()).map(|i| ((bits >> i) & 1) as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[z.len()], z.clone()).unwrap());
        let f = tape.focal_loss(x, &y, 0.0, 0.5).unwrap();
        let b = tape.bce_with_logits(x, &y).unwrap();
        let (f, b) = (tape.value(f).item(), tape.value(b).item());
        prop_assert!((f - 0.5 * b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn momentum_follows_its_recurrence(
        p0 in prop::collection::vec(-1.0f64..1.0, 6),
        g1 in prop::collection::vec(-1.0f64..1.0, 6),
        g2 in prop::collection::vec(-1.0f64..1.0, 6),
        lr in 0.001f64..0.5,
        m in 0.0f64..0.99,
    ) {
        let mk = |v: &Vec<f64>| Tensor::new(&[6], v.clone()).unwrap();
        let mut params = vec![mk(&p0)];
        let mut vel = zero_velocity(&params);
        optimizer_step(&mut params, &[mk(&g1)], &mut vel, lr, m).unwrap();
        optimizer_step(&mut params, &[mk(&g2)], &mut vel, lr, m).unwrap();
        for i in 0..6 {
            let v1 = g1[i];
            let v2 = m * v1 + g2[i];
            let want = p0[i] - lr * v1 - lr * v2;
            prop_assert!((params[0].data()[i] - want).abs() < 1e-12);
            prop_assert!((vel[0].data()[i] - v2).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn losses_are_non_negative_and_sum_with_weights(seed in 0u64..1000, full in any::<bool>()) {
        let cfg = small_model();
        let params = init_params(&cfg, seed);
        let scene = generate_scene(seed, &small_gen()).unwrap();
        let flags = if full { ParseFlags::FULL } else { ParseFlags::BASELINE };
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, r) = compute_losses(&mut tape, &b, &cfg, &scene, &LossConfig::default(), flags, &mut rng).unwrap();
        prop_assert!(r.components().iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!((r.total - r.weighted_total()).abs() <= 1e-12 * r.total.abs().max(1.0));
    }

    #[test]
    fn relation_scores_are_open_unit(seed in 0u64..1000) {
        let cfg = small_model();
        let params = init_params(&cfg, seed);
        let scene = generate_scene(seed, &small_gen()).unwrap();
        let dc = DecodeConfig { score_thresh: 0.0, ..DecodeConfig::default() };
        let out = full_parse(&scene.image, &params, &cfg, &dc, ParseFlags::FULL).unwrap();
        prop_assert!(!out.is_empty());
        for r in &out {
            prop_assert!(r.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
            let plane = r.masks.shape()[1] * r.masks.shape()[2];
            for p in 0..plane {
                let sum: f64 = (0..cfg.parts).map(|k| r.masks.data()[k * plane + p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn smoothed_loss_drops_within_fifty_steps() {
    let cfg = small_model();
    let data: Vec<_> = (0..16).map(|s| generate_scene(s, &small_gen()).unwrap()).collect();
    let tc = TrainConfig { steps: 50, batch: 2, warmup_steps: 5, ..TrainConfig::default() };
    let mut tr = Trainer::new(cfg, tc).unwrap();
    let log = tr.run(&data, |_, _| {}).unwrap();
    let mean = |r: &[repparse_core::loss::LossReport]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let first = log[0].total;
    let last = mean(&log[40..50]);
    assert!(last < first, "loss went from {first} to a trailing mean of {last}");
}
