//! Dense center/box/offset head over the pyramid, candidate decoding and
//! training-target assignment.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::autodiff::{Tape, Var};
use crate::backbone::FeaturePyramid;
use crate::config::{DecodeConfig, ModelConfig};
use crate::error::Result;
use crate::math;
use crate::params::Bound;
use crate::synth::InstanceGt;
use crate::tensor::Tensor;

/// Raw dense outputs of one level, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DenseLevel {
    pub stride: usize,
    /// `[1, h, w]` pre-sigmoid center scores.
    pub center_logits: Var,
    /// `[4, h, w]` log box distances in units of the stride.
    pub box_raw: Var,
    /// `[2C, h, w]` normalised part offsets, `(Δx_k, Δy_k)` interleaved.
    pub offsets: Var,
}

impl DenseLevel {
    pub fn size(&self, tape: &Tape) -> (usize, usize) {
        let s = tape.shape(self.center_logits);
        (s[1], s[2])
    }
}

/// Shared tower (two 3×3 conv + relu) then 1×1 center / box / offset branches on every level.
pub fn dense_head_forward(tape: &mut Tape, p: &Bound, pyr: &FeaturePyramid) -> Result<Vec<DenseLevel>> {
    let mut out = Vec::with_capacity(5);
    for (i, &lvl) in pyr.levels.iter().enumerate() {
        let t = tape.conv2d(lvl, p.get("head.tower1.weight"), Some(p.get("head.tower1.bias")), 1, 1)?;
        let t = tape.relu(t);
        let t = tape.conv2d(t, p.get("head.tower2.weight"), Some(p.get("head.tower2.bias")), 1, 1)?;
        let t = tape.relu(t);
        let center_logits = tape.conv2d(t, p.get("head.center.weight"), Some(p.get("head.center.bias")), 1, 0)?;
        let box_raw = tape.conv2d(t, p.get("head.box.weight"), Some(p.get("head.box.bias")), 1, 0)?;
        let offsets = tape.conv2d(t, p.get("head.offset.weight"), Some(p.get("head.offset.bias")), 1, 0)?;
        out.push(DenseLevel { stride: ModelConfig::STRIDES[i], center_logits, box_raw, offsets });
    }
    Ok(out)
}

/// Post-activation dense maps of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMaps {
    pub stride: usize,
    /// `[1, h, w]`, in (0, 1).
    pub scores: Tensor,
    /// `[4, h, w]` distances `(l, t, r, b)` in pixels.
    pub boxes: Tensor,
    /// `[2C, h, w]`.
    pub offsets: Tensor,
}

/// Decoded values of every level.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutputs {
    pub levels: Vec<DenseMaps>,
}

impl DenseOutputs {
    pub fn from_tape(tape: &Tape, dense: &[DenseLevel]) -> Self {
        let levels = dense
            .iter()
            .map(|d| {
                let stride = d.stride as f64;
                DenseMaps {
                    stride: d.stride,
                    scores: crate::tensor::sigmoid(tape.value(d.center_logits)),
                    // Clamp keeps exp finite on untrained weights.
                    boxes: crate::tensor::map(tape.value(d.box_raw), |r| math::exp(r.min(20.0)) * stride),
                    offsets: tape.value(d.offsets).clone(),
                }
            })
            .collect();
        DenseOutputs { levels }
    }
}

/// A decoded person hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCandidate {
    /// Pyramid level id, 3..=7.
    pub level: usize,
    /// Row-major index within the level.
    pub index: usize,
    /// `(x_h, y_h)` in image pixels.
    pub location: (f64, f64),
    pub score: f64,
    /// `(x0, y0, x1, y1)`.
    pub bbox: [f64; 4],
    /// `C` pairs of normalised offsets.
    pub part_offsets: Vec<(f64, f64)>,
}

/// Image-pixel location of cell `(i, j)` at `stride`.
#[inline]
pub fn cell_center(i: usize, j: usize, stride: usize) -> (f64, f64) {
    ((i as f64 + 0.5) * stride as f64, (j as f64 + 0.5) * stride as f64)
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS over boxes already sorted by descending score; returns kept positions.
pub fn greedy_nms(boxes: &[[f64; 4]], iou_thresh: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if keep.iter().all(|&k| box_iou(&boxes[k], b) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

fn by_score_then_position(a: &InstanceCandidate, b: &InstanceCandidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.level.cmp(&b.level))
        .then(a.index.cmp(&b.index))
}

/// Thresholds scores, keeps the per-level top-k, decodes boxes and offsets,
/// and applies greedy box NMS. Output is in descending score order.
pub fn decode_candidates(dense: &DenseOutputs, dc: &DecodeConfig) -> Vec<InstanceCandidate> {
    let mut all = Vec::new();
    for (li, maps) in dense.levels.iter().enumerate() {
        let (h, w) = (maps.scores.shape()[1], maps.scores.shape()[2]);
        let parts = maps.offsets.shape()[0] / 2;
        let mut level: Vec<InstanceCandidate> = Vec::new();
        for idx in 0..h * w {
            let score = maps.scores.data()[idx];
            if score <= dc.score_thresh {
                continue;
            }
            let (i, j) = (idx % w, idx / w);
            let (x, y) = cell_center(i, j, maps.stride);
            let d = |c: usize| maps.boxes.data()[c * h * w + idx];
            let part_offsets = (0..parts)
                .map(|k| (maps.offsets.data()[2 * k * h * w + idx], maps.offsets.data()[(2 * k + 1) * h * w + idx]))
                .collect();
            level.push(InstanceCandidate {
                level: FeaturePyramid::LEVEL_IDS[li],
                index: idx,
                location: (x, y),
                score,
                bbox: [x - d(0), y - d(1), x + d(2), y + d(3)],
                part_offsets,
            });
        }
        level.sort_by(by_score_then_position);
        level.truncate(dc.topk_per_level);
        all.extend(level);
    }
    all.sort_by(by_score_then_position);
    if dc.nms {
        let boxes: Vec<[f64; 4]> = all.iter().map(|c| c.bbox).collect();
        let keep = greedy_nms(&boxes, dc.nms_iou);
        let mut kept = Vec::with_capacity(keep.len());
        let mut it = keep.into_iter().peekable();
        for (i, c) in all.into_iter().enumerate() {
            if it.peek() == Some(&i) {
                kept.push(c);
                it.next();
            }
        }
        kept
    } else {
        all
    }
}

/// Per-location training targets, flattened level-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// Assigned ground-truth instance per location.
    pub assigned: Vec<Option<usize>>,
    /// `(l, t, r, b)` per location (zero for negatives).
    pub boxes: Vec<[f64; 4]>,
    /// `2C` normalised offsets per location.
    pub offsets: Vec<Vec<f64>>,
    /// `2C` flags per location: 1 where the part is present on a positive.
    pub offset_mask: Vec<Vec<f64>>,
    /// Stride of each location.
    pub strides: Vec<usize>,
    /// Image-pixel center of each location.
    pub centers: Vec<(f64, f64)>,
    /// Start of each level in the flattened order, plus the total.
    pub level_starts: [usize; 6],
}

impl DetectionTargets {
    pub fn len(&self) -> usize {
        self.assigned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assigned.is_empty()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.assigned.iter().enumerate().filter_map(|(i, a)| a.map(|_| i)).collect()
    }

    /// `(level index 0..5, row-major index)` of a flattened location.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let l = (0..5).rev().find(|&l| self.level_starts[l] <= flat).unwrap_or(0);
        (l, flat - self.level_starts[l])
    }
}

/// Level grid sizes for an image: repeated ceil-halving from the stride-2 stem.
pub fn level_sizes(cfg: &ModelConfig) -> [(usize, usize); 5] {
    let half = |n: usize| n.div_ceil(2);
    let (mut h, mut w) = (cfg.image_height, cfg.image_width);
    for _ in 0..3 {
        h = half(h);
        w = half(w);
    }
    let mut out = [(0, 0); 5];
    for o in out.iter_mut() {
        *o = (h, w);
        h = half(h);
        w = half(w);
    }
    out
}

/// Center-sampled, size-range-gated assignment of locations to instances.
/// Ties go to the smallest box area.
pub fn assign_detection_targets(gt: &[InstanceGt], cfg: &ModelConfig) -> DetectionTargets {
    let parts = cfg.parts;
    let z = cfg.norm();
    let sizes = level_sizes(cfg);
    let total: usize = sizes.iter().map(|(h, w)| h * w).sum();
    let mut t = DetectionTargets {
        assigned: vec![None; total],
        boxes: vec![[0.0; 4]; total],
        offsets: vec![vec![0.0; 2 * parts]; total],
        offset_mask: vec![vec![0.0; 2 * parts]; total],
        strides: Vec::with_capacity(total),
        centers: Vec::with_capacity(total),
        level_starts: [0; 6],
    };
    let mut flat = 0;
    for (l, &(h, w)) in sizes.iter().enumerate() {
        t.level_starts[l] = flat;
        let stride = ModelConfig::STRIDES[l];
        let (lo, hi) = cfg.level_range(l);
        let radius = cfg.center_radius * stride as f64;
        for j in 0..h {
            for i in 0..w {
                let (x, y) = cell_center(i, j, stride);
                t.strides.push(stride);
                t.centers.push((x, y));
                let mut best: Option<(usize, f64)> = None;
                for (gi, inst) in gt.iter().enumerate() {
                    let [x0, y0, x1, y1] = inst.bbox;
                    let d = [x - x0, y - y0, x1 - x, y1 - y];
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                    if (x - cx).abs() > radius || (y - cy).abs() > radius {
                        continue;
                    }
                    let m = d.iter().cloned().fold(0.0, f64::max);
                    if m < lo || m >= hi {
                        continue;
                    }
                    let area = (x1 - x0) * (y1 - y0);
                    if best.is_none_or(|(_, a)| area < a) {
                        best = Some((gi, area));
                    }
                }
                if let Some((gi, _)) = best {
                    let inst = &gt[gi];
                    let [x0, y0, x1, y1] = inst.bbox;
                    t.assigned[flat] = Some(gi);
                    t.boxes[flat] = [x - x0, y - y0, x1 - x, y1 - y];
                    for k in 0..parts {
                        if let (Some(c), true) = (inst.centroids[k], inst.present[k]) {
                            t.offsets[flat][2 * k] = (c[0] - x) / z;
                            t.offsets[flat][2 * k + 1] = (c[1] - y) / z;
                            t.offset_mask[flat][2 * k] = 1.0;
                            t.offset_mask[flat][2 * k + 1] = 1.0;
                        }
                    }
                }
                flat += 1;
            }
        }
    }
    t.level_starts[5] = flat;
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;
    use alloc::vec;

    fn maps(stride: usize, h: usize, w: usize, parts: usize, scores: &[(usize, f64)]) -> DenseMaps {
        let mut s = Tensor::full(&[1, h, w], 0.01);
        for &(i, v) in scores {
            s.data_mut()[i] = v;
        }
        DenseMaps {
            stride,
            scores: s,
            boxes: Tensor::full(&[4, h, w], 10.0),
            offsets: Tensor::zeros(&[2 * parts, h, w]),
        }
    }

    #[test]
    fn channel_counts_and_prior_scores() {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg, 0);
        for n in ["head.tower1.weight", "head.tower2.weight", "head.center.weight"] {
            let shape = params.get(n).unwrap().shape().to_vec();
            params.insert(n, Tensor::zeros(&shape));
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let img = tape.constant(Tensor::full(&[3, 128, 128], 0.3));
        let pyr = crate::backbone::forward_pyramid(&mut tape, &b, &cfg, img).unwrap();
        let dense = dense_head_forward(&mut tape, &b, &pyr).unwrap();
        for d in &dense {
            let ch = tape.shape(d.center_logits)[0] + tape.shape(d.box_raw)[0] + tape.shape(d.offsets)[0];
            assert_eq!(ch, 1 + 4 + 2 * cfg.parts);
        }
        let out = DenseOutputs::from_tape(&tape, &dense);
        for l in &out.levels {
            assert!(l.scores.data().iter().all(|&s| (s - 0.01).abs() < 1e-12));
        }
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 3);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let img = tape.constant(Tensor::from_fn(&[3, 128, 128], |i| ((i * 31) % 17) as f64 * 3.0));
        let pyr = crate::backbone::forward_pyramid(&mut tape, &b, &cfg, img).unwrap();
        let dense = dense_head_forward(&mut tape, &b, &pyr).unwrap();
        let out = DenseOutputs::from_tape(&tape, &dense);
        for l in &out.levels {
            assert!(l.scores.data().iter().all(|&s| s > 0.0 && s < 1.0));
            assert!(l.boxes.data().iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn below_threshold_decodes_to_nothing() {
        let dense = DenseOutputs { levels: vec![maps(8, 4, 4, 2, &[])] };
        assert!(decode_candidates(&dense, &DecodeConfig::default()).is_empty());
    }

    #[test]
    fn single_location_maps_to_cell_center() {
        let dense = DenseOutputs { levels: vec![maps(8, 4, 4, 2, &[(6, 0.8)])] };
        let c = decode_candidates(&dense, &DecodeConfig::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].location, (2.5 * 8.0, 1.5 * 8.0));
        assert_eq!(c[0].bbox, [10.0, 2.0, 30.0, 22.0]);
        assert_eq!(c[0].part_offsets.len(), 2);
    }

    #[test]
    fn overlapping_pair_keeps_higher_score() {
        // Adjacent cells 8 px apart with 40 px half-extent boxes: IoU = 72/88 > 0.6.
        let mut m = maps(8, 4, 4, 1, &[(5, 0.9), (6, 0.8)]);
        m.boxes = Tensor::full(&[4, 4, 4], 40.0);
        let c = decode_candidates(&DenseOutputs { levels: vec![m] }, &DecodeConfig::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].score, 0.9);
        let off = DecodeConfig { nms: false, ..Default::default() };
        let mut m = maps(8, 4, 4, 1, &[(5, 0.9), (6, 0.8)]);
        m.boxes = Tensor::full(&[4, 4, 4], 40.0);
        assert_eq!(decode_candidates(&DenseOutputs { levels: vec![m] }, &off).len(), 2);
    }

    #[test]
    fn ties_break_by_level_then_index() {
        let a = maps(8, 4, 4, 1, &[(9, 0.5), (2, 0.5)]);
        let b = maps(16, 2, 2, 1, &[(0, 0.5)]);
        let dc = DecodeConfig { nms: false, ..Default::default() };
        let c = decode_candidates(&DenseOutputs { levels: vec![a, b] }, &dc);
        let order: Vec<(usize, usize)> = c.iter().map(|c| (c.level, c.index)).collect();
        assert_eq!(order, vec![(3, 2), (3, 9), (4, 0)]);
    }

    fn gt(bbox: [f64; 4], parts: usize) -> InstanceGt {
        let (cx, cy) = ((bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0);
        InstanceGt {
            part_labels: vec![],
            visible_labels: vec![],
            bbox,
            centroids: (0..parts).map(|k| Some([cx + k as f64, cy - 2.0 * k as f64])).collect(),
            present: vec![true; parts],
            draw_order: 0,
        }
    }

    #[test]
    fn center_location_positive_at_level3_with_offsets() {
        let cfg = ModelConfig::default();
        // Box centered on cell (5,5) of level 3: center (44,44), half-size 20 < 32.
        let g = gt([24.0, 24.0, 64.0, 64.0], cfg.parts);
        let t = assign_detection_targets(core::slice::from_ref(&g), &cfg);
        let flat = 5 * 16 + 5;
        assert_eq!(t.assigned[flat], Some(0));
        assert_eq!(t.boxes[flat], [20.0, 20.0, 20.0, 20.0]);
        for k in 0..cfg.parts {
            let c = g.centroids[k].unwrap();
            assert_eq!(t.offsets[flat][2 * k], (c[0] - 44.0) / 128.0);
            assert_eq!(t.offsets[flat][2 * k + 1], (c[1] - 44.0) / 128.0);
        }
        for p in t.positives() {
            let (cx, cy) = t.centers[p];
            assert!(cx > g.bbox[0] && cx < g.bbox[2] && cy > g.bbox[1] && cy < g.bbox[3]);
        }
    }

    #[test]
    fn outside_all_boxes_is_negative() {
        let cfg = ModelConfig::default();
        let t = assign_detection_targets(&[gt([0.0, 0.0, 20.0, 20.0], 5)], &cfg);
        let far = 15 * 16 + 15;
        assert_eq!(t.assigned[far], None);
    }

    #[test]
    fn level4_sized_instance_has_no_positives_at_level6() {
        let cfg = ModelConfig::default();
        // Half-extent 40 ∈ [32, 64): level-4 range by the configured table.
        let g = gt([24.0, 24.0, 104.0, 104.0], 5);
        let t = assign_detection_targets(&[g], &cfg);
        let pos = t.positives();
        assert!(!pos.is_empty());
        for p in pos {
            let (l, _) = t.locate(p);
            let (lo, hi) = cfg.level_range(l);
            let m = t.boxes[p].iter().cloned().fold(0.0, f64::max);
            assert!(m >= lo && m < hi);
            assert_ne!(l, 3, "no positives at level 6");
        }
    }

    #[test]
    fn absent_parts_are_masked() {
        let cfg = ModelConfig::default();
        let mut g = gt([24.0, 24.0, 64.0, 64.0], 5);
        g.present[3] = false;
        g.centroids[3] = None;
        let t = assign_detection_targets(&[g], &cfg);
        let flat = 5 * 16 + 5;
        assert_eq!(t.offset_mask[flat][6], 0.0);
        assert_eq!(t.offset_mask[flat][7], 0.0);
        assert_eq!(t.offset_mask[flat][4], 1.0);
    }

    #[test]
    fn overlap_goes_to_smaller_instance() {
        let cfg = ModelConfig::default();
        let big = gt([20.0, 20.0, 70.0, 70.0], 5);
        let small = gt([30.0, 30.0, 58.0, 58.0], 5);
        let t = assign_detection_targets(&[big, small], &cfg);
        let flat = 5 * 16 + 5;
        assert_eq!(t.assigned[flat], Some(1));
    }
}
