//! Training losses over the dense head and the parsing head.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::detect::{assign_detection_targets, DetectionTargets};
use crate::error::{config_err, Result};
use crate::params::Bound;
use crate::repparse::{candidate_offsets, encode, parse_instance, HeadParams, ParseFlags};
use crate::synth::SyntheticScene;
use crate::tensor::Tensor;

/// Weights of the five loss terms, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub center: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub offset: f64,
    pub relation: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { center: 1.0, box_: 1.0, offset: 0.25, relation: 0.5, mask: 2.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.center, self.box_, self.offset, self.relation, self.mask]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Instances sampled per image for the mask and relation terms.
    pub mask_instances: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), focal_gamma: 2.0, focal_alpha: 0.25, mask_instances: 8 }
    }
}

/// Loss components of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub center: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub offset: f64,
    pub relation: f64,
    pub mask: f64,
    pub total: f64,
    pub weights: [f64; 5],
}

impl LossReport {
    pub const NAMES: [&'static str; 5] = ["center", "box", "offset", "relation", "mask"];

    pub fn components(&self) -> [f64; 5] {
        [self.center, self.box_, self.offset, self.relation, self.mask]
    }

    /// `Σ w_i · loss_i`.
    pub fn weighted_total(&self) -> f64 {
        self.components().iter().zip(&self.weights).map(|(l, w)| l * w).sum()
    }

    /// First non-finite component (or the total), if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        for (n, v) in Self::NAMES.iter().zip(self.components()) {
            if !v.is_finite() {
                return Some(n);
            }
        }
        (!self.total.is_finite()).then_some("total")
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport { weights: reports.first().map(|r| r.weights).unwrap_or_default(), ..Default::default() };
        for r in reports {
            out.center += r.center / n;
            out.box_ += r.box_ / n;
            out.offset += r.offset / n;
            out.relation += r.relation / n;
            out.mask += r.mask / n;
            out.total += r.total / n;
        }
        out
    }
}

/// Nearest down-sampling of a label map to the mask grid, sampling each cell's center pixel.
pub fn downsample_labels(labels: &[u8], height: usize, width: usize, stride: usize) -> Vec<usize> {
    let (h, w) = (height / stride, width / stride);
    let mut out = Vec::with_capacity(h * w);
    for j in 0..h {
        let y = (j * stride + stride / 2).min(height - 1);
        for i in 0..w {
            let x = (i * stride + stride / 2).min(width - 1);
            out.push(labels[y * width + x] as usize);
        }
    }
    out
}

/// Flattened `[h·w]` slices of each level's `[c, h, w]` map gathered at the positive
/// locations, concatenated into `[c, N]`.
fn gather_positives(tape: &mut Tape, maps: &[Var], t: &DetectionTargets, pos: &[usize]) -> Result<Var> {
    let mut parts = Vec::new();
    for (l, &m) in maps.iter().enumerate() {
        let idx: Vec<usize> = pos
            .iter()
            .filter(|&&p| t.locate(p).0 == l)
            .map(|&p| p - t.level_starts[l])
            .collect();
        if idx.is_empty() {
            continue;
        }
        let s = tape.shape(m).to_vec();
        let flat = tape.reshape(m, &[s[0], s[1] * s[2]])?;
        parts.push(tape.select(flat, 1, &idx)?);
    }
    tape.concat(&parts, 1)
}

/// Loss of one image. Returns the weighted total on the tape and its report.
pub fn compute_losses(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    scene: &SyntheticScene,
    lc: &LossConfig,
    flags: ParseFlags,
    rng: &mut impl Rng,
) -> Result<(Var, LossReport)> {
    if scene.height != cfg.image_height || scene.width != cfg.image_width {
        return Err(config_err!(
            "scene is {}x{}, model expects {}x{}",
            scene.height,
            scene.width,
            cfg.image_height,
            cfg.image_width
        ));
    }
    let image = tape.constant(scene.image.clone());
    let enc = encode(tape, p, cfg, image)?;
    let targets = assign_detection_targets(&scene.instances, cfg);
    let pos = targets.positives();
    let norm = pos.len().max(1) as f64;

    let mut flat_centers = Vec::with_capacity(5);
    for d in &enc.dense {
        let s = tape.shape(d.center_logits).to_vec();
        flat_centers.push(tape.reshape(d.center_logits, &[s[1] * s[2]])?);
    }
    let centers = tape.concat(&flat_centers, 0)?;
    let center_t: Vec<f64> = targets.assigned.iter().map(|a| if a.is_some() { 1.0 } else { 0.0 }).collect();
    let center_sum = tape.focal_loss(centers, &center_t, lc.focal_gamma, lc.focal_alpha)?;
    let center = tape.scale(center_sum, 1.0 / norm);

    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
    let (box_loss, offset_loss) = if pos.is_empty() {
        (zero(tape), zero(tape))
    } else {
        let raw: Vec<Var> = enc.dense.iter().map(|d| d.box_raw).collect();
        let boxes = gather_positives(tape, &raw, &targets, &pos)?;
        let order = positives_in_gather_order(&targets, &pos);
        let box_t: Vec<[f64; 4]> = order.iter().map(|&i| targets.boxes[i]).collect();
        let scales: Vec<f64> = order.iter().map(|&i| targets.strides[i] as f64).collect();
        let b = tape.iou_loss(boxes, &box_t, &scales)?;
        let b = tape.scale(b, 1.0 / norm);

        let offs: Vec<Var> = enc.dense.iter().map(|d| d.offsets).collect();
        let offsets = gather_positives(tape, &offs, &targets, &pos)?;
        let (ch, n) = (tape.shape(offsets)[0], order.len());
        let mut off_t = vec![0.0; ch * n];
        let mut mask = vec![0.0; ch * n];
        for (j, &i) in order.iter().enumerate() {
            for c in 0..ch {
                off_t[c * n + j] = targets.offsets[i][c];
                mask[c * n + j] = targets.offset_mask[i][c];
            }
        }
        let o = tape.l1_loss(offsets, &off_t, &mask)?;
        (b, tape.scale(o, 1.0 / norm))
    };

    let (relation, mask_loss) = if pos.is_empty() || lc.mask_instances == 0 {
        (zero(tape), zero(tape))
    } else {
        let k = lc.mask_instances.min(pos.len());
        let mut picks: Vec<usize> = index::sample(rng, pos.len(), k).into_iter().map(|i| pos[i]).collect();
        picks.sort_unstable();
        let hp = HeadParams::from_bound(p, cfg);
        let mut rel_terms = Vec::with_capacity(k);
        let mut mask_terms = Vec::with_capacity(k);
        let (mh, mw) = cfg.mask_size();
        for &flat in &picks {
            let (l, idx) = targets.locate(flat);
            let gi = targets.assigned[flat].expect("positive location");
            let inst = &scene.instances[gi];
            let offsets = candidate_offsets(tape, &enc.dense[l], idx)?;
            let ip = parse_instance(tape, &hp, enc.feature, targets.centers[flat], offsets, cfg, flags)?;
            let labels = downsample_labels(&inst.visible_labels, scene.height, scene.width, cfg.mask_stride);
            let ce = tape.cross_entropy(ip.logits, &labels)?;
            mask_terms.push(tape.scale(ce, 1.0 / (mh * mw * k) as f64));
            if flags.kernel_generation {
                let present: Vec<f64> = inst.present.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let bce = tape.bce_with_logits(ip.gate.logits, &present)?;
                rel_terms.push(tape.scale(bce, 1.0 / (cfg.parts * k) as f64));
            }
        }
        let ones = vec![1.0; k];
        let m = tape.weighted_sum(&mask_terms, &ones)?;
        let r = if rel_terms.is_empty() { zero(tape) } else { tape.weighted_sum(&rel_terms, &ones)? };
        (r, m)
    };

    let w = lc.weights.as_array();
    let comps = [center, box_loss, offset_loss, relation, mask_loss];
    let total = tape.weighted_sum(&comps, &w)?;
    let v = |v: Var| tape.value(v).item();
    let report = LossReport {
        center: v(center),
        box_: v(box_loss),
        offset: v(offset_loss),
        relation: v(relation),
        mask: v(mask_loss),
        total: v(total),
        weights: w,
    };
    Ok((total, report))
}

/// Positive locations in the order [`gather_positives`] lays them out.
fn positives_in_gather_order(t: &DetectionTargets, pos: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(pos.len());
    for l in 0..5 {
        out.extend(pos.iter().filter(|&&p| t.locate(p).0 == l));
    }
    out
}

/// Human-readable attribution for a non-finite loss.
pub fn describe_non_finite(step: usize, r: &LossReport) -> Option<String> {
    r.non_finite().map(|c| alloc::format!("non-finite {c} loss at step {step}: {r:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;
    use crate::synth::{generate_scene, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> SyntheticScene {
        generate_scene(5, &GenConfig { persons: (2, 2), ..Default::default() }).unwrap()
    }

    #[test]
    fn total_is_weighted_sum_and_components_non_negative() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 0);
        for flags in [ParseFlags::FULL, ParseFlags::KG, ParseFlags::BASELINE] {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, true);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (_, r) = compute_losses(&mut tape, &b, &cfg, &scene(), &LossConfig::default(), flags, &mut rng).unwrap();
            assert!((r.total - r.weighted_total()).abs() < 1e-12);
            assert!(r.components().iter().all(|&c| c >= 0.0 && c.is_finite()));
            assert!(r.mask > 0.0 && r.center > 0.0);
            if !flags.kernel_generation {
                assert_eq!(r.relation, 0.0);
            }
        }
    }

    #[test]
    fn empty_scene_trains_on_center_only() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 0);
        let s = generate_scene(1, &GenConfig { persons: (0, 0), ..Default::default() }).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (loss, r) = compute_losses(&mut tape, &b, &cfg, &s, &LossConfig::default(), ParseFlags::FULL, &mut rng).unwrap();
        assert_eq!((r.box_, r.offset, r.relation, r.mask), (0.0, 0.0, 0.0, 0.0));
        assert!(r.center > 0.0);
        tape.backward(loss).unwrap();
    }

    #[test]
    fn downsample_picks_cell_centers() {
        let mut l = vec![0u8; 16];
        l[5] = 3; // (x=1, y=1)
        assert_eq!(downsample_labels(&l, 4, 4, 2), vec![3, 0, 0, 0]);
    }
}
