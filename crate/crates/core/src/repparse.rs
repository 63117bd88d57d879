//! Representative-part parsing head: part sampling, relation gating,
//! per-instance kernel generation, geometry maps and per-part masks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::backbone::{build_mask_feature, forward_pyramid, FeaturePyramid};
use crate::config::{DecodeConfig, ModelConfig};
use crate::detect::{decode_candidates, dense_head_forward, DenseLevel, DenseOutputs, InstanceCandidate};
use crate::error::{config_err, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Ablation switches for the parsing head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParseFlags {
    /// Condition kernels on the gated part representation as well as the center feature.
    pub kernel_generation: bool,
    /// Fuse geometry maps into each part group before its mask kernel.
    pub part_features: bool,
}

impl Default for ParseFlags {
    fn default() -> Self {
        ParseFlags { kernel_generation: true, part_features: true }
    }
}

impl ParseFlags {
    pub const BASELINE: ParseFlags = ParseFlags { kernel_generation: false, part_features: false };
    pub const KG: ParseFlags = ParseFlags { kernel_generation: true, part_features: false };
    pub const FULL: ParseFlags = ParseFlags { kernel_generation: true, part_features: true };
}

/// Shared parsing-head parameters on a tape.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub relation_w: Var,
    pub relation_b: Var,
    pub readjust_w: Var,
    pub readjust_b: Var,
    pub kernel_f_w: Var,
    pub kernel_f_b: Var,
    pub kernel_o_w: Var,
    pub kernel_o_b: Var,
    pub part_w: Vec<Var>,
    pub part_b: Vec<Var>,
}

impl HeadParams {
    pub fn from_bound(p: &Bound, cfg: &ModelConfig) -> Self {
        HeadParams {
            relation_w: p.get("parse.relation.weight"),
            relation_b: p.get("parse.relation.bias"),
            readjust_w: p.get("parse.readjust.weight"),
            readjust_b: p.get("parse.readjust.bias"),
            kernel_f_w: p.get("parse.kernel_f.weight"),
            kernel_f_b: p.get("parse.kernel_f.bias"),
            kernel_o_w: p.get("parse.kernel_o.weight"),
            kernel_o_b: p.get("parse.kernel_o.bias"),
            part_w: (0..cfg.parts).map(|k| p.get(&format!("parse.part{k}.weight"))).collect(),
            part_b: (0..cfg.parts).map(|k| p.get(&format!("parse.part{k}.bias"))).collect(),
        }
    }
}

/// Part keypoints and their sampled features.
#[derive(Clone, Copy, Debug)]
pub struct RepresentativeParts {
    /// `[C, 2]` image-pixel part locations.
    pub locs: Var,
    /// `[1, D]` feature at the instance center.
    pub f_h: Var,
    /// `[C, D]` feature at each part location.
    pub part_feats: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RelationGate {
    /// `[C, 1]` pre-sigmoid relation scores.
    pub logits: Var,
    /// `[C, 1]`, each in (0, 1).
    pub alpha: Var,
    /// `[1, D]` re-adjusted part representation.
    pub f_p: Var,
}

/// Flat generated parameter vectors.
#[derive(Clone, Copy, Debug)]
pub struct InstanceKernels {
    /// `[1, projector_params]`.
    pub w_f: Var,
    /// `[1, mask_kernel_params]`.
    pub w_o: Var,
}

/// Per-candidate normalised offsets `[C, 2]` read out of a level's offset map.
pub fn candidate_offsets(tape: &mut Tape, level: &DenseLevel, index: usize) -> Result<Var> {
    let s = tape.shape(level.offsets).to_vec();
    let flat = tape.reshape(level.offsets, &[s[0], s[1] * s[2]])?;
    let col = tape.select(flat, 1, &[index])?;
    tape.reshape(col, &[s[0] / 2, 2])
}

/// Part locations `center + Z·offsets`, with features bilinearly sampled
/// from `f` at `loc / s`.
pub fn sample_part_features(
    tape: &mut Tape,
    f: Var,
    center: (f64, f64),
    offsets: Var,
    cfg: &ModelConfig,
) -> Result<RepresentativeParts> {
    let c = tape.shape(offsets)[0];
    if tape.shape(offsets) != [c, 2] {
        return Err(crate::error::dim_err!("offsets must be [C, 2], got {:?}", tape.shape(offsets)));
    }
    let z = cfg.norm();
    let s = cfg.mask_stride as f64;
    let scaled = tape.scale(offsets, z);
    let centers = tape.constant(Tensor::from_fn(&[c, 2], |i| if i % 2 == 0 { center.0 } else { center.1 }));
    let locs = tape.add(centers, scaled)?;
    let pts = tape.scale(locs, 1.0 / s);
    let center_pt = tape.constant(Tensor::new(&[1, 2], vec![center.0 / s, center.1 / s])?);
    let all = tape.concat(&[center_pt, pts], 0)?;
    let feats = tape.bilinear_sample(f, all)?;
    let f_h = tape.slice(feats, 0, 0, 1)?;
    let part_feats = tape.slice(feats, 0, 1, c)?;
    Ok(RepresentativeParts { locs, f_h, part_feats })
}

/// `α_k = σ(W_a [f_h ⊕ f_h^k])`, `f_p = W_m (α_1 f_h^1 ⊕ … ⊕ α_C f_h^C)`.
pub fn relation_gate(tape: &mut Tape, hp: &HeadParams, rp: &RepresentativeParts) -> Result<RelationGate> {
    let (c, d) = (tape.shape(rp.part_feats)[0], tape.shape(rp.part_feats)[1]);
    let rep = tape.select(rp.f_h, 0, &vec![0; c])?;
    let pairs = tape.concat(&[rep, rp.part_feats], 1)?;
    let logits = tape.affine(pairs, hp.relation_w, Some(hp.relation_b))?;
    let alpha = tape.sigmoid(logits);
    let a = tape.reshape(alpha, &[c])?;
    let gated = tape.scale_rows(rp.part_feats, a)?;
    let flat = tape.reshape(gated, &[1, c * d])?;
    let f_p = tape.affine(flat, hp.readjust_w, Some(hp.readjust_b))?;
    Ok(RelationGate { logits, alpha, f_p })
}

/// `θ_f = V_1 [f_h ⊕ f_p]`, `θ_o = V_2 [f_h ⊕ f_p]`; `f_p = None` conditions on
/// the center feature alone (zeros in place of `f_p`).
pub fn generate_kernels(
    tape: &mut Tape,
    hp: &HeadParams,
    f_h: Var,
    f_p: Option<Var>,
    cfg: &ModelConfig,
) -> Result<InstanceKernels> {
    let pf = tape.shape(hp.kernel_f_w)[0];
    let po = tape.shape(hp.kernel_o_w)[0];
    if pf != cfg.projector_params() || po != cfg.mask_kernel_params() {
        return Err(config_err!(
            "kernel generators emit {pf}/{po} values, config needs {}/{}",
            cfg.projector_params(),
            cfg.mask_kernel_params()
        ));
    }
    let f_p = match f_p {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(tape.shape(f_h))),
    };
    let z = tape.concat(&[f_h, f_p], 1)?;
    let w_f = tape.affine(z, hp.kernel_f_w, Some(hp.kernel_f_b))?;
    let w_o = tape.affine(z, hp.kernel_o_w, Some(hp.kernel_o_b))?;
    Ok(InstanceKernels { w_f, w_o })
}

/// `(in, out)` channel pairs of the generated projector layers.
pub fn projector_layers(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let mut v = vec![(cfg.feature_dim, cfg.width)];
    v.extend((2..cfg.depth).map(|_| (cfg.width, cfg.width)));
    v
}

/// Sequential generated 1×1 convs over `f`, relu between layers.
pub fn instance_feature(tape: &mut Tape, f: Var, kernels: &InstanceKernels, cfg: &ModelConfig) -> Result<Var> {
    let layers = projector_layers(cfg);
    let mut x = f;
    let mut at = 0;
    for (li, &(cin, cout)) in layers.iter().enumerate() {
        let w = tape.slice(kernels.w_f, 1, at, cin * cout)?;
        let w = tape.reshape(w, &[cout, cin, 1, 1])?;
        at += cin * cout;
        let b = tape.slice(kernels.w_f, 1, at, cout)?;
        let b = tape.reshape(b, &[cout])?;
        at += cout;
        x = tape.conv2d(x, w, Some(b), 1, 0)?;
        if li + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Normalised pixel-center coordinates `[2, h·w]`: `((i+0.5)s/Z, (j+0.5)s/Z)`.
fn coordinate_grid(h: usize, w: usize, s: f64, z: f64) -> Tensor {
    let n = h * w;
    Tensor::from_fn(&[2, n], |i| {
        let p = i % n;
        if i < n {
            ((p % w) as f64 + 0.5) * s / z
        } else {
            ((p / w) as f64 + 0.5) * s / z
        }
    })
}

/// Geometry maps `F_s^k [2, h, w]` relative to each part location in `locs [C, 2]`.
pub fn geometry_maps(tape: &mut Tape, locs: Var, h: usize, w: usize, s: f64, z: f64) -> Result<Vec<Var>> {
    let c = tape.shape(locs)[0];
    let grid = tape.constant(coordinate_grid(h, w, s, z).reshape(&[2, h, w])?);
    let identity = tape.constant(Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0])?);
    let shift = tape.scale(locs, -1.0 / z);
    let mut out = Vec::with_capacity(c);
    for k in 0..c {
        let row = tape.slice(shift, 0, k, 1)?;
        let b = tape.reshape(row, &[2])?;
        out.push(tape.conv2d(grid, identity, Some(b), 1, 0)?);
    }
    Ok(out)
}

/// Value-level geometry maps `[C, 2, h, w]`.
pub fn geometry_maps_value(locs: &[(f64, f64)], h: usize, w: usize, s: f64, z: f64) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[locs.len(), 2, h, w], |i| {
        let (k, axis, p) = (i / (2 * plane), (i / plane) % 2, i % plane);
        if axis == 0 {
            (((p % w) as f64 + 0.5) * s - locs[k].0) / z
        } else {
            (((p / w) as f64 + 0.5) * s - locs[k].1) / z
        }
    })
}

/// Splits `f_p` into `C` groups of `g` channels and applies `W_p^k` to each
/// group concatenated with its geometry map. With part features off the
/// groups pass through unchanged.
pub fn part_aware_features(
    tape: &mut Tape,
    hp: &HeadParams,
    f_p: Var,
    geometry: &[Var],
    cfg: &ModelConfig,
    flags: ParseFlags,
) -> Result<Vec<Var>> {
    let width = tape.shape(f_p)[0];
    if width % cfg.parts != 0 {
        return Err(config_err!("width {width} is not divisible by {} parts", cfg.parts));
    }
    let g = width / cfg.parts;
    let mut out = Vec::with_capacity(cfg.parts);
    for k in 0..cfg.parts {
        let group = tape.slice(f_p, 0, k * g, g)?;
        if !flags.part_features {
            out.push(group);
            continue;
        }
        let x = tape.concat(&[group, geometry[k]], 0)?;
        let y = tape.conv2d(x, hp.part_w[k], Some(hp.part_b[k]), 1, 0)?;
        out.push(if cfg.part_relu { tape.relu(y) } else { y });
    }
    Ok(out)
}

/// Per-part logits from the generated mask kernels, `[C, h, w]`, and their
/// softmax across parts.
pub fn predict_masks(tape: &mut Tape, w_o: Var, part_feats: &[Var], cfg: &ModelConfig) -> Result<(Var, Var)> {
    let c = cfg.parts;
    let g = tape.shape(part_feats[0])[0];
    let mut logits = Vec::with_capacity(c);
    for (k, &x) in part_feats.iter().enumerate() {
        let w = tape.slice(w_o, 1, k * g, g)?;
        let w = tape.reshape(w, &[1, g, 1, 1])?;
        let b = tape.slice(w_o, 1, c * g + k, 1)?;
        let b = tape.reshape(b, &[1])?;
        logits.push(tape.conv2d(x, w, Some(b), 1, 0)?);
    }
    let logits = tape.concat(&logits, 0)?;
    let masks = tape.softmax(logits, 0)?;
    Ok((logits, masks))
}

/// Every intermediate of one instance's parse.
#[derive(Clone, Debug)]
pub struct InstanceParse {
    pub parts: RepresentativeParts,
    pub gate: RelationGate,
    pub kernels: InstanceKernels,
    /// `[width, h, w]`.
    pub instance_feature: Var,
    pub part_aware: Vec<Var>,
    pub logits: Var,
    pub masks: Var,
}

/// Runs the parsing chain for one instance centered at `center` with offsets `[C, 2]`.
pub fn parse_instance(
    tape: &mut Tape,
    hp: &HeadParams,
    f: Var,
    center: (f64, f64),
    offsets: Var,
    cfg: &ModelConfig,
    flags: ParseFlags,
) -> Result<InstanceParse> {
    let parts = sample_part_features(tape, f, center, offsets, cfg)?;
    let gate = relation_gate(tape, hp, &parts)?;
    let cond = flags.kernel_generation.then_some(gate.f_p);
    let kernels = generate_kernels(tape, hp, parts.f_h, cond, cfg)?;
    let instance_feature = instance_feature(tape, f, &kernels, cfg)?;
    let (h, w) = (tape.shape(f)[1], tape.shape(f)[2]);
    let geometry = if flags.part_features {
        geometry_maps(tape, parts.locs, h, w, cfg.mask_stride as f64, cfg.norm())?
    } else {
        Vec::new()
    };
    let part_aware = part_aware_features(tape, hp, instance_feature, &geometry, cfg, flags)?;
    let (logits, masks) = predict_masks(tape, kernels.w_o, &part_aware, cfg)?;
    Ok(InstanceParse { parts, gate, kernels, instance_feature, part_aware, logits, masks })
}

/// Shared image-level computation.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub pyramid: FeaturePyramid,
    /// `[D, H/s, W/s]`.
    pub feature: Var,
    pub dense: Vec<DenseLevel>,
}

pub fn encode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, image: Var) -> Result<Encoded> {
    let pyramid = forward_pyramid(tape, p, cfg, image)?;
    let feature = build_mask_feature(tape, p, cfg, &pyramid)?;
    let dense = dense_head_forward(tape, p, &pyramid)?;
    Ok(Encoded { pyramid, feature, dense })
}

/// One parsed person.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsingResult {
    pub score: f64,
    pub bbox: [f64; 4],
    pub location: (f64, f64),
    /// Representative-part locations in image pixels.
    pub part_locations: Vec<(f64, f64)>,
    pub alpha: Vec<f64>,
    /// `[C, h, w]` part probabilities at mask resolution.
    pub masks: Tensor,
    /// Row-major `[H, W]` argmax labels, nearest-upsampled.
    pub labels: Vec<u8>,
}

/// Argmax over the part axis of `masks [C, h, w]`, nearest-resized to `height × width`.
pub fn label_map(masks: &Tensor, height: usize, width: usize) -> Vec<u8> {
    let (c, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
    let plane = h * w;
    let d = masks.data();
    let mut best = vec![0u8; plane];
    let mut top = d[..plane].to_vec();
    for k in 1..c {
        for ((b, t), &v) in best.iter_mut().zip(top.iter_mut()).zip(&d[k * plane..(k + 1) * plane]) {
            if v > *t {
                *t = v;
                *b = k as u8;
            }
        }
    }
    let cols: Vec<usize> = (0..width).map(|x| x * w / width).collect();
    let mut out = vec![0u8; height * width];
    for (y, row) in out.chunks_exact_mut(width).enumerate() {
        let src = &best[y * h / height * w..][..w];
        for (o, &sx) in row.iter_mut().zip(&cols) {
            *o = src[sx];
        }
    }
    out
}

/// Parses each candidate against an already-encoded image.
pub fn parse_candidates(
    tape: &mut Tape,
    hp: &HeadParams,
    enc: &Encoded,
    candidates: &[InstanceCandidate],
    cfg: &ModelConfig,
    flags: ParseFlags,
) -> Result<Vec<ParsingResult>> {
    let mut out = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let offsets = tape.constant(Tensor::from_fn(&[cfg.parts, 2], |i| {
            let o = cand.part_offsets[i / 2];
            if i % 2 == 0 { o.0 } else { o.1 }
        }));
        let ip = parse_instance(tape, hp, enc.feature, cand.location, offsets, cfg, flags)?;
        let masks = tape.value(ip.masks).clone();
        let locs = tape.value(ip.parts.locs).data().chunks(2).map(|p| (p[0], p[1])).collect();
        out.push(ParsingResult {
            score: cand.score,
            bbox: cand.bbox,
            location: cand.location,
            part_locations: locs,
            alpha: tape.value(ip.gate.alpha).data().to_vec(),
            labels: label_map(&masks, cfg.image_height, cfg.image_width),
            masks,
        });
    }
    Ok(out)
}

/// Image in, parsed persons out, in descending score order.
pub fn full_parse(
    image: &Tensor,
    params: &ParamStore,
    cfg: &ModelConfig,
    dc: &DecodeConfig,
    flags: ParseFlags,
) -> Result<Vec<ParsingResult>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let enc = encode(&mut tape, &b, cfg, img)?;
    let dense = DenseOutputs::from_tape(&tape, &enc.dense);
    let candidates = decode_candidates(&dense, dc);
    let hp = HeadParams::from_bound(&b, cfg);
    parse_candidates(&mut tape, &hp, &enc, &candidates, cfg, flags)
}

/// Composites instance label maps, higher scores painted last so they win.
pub fn composite_labels(results: &[ParsingResult], len: usize) -> Vec<u8> {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[a].score.partial_cmp(&results[b].score).unwrap_or(core::cmp::Ordering::Equal));
    let mut out = vec![0u8; len];
    for i in order {
        for (o, &l) in out.iter_mut().zip(&results[i].labels) {
            if l != 0 {
                *o = l;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::SeededInit;
    use crate::params::init_params;
    use crate::reference::parse_reference;

    const TOL: f64 = 1e-12;

    fn randomized_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut p = init_params(cfg, seed);
        let mut r = SeededInit::new(seed ^ 0xa5a5);
        let names: Vec<_> = p.names().iter().filter(|n| n.starts_with("parse.")).cloned().collect();
        for n in names {
            let t = p.get_mut(&n).unwrap();
            for v in t.data_mut() {
                *v += r.uniform(-0.3, 0.3);
            }
        }
        p
    }

    struct Setup {
        tape: Tape,
        hp: HeadParams,
        f: Var,
        offsets: Var,
    }

    fn setup(cfg: &ModelConfig, params: &ParamStore, feat: &Tensor, offs: &[(f64, f64)]) -> Setup {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let hp = HeadParams::from_bound(&b, cfg);
        let f = tape.constant(feat.clone());
        let offsets = tape.constant(Tensor::from_fn(&[offs.len(), 2], |i| {
            if i % 2 == 0 { offs[i / 2].0 } else { offs[i / 2].1 }
        }));
        Setup { tape, hp, f, offsets }
    }

    fn random_case(cfg: &ModelConfig, seed: u64) -> (Tensor, (f64, f64), Vec<(f64, f64)>) {
        let mut r = SeededInit::new(seed);
        let (h, w) = cfg.mask_size();
        let feat = r.tensor(&[cfg.feature_dim, h, w], 1.0);
        let center = (r.uniform(0.0, cfg.image_width as f64), r.uniform(0.0, cfg.image_height as f64));
        let offs = (0..cfg.parts).map(|_| (r.uniform(-0.3, 0.3), r.uniform(-0.3, 0.3))).collect();
        (feat, center, offs)
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= TOL, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_offsets_sample_the_center() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 0);
        let (feat, center, _) = random_case(&cfg, 1);
        let mut s = setup(&cfg, &params, &feat, &[(0.0, 0.0); 5]);
        let rp = sample_part_features(&mut s.tape, s.f, center, s.offsets, &cfg).unwrap();
        let fh = s.tape.value(rp.f_h).data().to_vec();
        for row in s.tape.value(rp.part_feats).data().chunks(cfg.feature_dim) {
            assert_eq!(row, &fh[..]);
        }
        for l in s.tape.value(rp.locs).data().chunks(2) {
            assert_eq!((l[0], l[1]), center);
        }
    }

    #[test]
    fn offset_arithmetic() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 0);
        let (feat, _, _) = random_case(&cfg, 1);
        let mut s = setup(&cfg, &params, &feat, &[(0.0625, -0.125); 5]);
        let rp = sample_part_features(&mut s.tape, s.f, (64.0, 48.0), s.offsets, &cfg).unwrap();
        assert_eq!(&s.tape.value(rp.locs).data()[..2], &[72.0, 32.0]);
    }

    #[test]
    fn zero_relation_weights_give_half() {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg, 0);
        params.insert("parse.relation.weight", Tensor::zeros(&[1, 2 * cfg.feature_dim]));
        let (feat, center, offs) = random_case(&cfg, 2);
        let mut s = setup(&cfg, &params, &feat, &offs);
        let rp = sample_part_features(&mut s.tape, s.f, center, s.offsets, &cfg).unwrap();
        let gate = relation_gate(&mut s.tape, &s.hp, &rp).unwrap();
        assert!(s.tape.value(gate.alpha).data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn zero_part_features_give_zero_readjusted() {
        let cfg = ModelConfig::default();
        let params = randomized_params(&cfg, 3);
        let mut params = params;
        params.insert("parse.readjust.bias", Tensor::zeros(&[cfg.feature_dim]));
        let (h, w) = cfg.mask_size();
        let feat = Tensor::zeros(&[cfg.feature_dim, h, w]);
        let mut s = setup(&cfg, &params, &feat, &[(0.1, 0.2); 5]);
        let rp = sample_part_features(&mut s.tape, s.f, (30.0, 40.0), s.offsets, &cfg).unwrap();
        let gate = relation_gate(&mut s.tape, &s.hp, &rp).unwrap();
        assert!(s.tape.value(gate.f_p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_counts_zero_case_and_determinism() {
        let cfg = ModelConfig::default();
        let mut params = randomized_params(&cfg, 4);
        let (feat, center, offs) = random_case(&cfg, 4);
        let run = |params: &ParamStore| {
            let mut s = setup(&cfg, params, &feat, &offs);
            let rp = sample_part_features(&mut s.tape, s.f, center, s.offsets, &cfg).unwrap();
            let gate = relation_gate(&mut s.tape, &s.hp, &rp).unwrap();
            let k = generate_kernels(&mut s.tape, &s.hp, rp.f_h, Some(gate.f_p), &cfg).unwrap();
            (s.tape.value(k.w_f).clone(), s.tape.value(k.w_o).clone())
        };
        let (wf, wo) = run(&params);
        assert_eq!((wf.len(), wo.len()), (70, 15));
        assert_eq!(run(&params), (wf, wo));
        for n in ["parse.kernel_f", "parse.kernel_o"] {
            for suffix in ["weight", "bias"] {
                let name = format!("{n}.{suffix}");
                let shape = params.get(&name).unwrap().shape().to_vec();
                params.insert(&name, Tensor::zeros(&shape));
            }
        }
        let (wf, wo) = run(&params);
        assert!(wf.data().iter().chain(wo.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn generator_size_mismatch_is_config_error() {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg, 0);
        params.insert("parse.kernel_o.weight", Tensor::zeros(&[14, 2 * cfg.feature_dim]));
        let (feat, center, offs) = random_case(&cfg, 1);
        let mut s = setup(&cfg, &params, &feat, &offs);
        let rp = sample_part_features(&mut s.tape, s.f, center, s.offsets, &cfg).unwrap();
        let r = generate_kernels(&mut s.tape, &s.hp, rp.f_h, None, &cfg);
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn one_hot_projector_selects_channel_zero() {
        let cfg = ModelConfig::default();
        let (feat, _, _) = random_case(&cfg, 5);
        let mut tape = Tape::new();
        let f = tape.constant(feat.clone());
        let mut wf = vec![0.0; cfg.projector_params()];
        for o in 0..cfg.width {
            wf[o * cfg.feature_dim] = 1.0;
        }
        let w_f = tape.constant(Tensor::new(&[1, wf.len()], wf).unwrap());
        let w_o = tape.constant(Tensor::zeros(&[1, cfg.mask_kernel_params()]));
        let fp = instance_feature(&mut tape, f, &InstanceKernels { w_f, w_o }, &cfg).unwrap();
        let (h, w) = cfg.mask_size();
        assert_eq!(tape.shape(fp), &[cfg.width, h, w]);
        for o in 0..cfg.width {
            assert_eq!(tape.value(fp).channel(o), feat.channel(0));
        }
    }

    #[test]
    fn geometry_map_definition_and_translation() {
        let (s, z) = (8.0, 128.0);
        let locs = [(20.0, 36.0), (3.0, 100.0)];
        let g = geometry_maps_value(&locs, 16, 16, s, z);
        let at = |t: &Tensor, k: usize, a: usize, j: usize, i: usize| t.data()[((k * 2 + a) * 16 + j) * 16 + i];
        // Pixel (2, 4) has center (20, 36).
        assert_eq!((at(&g, 0, 0, 4, 2), at(&g, 0, 1, 4, 2)), (0.0, 0.0));
        assert_eq!((at(&g, 0, 0, 4, 3), at(&g, 0, 1, 4, 3)), (s / z, 0.0));
        assert_eq!(at(&g, 0, 0, 4, 1), -at(&g, 0, 0, 4, 3));
        assert_eq!(at(&g, 0, 1, 3, 2), -at(&g, 0, 1, 5, 2));
        let shifted = geometry_maps_value(&[(28.0, 36.0), (11.0, 100.0)], 16, 16, s, z);
        for (k, a, j, i) in [(0, 0, 0, 0), (1, 0, 7, 9), (1, 1, 15, 15)] {
            let d = at(&shifted, k, a, j, i) - at(&g, k, a, j, i);
            let expect = if a == 0 { -s / z } else { 0.0 };
            assert!((d - expect).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(&[2, 2], vec![20.0, 36.0, 3.0, 100.0]).unwrap());
        let maps = geometry_maps(&mut tape, l, 16, 16, s, z).unwrap();
        for (k, m) in maps.iter().enumerate() {
            assert_eq!(tape.value(*m).data(), &g.data()[k * 512..(k + 1) * 512]);
        }
    }

    #[test]
    fn identity_part_transform_returns_groups() {
        let cfg = ModelConfig { part_relu: false, ..Default::default() };
        let mut params = init_params(&cfg, 0);
        let g = cfg.group_dim();
        for k in 0..cfg.parts {
            let w = Tensor::from_fn(&[g, g + 2, 1, 1], |i| if i / (g + 2) == i % (g + 2) { 1.0 } else { 0.0 });
            params.insert(&format!("parse.part{k}.weight"), w);
        }
        let mut r = SeededInit::new(6);
        let (h, w) = cfg.mask_size();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let hp = HeadParams::from_bound(&b, &cfg);
        let fp = tape.constant(r.tensor(&[cfg.width, h, w], 1.0));
        let locs = tape.constant(r.tensor(&[cfg.parts, 2], 60.0));
        let geo = geometry_maps(&mut tape, locs, h, w, 8.0, 128.0).unwrap();
        let out = part_aware_features(&mut tape, &hp, fp, &geo, &cfg, ParseFlags::FULL).unwrap();
        let mut joined = Vec::new();
        for (k, v) in out.iter().enumerate() {
            let group = &tape.value(fp).data()[k * g * h * w..(k + 1) * g * h * w];
            assert_eq!(tape.value(*v).data(), group);
            joined.extend_from_slice(tape.value(*v).data());
        }
        assert_eq!(&joined[..], tape.value(fp).data());
    }

    #[test]
    fn zero_logits_are_uniform() {
        let cfg = ModelConfig::default();
        let (h, w) = cfg.mask_size();
        let mut tape = Tape::new();
        let parts: Vec<Var> =
            (0..cfg.parts).map(|_| tape.constant(Tensor::full(&[cfg.group_dim(), h, w], 0.7))).collect();
        let w_o = tape.constant(Tensor::zeros(&[1, cfg.mask_kernel_params()]));
        let (_, m) = predict_masks(&mut tape, w_o, &parts, &cfg).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn fused_chain_matches_reference() {
        let configs = [
            (ModelConfig::default(), ParseFlags::FULL),
            (ModelConfig { depth: 3, width: 15, ..Default::default() }, ParseFlags::FULL),
            (ModelConfig { depth: 4, mask_stride: 4, ..Default::default() }, ParseFlags::KG),
            (ModelConfig { part_relu: false, ..Default::default() }, ParseFlags::BASELINE),
        ];
        for (ci, (cfg, flags)) in configs.iter().enumerate() {
            for seed in 0..4u64 {
                let params = randomized_params(cfg, seed + 10 * ci as u64);
                let (feat, center, offs) = random_case(cfg, seed + 100);
                let mut s = setup(cfg, &params, &feat, &offs);
                let ip = parse_instance(&mut s.tape, &s.hp, s.f, center, s.offsets, cfg, *flags).unwrap();
                let r = parse_reference(&feat, center, &offs, &params, cfg, *flags);
                let t = &s.tape;
                close(t.value(ip.parts.f_h).data(), &r.f_h);
                close(t.value(ip.parts.part_feats).data(), &r.part_feats.concat());
                close(t.value(ip.gate.alpha).data(), &r.alpha);
                close(t.value(ip.gate.f_p).data(), &r.f_p);
                close(t.value(ip.kernels.w_f).data(), &r.w_f);
                close(t.value(ip.kernels.w_o).data(), &r.w_o);
                close(t.value(ip.instance_feature).data(), &r.instance_feature.concat());
                for (k, v) in ip.part_aware.iter().enumerate() {
                    close(t.value(*v).data(), &r.part_aware[k].concat());
                }
                close(t.value(ip.logits).data(), &r.logits.concat());
                close(t.value(ip.masks).data(), &r.masks.concat());
            }
        }
    }

    #[test]
    fn label_map_upsamples_argmax() {
        let m = Tensor::new(&[2, 1, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        assert_eq!(label_map(&m, 2, 4), vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn full_parse_on_initial_weights_is_well_formed() {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg, 1);
        // Lift every center score above threshold so candidates exist.
        params.insert("head.center.bias", Tensor::full(&[1], 3.0));
        let img = SeededInit::new(2).tensor(&[3, 128, 128], 0.5);
        let dc = DecodeConfig { topk_per_level: 2, ..Default::default() };
        let out = full_parse(&img, &params, &cfg, &dc, ParseFlags::FULL).unwrap();
        assert!(!out.is_empty());
        for r in &out {
            assert_eq!(r.labels.len(), 128 * 128);
            assert!(r.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
            let plane = 16 * 16;
            for p in 0..plane {
                let s: f64 = (0..cfg.parts).map(|k| r.masks.data()[k * plane + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
