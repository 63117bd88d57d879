//! Central finite-difference oracle for tape gradients.
//!
//! Test-only: compiled under `cfg(test)` or the `testing` feature.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-4;
/// Floor for the relative-error denominator per unit of `max(1, |f|)`.
/// Round-off in a central difference grows with `|f|`, so gradient entries
/// below the floor are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Seeded source of test tensors.
pub struct SeededInit {
    rng: ChaCha8Rng,
}

impl SeededInit {
    pub fn new(seed: u64) -> Self {
        SeededInit { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-scale..scale))
    }

    /// Uniform magnitudes in `[lo, hi)` with random sign; keeps values off zero.
    pub fn tensor_away_from_zero(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let m = self.rng.random_range(lo..hi);
            if self.rng.random_bool(0.5) { m } else { -m }
        })
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose ±step evaluation crossed a non-differentiable point
    /// (relu sign flip, bilinear cell change, ...) where central differences
    /// are not a valid oracle.
    pub skipped: usize,
    /// `(leaf, index, analytic, finite difference)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn eval(leaves: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<(f64, Vec<i64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.value(loss).item(), tape.branch_signature()))
}

/// Compares analytic gradients of `f` with respect to `leaves` against
/// central differences. `sample = Some((n, seed))` checks `n` random
/// coordinates per leaf instead of all of them.
pub fn finite_difference_check(
    leaves: &[Tensor],
    sample: Option<(usize, u64)>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<FdReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let floor = REL_FLOOR * tape.value(loss).item().abs().max(1.0);
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut pick = sample.map(|(_, seed)| SeededInit::new(seed));
    let mut report = FdReport::default();
    let mut work: Vec<Tensor> = leaves.to_vec();
    for li in 0..leaves.len() {
        let n = leaves[li].len();
        let coords: Vec<usize> = match (&mut pick, sample) {
            (Some(p), Some((k, _))) if k < n => (0..k).map(|_| p.index(n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = leaves[li].data()[j];
            work[li].data_mut()[j] = orig + FD_STEP;
            let (fp, sp) = eval(&work, &f)?;
            work[li].data_mut()[j] = orig - FD_STEP;
            let (fm, sm) = eval(&work, &f)?;
            work[li].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[li].data()[j];
            let denom = a.abs().max(fd.abs()).max(floor);
            let rel = (a - fd).abs() / denom;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((li, j, a, fd));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `Σ r ⊙ y` for a fixed random `r`, turning any output into a scalar.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone().reshape(tape.shape(y))?);
    let m = tape.mul(y, rv)?;
    Ok(tape.sum(m))
}

/// Named finite-difference reports for every differentiable tape op on inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, FdReport)>> {
    let mut init = SeededInit::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let mut out = Vec::new();
    let r = |init: &mut SeededInit, n: usize| init.tensor(&[n], 1.0);

    let (x, k, b) = (init.tensor(&[2, 5, 5], 1.0), init.tensor(&[3, 2, 3, 3], 0.5), init.tensor(&[3], 0.5));
    let (r1, r2) = (r(&mut init, 75), r(&mut init, 27));
    out.push(("conv2d", finite_difference_check(&[x.clone(), k.clone(), b.clone()], None, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        project(t, y, &r1)
    })?));
    out.push(("conv2d_stride2", finite_difference_check(&[x, k, b], None, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(t, y, &r2)
    })?));

    let (x, w, b, ra) = (init.tensor(&[3, 4], 1.0), init.tensor(&[2, 4], 1.0), init.tensor(&[2], 1.0), r(&mut init, 6));
    out.push(("affine", finite_difference_check(&[x, w, b], None, |t, v| {
        let y = t.affine(v[0], v[1], Some(v[2]))?;
        project(t, y, &ra)
    })?));

    let f = init.tensor(&[3, 4, 5], 1.0);
    // Points stay well inside cells so ±step never changes the bilinear tap.
    let pts = Tensor::from_fn(&[4, 2], |i| {
        let cell = init.index(if i % 2 == 0 { 4 } else { 3 }) as f64;
        cell + init.uniform(0.1, 0.9)
    });
    let rb = r(&mut init, 12);
    out.push(("bilinear_sample", finite_difference_check(&[f, pts], None, |t, v| {
        let y = t.bilinear_sample(v[0], v[1])?;
        project(t, y, &rb)
    })?));

    let xa = init.tensor(&[2, 3], 2.0);
    let xr = init.tensor_away_from_zero(&[2, 3], 0.05, 2.0);
    let (rs, rr, re) = (r(&mut init, 6), r(&mut init, 6), r(&mut init, 6));
    out.push(("sigmoid", finite_difference_check(&[xa.clone()], None, |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, &rs)
    })?));
    out.push(("relu", finite_difference_check(&[xr], None, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, &rr)
    })?));
    out.push(("exp", finite_difference_check(&[xa.clone()], None, |t, v| {
        let y = t.exp(v[0]);
        project(t, y, &re)
    })?));
    let xs = init.tensor(&[3, 2, 2], 2.0);
    let (s0, s2) = (r(&mut init, 12), r(&mut init, 12));
    out.push(("softmax_axis0", finite_difference_check(&[xs.clone()], None, |t, v| {
        let y = t.softmax(v[0], 0)?;
        project(t, y, &s0)
    })?));
    out.push(("softmax_axis2", finite_difference_check(&[xs], None, |t, v| {
        let y = t.softmax(v[0], 2)?;
        project(t, y, &s2)
    })?));

    let (a, c) = (init.tensor(&[2, 3], 1.0), init.tensor(&[2, 3], 1.0));
    let (rad, rsu, rmu, rsc) = (r(&mut init, 6), r(&mut init, 6), r(&mut init, 6), r(&mut init, 6));
    out.push(("add", finite_difference_check(&[a.clone(), c.clone()], None, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, &rad)
    })?));
    out.push(("sub", finite_difference_check(&[a.clone(), c.clone()], None, |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, &rsu)
    })?));
    out.push(("mul", finite_difference_check(&[a.clone(), c.clone()], None, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, &rmu)
    })?));
    let factor = init.uniform(-2.0, 2.0);
    out.push(("scale", finite_difference_check(&[a.clone()], None, |t, v| {
        let y = t.scale(v[0], factor);
        project(t, y, &rsc)
    })?));
    let (rows, rsr) = (init.tensor(&[2, 1], 1.0), r(&mut init, 6));
    out.push(("scale_rows", finite_difference_check(&[a.clone(), rows], None, |t, v| {
        let y = t.scale_rows(v[0], v[1])?;
        project(t, y, &rsr)
    })?));

    let (p, q) = (init.tensor(&[2, 3], 1.0), init.tensor(&[2, 2], 1.0));
    let (rc, rsl, rse, rre) = (r(&mut init, 10), r(&mut init, 4), r(&mut init, 6), r(&mut init, 6));
    out.push(("concat", finite_difference_check(&[p.clone(), q], None, |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        project(t, y, &rc)
    })?));
    out.push(("slice", finite_difference_check(&[p.clone()], None, |t, v| {
        let y = t.slice(v[0], 1, 1, 2)?;
        project(t, y, &rsl)
    })?));
    out.push(("select", finite_difference_check(&[p.clone()], None, |t, v| {
        let y = t.select(v[0], 1, &[2, 0, 2])?;
        project(t, y, &rse)
    })?));
    out.push(("reshape", finite_difference_check(&[p], None, |t, v| {
        let y = t.reshape(v[0], &[3, 2])?;
        project(t, y, &rre)
    })?));
    let (img, rn) = (init.tensor(&[2, 2, 3], 1.0), r(&mut init, 2 * 5 * 7));
    out.push(("resize_nearest", finite_difference_check(&[img], None, |t, v| {
        let y = t.resize_nearest(v[0], 5, 7)?;
        project(t, y, &rn)
    })?));
    out.push(("sum", finite_difference_check(&[a.clone()], None, |t, v| {
        let e = t.exp(v[0]);
        Ok(t.sum(e))
    })?));
    let wts = [init.uniform(-1.0, 1.0), init.uniform(-1.0, 1.0)];
    out.push(("weighted_sum", finite_difference_check(&[a, c], None, |t, v| {
        let (s1, s2) = (t.sum(v[0]), t.sum(v[1]));
        let m = t.mul(s1, s2)?;
        t.weighted_sum(&[m, s2], &wts)
    })?));

    let z = init.tensor(&[6], 3.0);
    let yb: Vec<f64> = (0..6).map(|_| if init.uniform(0.0, 1.0) < 0.3 { 1.0 } else { 0.0 }).collect();
    let ys: Vec<f64> = (0..6).map(|_| init.uniform(0.0, 1.0)).collect();
    out.push(("focal_loss", finite_difference_check(&[z.clone()], None, |t, v| t.focal_loss(v[0], &yb, 2.0, 0.25))?));
    out.push(("bce_with_logits", finite_difference_check(&[z], None, |t, v| t.bce_with_logits(v[0], &ys))?));
    let logits = init.tensor(&[4, 5], 2.0);
    let cls: Vec<usize> = (0..5).map(|_| init.index(4)).collect();
    out.push(("cross_entropy", finite_difference_check(&[logits], None, |t, v| t.cross_entropy(v[0], &cls))?));
    let xl = init.tensor(&[5], 1.0);
    let tl: Vec<f64> = xl.data().iter().map(|&v| v + if init.uniform(0.0, 1.0) < 0.5 { 0.3 } else { -0.3 }).collect();
    let ml: Vec<f64> = (0..5).map(|i| if i == 2 { 0.0 } else { 1.0 }).collect();
    out.push(("l1_loss", finite_difference_check(&[xl], None, |t, v| t.l1_loss(v[0], &tl, &ml))?));
    let raw = init.tensor(&[4, 3], 0.5);
    let targets: Vec<[f64; 4]> = (0..3).map(|_| core::array::from_fn(|_| init.uniform(2.0, 12.0))).collect();
    let scales: Vec<f64> = (0..3).map(|_| [4.0, 8.0, 16.0][init.index(3)]).collect();
    out.push(("iou_loss", finite_difference_check(&[raw], None, |t, v| t.iou_loss(v[0], &targets, &scales))?));
    Ok(out)
}

/// Model used by [`full_loss_check`]: `D = 4` on a 16×16 image.
pub fn tiny_model() -> crate::config::ModelConfig {
    use crate::config::ModelConfig;
    ModelConfig {
        feature_dim: 4,
        pyramid_dim: 4,
        stem_dim: 4,
        block1_dim: 4,
        mask_stride: 4,
        image_height: 16,
        image_width: 16,
        // Every figure lands on P3, the only level with more than one cell.
        size_bounds: [16.0, 32.0, 64.0, 128.0],
        ..ModelConfig::default()
    }
}

/// Scene matching [`tiny_model`] with at least one positive location.
/// Seeds whose figures miss every P3 cell center move on to `seed + 1000·i`.
pub fn tiny_scene(seed: u64) -> Result<crate::synth::SyntheticScene> {
    let gc = crate::synth::GenConfig { height: 16, width: 16, persons: (1, 2), scale: (10.0, 14.0), ..Default::default() };
    let cfg = tiny_model();
    for i in 0..1000u64 {
        let scene = crate::synth::generate_scene(seed.wrapping_add(1000 * i), &gc)?;
        if !crate::detect::assign_detection_targets(&scene.instances, &cfg).positives().is_empty() {
            return Ok(scene);
        }
    }
    Err(crate::error::contract_err!("no tiny scene with positives near seed {seed}"))
}

/// Finite differences of the weighted total loss with respect to
/// `per_leaf` sampled coordinates of every parameter.
pub fn full_loss_check(seed: u64, flags: crate::repparse::ParseFlags, per_leaf: usize) -> Result<FdReport> {
    use crate::loss::{compute_losses, LossConfig};
    let cfg = tiny_model();
    let params = crate::params::init_params(&cfg, seed);
    let scene = tiny_scene(seed)?;
    let lc = LossConfig::default();
    finite_difference_check(params.tensors(), Some((per_leaf, seed)), |tape, vars| {
        let bound = params.bind_vars(vars.to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        compute_losses(tape, &bound, &cfg, &scene, &lc, flags, &mut rng).map(|(v, _)| v)
    })
}
