//! Straight-line evaluation of the parsing head with plain loops, used as an
//! oracle for the tape implementation.
//!
//! Test-only: compiled under `cfg(test)` or the `testing` feature.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::math;
use crate::params::ParamStore;
use crate::repparse::ParseFlags;
use crate::tensor::Tensor;

/// Every intermediate of the reference evaluation.
#[derive(Clone, Debug)]
pub struct ReferenceParse {
    pub locs: Vec<(f64, f64)>,
    pub f_h: Vec<f64>,
    pub part_feats: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub f_p: Vec<f64>,
    pub w_f: Vec<f64>,
    pub w_o: Vec<f64>,
    /// `[width][h·w]`.
    pub instance_feature: Vec<Vec<f64>>,
    /// `[C][g][h·w]`.
    pub part_aware: Vec<Vec<Vec<f64>>>,
    /// `[C][h·w]`.
    pub logits: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
}

/// Bilinear lookup of channel `c` at map coordinates `(x, y)`, clamped to the border.
pub fn bilinear(f: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let x0 = math::floor(x) as usize;
    let y0 = math::floor(y) as usize;
    let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
    let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let v = |yy: usize, xx: usize| f.data()[(c * h + yy) * w + xx];
    (1.0 - ay) * ((1.0 - ax) * v(y0, x0) + ax * v(y0, x1)) + ay * ((1.0 - ax) * v(y1, x0) + ax * v(y1, x1))
}

fn matvec(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| {
            let mut s = b.data()[r];
            for c in 0..cols {
                s += w.data()[r * cols + c] * x[c];
            }
            s
        })
        .collect()
}

fn p<'a>(ps: &'a ParamStore, name: &str) -> &'a Tensor {
    ps.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

/// Evaluates the head for one instance on value tensors.
pub fn parse_reference(
    f: &Tensor,
    center: (f64, f64),
    offsets: &[(f64, f64)],
    params: &ParamStore,
    cfg: &ModelConfig,
    flags: ParseFlags,
) -> ReferenceParse {
    let (d, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let c = cfg.parts;
    let g = cfg.width / c;
    let z = cfg.norm();
    let s = cfg.mask_stride as f64;
    let n = h * w;

    let locs: Vec<(f64, f64)> = offsets.iter().map(|&(dx, dy)| (center.0 + z * dx, center.1 + z * dy)).collect();
    let f_h: Vec<f64> = (0..d).map(|ch| bilinear(f, ch, center.0 / s, center.1 / s)).collect();
    let part_feats: Vec<Vec<f64>> =
        locs.iter().map(|&(x, y)| (0..d).map(|ch| bilinear(f, ch, x / s, y / s)).collect()).collect();

    let wa = p(params, "parse.relation.weight");
    let ba = p(params, "parse.relation.bias").data()[0];
    let alpha: Vec<f64> = part_feats
        .iter()
        .map(|fk| {
            let mut t = ba;
            for i in 0..d {
                t += wa.data()[i] * f_h[i] + wa.data()[d + i] * fk[i];
            }
            1.0 / (1.0 + math::exp(-t))
        })
        .collect();
    let mut gated = Vec::with_capacity(c * d);
    for k in 0..c {
        for i in 0..d {
            gated.push(alpha[k] * part_feats[k][i]);
        }
    }
    let f_p = matvec(p(params, "parse.readjust.weight"), p(params, "parse.readjust.bias"), &gated);

    let mut zin = f_h.clone();
    if flags.kernel_generation {
        zin.extend_from_slice(&f_p);
    } else {
        zin.extend(core::iter::repeat_n(0.0, d));
    }
    let w_f = matvec(p(params, "parse.kernel_f.weight"), p(params, "parse.kernel_f.bias"), &zin);
    let w_o = matvec(p(params, "parse.kernel_o.weight"), p(params, "parse.kernel_o.bias"), &zin);

    // Projector stack, pixel by pixel.
    let mut dims = vec![(d, cfg.width)];
    for _ in 2..cfg.depth {
        dims.push((cfg.width, cfg.width));
    }
    let mut instance_feature = vec![vec![0.0; n]; cfg.width];
    for px in 0..n {
        let mut x: Vec<f64> = (0..d).map(|ch| f.data()[ch * n + px]).collect();
        let mut at = 0;
        for (li, &(cin, cout)) in dims.iter().enumerate() {
            let bias_at = at + cin * cout;
            let mut y = vec![0.0; cout];
            for o in 0..cout {
                let mut acc = w_f[bias_at + o];
                for i in 0..cin {
                    acc += w_f[at + o * cin + i] * x[i];
                }
                y[o] = if li + 1 < dims.len() { acc.max(0.0) } else { acc };
            }
            at = bias_at + cout;
            x = y;
        }
        for o in 0..cfg.width {
            instance_feature[o][px] = x[o];
        }
    }

    let mut part_aware = Vec::with_capacity(c);
    for k in 0..c {
        let mut out = vec![vec![0.0; n]; g];
        for px in 0..n {
            let (i, j) = (px % w, px / w);
            let gx = ((i as f64 + 0.5) * s - locs[k].0) / z;
            let gy = ((j as f64 + 0.5) * s - locs[k].1) / z;
            for o in 0..g {
                out[o][px] = if flags.part_features {
                    let wk = p(params, &format!("parse.part{k}.weight"));
                    let bk = p(params, &format!("parse.part{k}.bias"));
                    let row = &wk.data()[o * (g + 2)..(o + 1) * (g + 2)];
                    let mut acc = bk.data()[o];
                    for q in 0..g {
                        acc += row[q] * instance_feature[k * g + q][px];
                    }
                    acc += row[g] * gx + row[g + 1] * gy;
                    if cfg.part_relu { acc.max(0.0) } else { acc }
                } else {
                    instance_feature[k * g + o][px]
                };
            }
        }
        part_aware.push(out);
    }

    let mut logits = vec![vec![0.0; n]; c];
    for k in 0..c {
        for px in 0..n {
            let mut acc = w_o[c * g + k];
            for q in 0..g {
                acc += w_o[k * g + q] * part_aware[k][q][px];
            }
            logits[k][px] = acc;
        }
    }
    let mut masks = vec![vec![0.0; n]; c];
    for px in 0..n {
        let m = (0..c).map(|k| logits[k][px]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..c).map(|k| math::exp(logits[k][px] - m)).collect();
        let total: f64 = e.iter().sum();
        for k in 0..c {
            masks[k][px] = e[k] / total;
        }
    }

    ReferenceParse { locs, f_h, part_feats, alpha, f_p, w_f, w_o, instance_feature, part_aware, logits, masks }
}
