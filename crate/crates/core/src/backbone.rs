//! Plain convolutional backbone, top-down pyramid, and the fused image-level feature.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{config_err, Result};
use crate::params::Bound;

/// Pyramid levels 3..=7 as tape variables, each `[Dp, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
}

impl FeaturePyramid {
    pub const LEVEL_IDS: [usize; 5] = [3, 4, 5, 6, 7];
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    tape.conv2d(x, w, Some(b), stride, pad)
}

fn conv_relu(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(tape, p, name, x, stride, 1)?;
    Ok(tape.relu(y))
}

/// Backbone plus top-down merge: stem (stride 2), four stride-2 blocks giving
/// C3..C5 from the last three, `P5 = C5`, `P4 = C4 + up(P5)`, `P3 = C3 + up(P4)`,
/// then P6/P7 from stride-2 convs on P5.
pub fn forward_pyramid(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, image: Var) -> Result<FeaturePyramid> {
    let shape = tape.shape(image);
    if shape != [3, cfg.image_height, cfg.image_width] {
        return Err(config_err!(
            "image shape {:?} does not match configured [3, {}, {}]",
            shape,
            cfg.image_height,
            cfg.image_width
        ));
    }
    let x = conv_relu(tape, p, "backbone.stem", image, 2)?;
    let x = conv_relu(tape, p, "backbone.block1", x, 2)?;
    let c3 = conv_relu(tape, p, "backbone.block2", x, 2)?;
    let c4 = conv_relu(tape, p, "backbone.block3", c3, 2)?;
    let c5 = conv_relu(tape, p, "backbone.block4", c4, 2)?;

    let p5 = c5;
    let up5 = upsample_to(tape, p5, c4)?;
    let p4 = tape.add(c4, up5)?;
    let up4 = upsample_to(tape, p4, c3)?;
    let p3 = tape.add(c3, up4)?;
    let p6 = conv_relu(tape, p, "backbone.p6", p5, 2)?;
    let p7 = conv_relu(tape, p, "backbone.p7", p6, 2)?;
    Ok(FeaturePyramid { levels: [p3, p4, p5, p6, p7] })
}

fn upsample_to(tape: &mut Tape, x: Var, like: Var) -> Result<Var> {
    let (h, w) = (tape.shape(like)[1], tape.shape(like)[2]);
    tape.resize_nearest(x, h, w)
}

/// Image-level feature `F [D, H/s, W/s]`: 1×1 projections of P3..P5,
/// nearest-resized to stride `s`, summed, then a 3×3 fusion conv.
pub fn build_mask_feature(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, pyr: &FeaturePyramid) -> Result<Var> {
    if ![4, 8, 16].contains(&cfg.mask_stride) {
        return Err(config_err!("mask stride must be 4, 8 or 16, got {}", cfg.mask_stride));
    }
    let (h, w) = cfg.mask_size();
    let mut acc: Option<Var> = None;
    for (i, l) in [3usize, 4, 5].into_iter().enumerate() {
        let proj = conv(tape, p, &format!("mask.lateral{l}"), pyr.levels[i], 1, 0)?;
        let up = tape.resize_nearest(proj, h, w)?;
        acc = Some(match acc {
            None => up,
            Some(a) => tape.add(a, up)?,
        });
    }
    let sum = acc.expect("three levels fused");
    conv(tape, p, "mask.fuse", sum, 1, 1)
}
