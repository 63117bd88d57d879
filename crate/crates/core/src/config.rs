use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Architecture and geometry of the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Part categories, background included as category 0.
    pub parts: usize,
    /// Channels of the image-level feature the instance kernels run on.
    pub feature_dim: usize,
    /// Channels shared by every pyramid level.
    pub pyramid_dim: usize,
    /// Output channels of the generated instance-feature projector.
    pub width: usize,
    /// Generated 1×1 layers: `depth − 1` projector layers plus the mask layer.
    pub depth: usize,
    /// Down-sampling ratio of the image-level feature.
    pub mask_stride: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub stem_dim: usize,
    pub block1_dim: usize,
    /// Upper box-distance bounds for pyramid levels 3..6; level 7 is open-ended.
    pub size_bounds: [f64; 4],
    /// Center-sampling radius in units of the level stride.
    pub center_radius: f64,
    /// Prior probability used to initialise the center-score bias.
    pub prior_prob: f64,
    /// Relu on part-aware features before the generated mask layer.
    pub part_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (h, w) = (128, 128);
        ModelConfig {
            parts: 5,
            feature_dim: 6,
            pyramid_dim: 16,
            width: 10,
            depth: 2,
            mask_stride: 8,
            image_height: h,
            image_width: w,
            stem_dim: 8,
            block1_dim: 16,
            size_bounds: Self::scaled_bounds(h, w),
            center_radius: 1.5,
            prior_prob: 0.01,
            part_relu: true,
        }
    }
}

impl ModelConfig {
    /// Settings used for the full training run: wider features at mask stride 4.
    pub fn desk() -> Self {
        ModelConfig { feature_dim: 16, pyramid_dim: 32, width: 20, mask_stride: 4, ..Default::default() }
    }

    /// Pyramid strides for levels 3..=7.
    pub const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

    /// Dense-detection size ranges (64/128/256/512) rescaled by `max(H, W) / 256`.
    pub fn scaled_bounds(h: usize, w: usize) -> [f64; 4] {
        let scale = h.max(w) as f64 / 256.0;
        [64.0 * scale, 128.0 * scale, 256.0 * scale, 512.0 * scale]
    }

    /// Channels per part group, `width / parts`.
    pub fn group_dim(&self) -> usize {
        self.width / self.parts
    }

    /// Offset normalisation constant `Z = max(H, W)`.
    pub fn norm(&self) -> f64 {
        self.image_height.max(self.image_width) as f64
    }

    /// Spatial size of the image-level feature.
    pub fn mask_size(&self) -> (usize, usize) {
        (self.image_height / self.mask_stride, self.image_width / self.mask_stride)
    }

    /// Size range `[lo, hi)` of `max(l,t,r,b)` for pyramid level index `0..5`.
    pub fn level_range(&self, level: usize) -> (f64, f64) {
        let lo = if level == 0 { 0.0 } else { self.size_bounds[level - 1] };
        let hi = if level == 4 { f64::INFINITY } else { self.size_bounds[level] };
        (lo, hi)
    }

    /// Parameter counts of the generated projector stack.
    pub fn projector_params(&self) -> usize {
        let first = self.feature_dim * self.width + self.width;
        let rest = (self.depth - 2) * (self.width * self.width + self.width);
        first + rest
    }

    /// Parameter count of the generated per-part mask kernels.
    pub fn mask_kernel_params(&self) -> usize {
        self.parts * (self.group_dim() + 1)
    }

    /// Checks every structural invariant; entry points call this before work starts.
    pub fn validate(&self) -> Result<()> {
        if self.parts < 2 {
            return Err(config_err!("need at least background plus one part, got {}", self.parts));
        }
        if self.width == 0 || self.width % self.parts != 0 {
            return Err(config_err!("width {} is not a positive multiple of parts {}", self.width, self.parts));
        }
        if self.depth < 2 {
            return Err(config_err!("depth must be >= 2, got {}", self.depth));
        }
        if ![4, 8, 16].contains(&self.mask_stride) {
            return Err(config_err!("mask stride must be 4, 8 or 16, got {}", self.mask_stride));
        }
        if self.image_height == 0 || self.image_height % 16 != 0 || self.image_width == 0 || self.image_width % 16 != 0 {
            return Err(config_err!(
                "image size {}x{} must be a positive multiple of 16",
                self.image_height,
                self.image_width
            ));
        }
        if [self.feature_dim, self.pyramid_dim, self.stem_dim, self.block1_dim].contains(&0) {
            return Err(config_err!("channel counts must be positive"));
        }
        if !self.size_bounds.windows(2).all(|w| w[0] < w[1]) || self.size_bounds[0] <= 0.0 {
            return Err(config_err!("size bounds must be positive and increasing: {:?}", self.size_bounds));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) || self.center_radius <= 0.0 {
            return Err(config_err!("prior probability must lie in (0,1) and radius be positive"));
        }
        Ok(())
    }
}

/// Candidate decoding thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub topk_per_level: usize,
    pub nms_iou: f64,
    /// Greedy box NMS can be switched off entirely.
    pub nms: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_thresh: 0.3, topk_per_level: 100, nms_iou: 0.6, nms: true }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.score_thresh) || !unit(self.nms_iou) {
            return Err(config_err!("thresholds must lie in (0,1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_counts_match_hand_arithmetic() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.group_dim(), 2);
        assert_eq!(c.projector_params(), 6 * 10 + 10);
        assert_eq!(c.mask_kernel_params(), 5 * (2 + 1));
        assert_eq!(c.size_bounds, [32.0, 64.0, 128.0, 256.0]);
    }

    #[test]
    fn rejects_illegal_configs() {
        let bad = [
            ModelConfig { width: 12, ..Default::default() },
            ModelConfig { depth: 1, ..Default::default() },
            ModelConfig { mask_stride: 2, ..Default::default() },
            ModelConfig { image_height: 72, ..Default::default() },
            ModelConfig { parts: 1, width: 3, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(crate::Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn deeper_projector_adds_square_layers() {
        let c = ModelConfig { depth: 4, ..Default::default() };
        assert_eq!(c.projector_params(), 70 + 2 * 110);
    }
}
