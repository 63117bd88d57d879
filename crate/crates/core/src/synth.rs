//! Procedural multi-person scenes with full parsing ground truth.
//!
//! Figures are paper dolls: a disc head, a rotated torso rectangle and
//! rotated limb rectangles, painted back to front so later figures occlude
//! earlier ones.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// Part categories, in label order.
pub const PART_NAMES: [&str; 5] = ["background", "head", "torso", "arms", "legs"];
pub const NUM_PARTS: usize = PART_NAMES.len();
pub const HEAD: u8 = 1;
pub const TORSO: u8 = 2;
pub const ARMS: u8 = 3;
pub const LEGS: u8 = 4;

const PLACEMENT_TRIES: usize = 64;
const MIN_TORSO_VISIBLE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of figures attempted per scene.
    pub persons: (usize, usize),
    /// Inclusive range of figure heights in pixels.
    pub scale: (f64, f64),
    /// Probability that a figure may be placed over earlier ones.
    pub overlap_prob: f64,
    /// Per-channel color jitter amplitude.
    pub color_jitter: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 128,
            width: 128,
            persons: (1, 3),
            scale: (44.0, 88.0),
            overlap_prob: 0.3,
            color_jitter: 0.08,
            noise: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(config_err!("empty canvas {}x{}", self.height, self.width));
        }
        if self.persons.0 > self.persons.1 {
            return Err(config_err!("person range {:?} is empty", self.persons));
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return Err(config_err!("scale range {:?} is empty or non-positive", self.scale));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) || self.color_jitter < 0.0 || self.noise < 0.0 {
            return Err(config_err!("probabilities and amplitudes out of range"));
        }
        Ok(())
    }

    pub fn parts(&self) -> usize {
        NUM_PARTS
    }
}

/// Ground truth of one figure.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGt {
    /// Row-major `[H, W]` part labels of the unoccluded figure; 0 off the figure.
    pub part_labels: Vec<u8>,
    /// Part labels that survive occlusion by later figures.
    pub visible_labels: Vec<u8>,
    /// Visible extent `(x0, y0, x1, y1)` with exclusive far edges.
    pub bbox: [f64; 4],
    /// Mean pixel center of the visible pixels of each part; slot 0 is the
    /// whole visible support.
    pub centroids: Vec<Option<[f64; 2]>>,
    pub present: Vec<bool>,
    /// Position in painting order, 0 = painted first.
    pub draw_order: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub instances: Vec<InstanceGt>,
}

impl SyntheticScene {
    /// Composite semantic map: each pixel takes the visible label of whichever figure owns it.
    pub fn semantic_map(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.height * self.width];
        for inst in &self.instances {
            for (o, &v) in out.iter_mut().zip(&inst.visible_labels) {
                if v != 0 {
                    *o = v;
                }
            }
        }
        out
    }
}

/// Centroids and presence flags recomputed from a visible label map.
pub fn centroids_from_labels(labels: &[u8], width: usize, parts: usize) -> (Vec<Option<[f64; 2]>>, Vec<bool>) {
    let mut sum = vec![[0.0f64; 2]; parts];
    let mut count = vec![0usize; parts];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let p = [(i % width) as f64 + 0.5, (i / width) as f64 + 0.5];
        for k in [0, l as usize] {
            sum[k][0] += p[0];
            sum[k][1] += p[1];
            count[k] += 1;
        }
    }
    let centroids = (0..parts)
        .map(|k| (count[k] > 0).then(|| [sum[k][0] / count[k] as f64, sum[k][1] / count[k] as f64]))
        .collect();
    let present = count.iter().map(|&c| c > 0).collect();
    (centroids, present)
}

/// Tight visible box with exclusive far edges, or `None` for an empty map.
pub fn bbox_from_labels(labels: &[u8], width: usize) -> Option<[f64; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l != 0) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => [x, y, x + 1, y + 1],
            Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
        });
    }
    b.map(|[a, b, c, d]| [a as f64, b as f64, c as f64, d as f64])
}

#[derive(Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    /// Rectangle centered at `(cx, cy)`, rotated by `angle`.
    Rect { cx: f64, cy: f64, half_w: f64, half_h: f64, angle: f64 },
}

impl Shape {
    fn limb(x: f64, y: f64, angle: f64, len: f64, thick: f64) -> Shape {
        // `angle` measured from straight down.
        let (dx, dy) = (-math::sin(angle), math::cos(angle));
        Shape::Rect { cx: x + dx * len / 2.0, cy: y + dy * len / 2.0, half_w: thick / 2.0, half_h: len / 2.0, angle }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r,
            Shape::Rect { cx, cy, half_w, half_h, angle } => {
                let (s, c) = (math::sin(angle), math::cos(angle));
                let (dx, dy) = (px - cx, py - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= half_w && v.abs() <= half_h
            }
        }
    }

    fn extent(&self) -> [f64; 4] {
        match *self {
            Shape::Disc { cx, cy, r } => [cx - r, cy - r, cx + r, cy + r],
            Shape::Rect { cx, cy, half_w, half_h, .. } => {
                let r = math::sqrt(half_w * half_w + half_h * half_h);
                [cx - r, cy - r, cx + r, cy + r]
            }
        }
    }
}

struct Figure {
    /// Painted in order; later shapes win inside the figure.
    shapes: Vec<(u8, Shape)>,
    colors: [[f64; 3]; NUM_PARTS],
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64) -> [f64; 3] {
    base.map(|c| (c + if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 }).clamp(0.0, 1.0))
}

fn sample_figure(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Figure {
    let h = if cfg.scale.0 < cfg.scale.1 { rng.random_range(cfg.scale.0..=cfg.scale.1) } else { cfg.scale.0 };
    let margin_x = 0.2 * h;
    let margin_y = 0.35 * h;
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if lo < hi { rng.random_range(lo..hi) } else { (lo + hi) / 2.0 };
    let cx = pick(rng, margin_x, cfg.width as f64 - margin_x);
    let cy = pick(rng, margin_y, cfg.height as f64 - margin_y);
    let lean = rng.random_range(-0.15..0.15);

    let torso_h = 0.34 * h;
    let torso_w = 0.24 * h;
    let torso_cy = cy - 0.06 * h;
    let (ls, lc) = (math::sin(lean), math::cos(lean));
    // Torso axis from hip (bottom) to neck (top).
    let up = (ls, -lc);
    let neck = (cx + up.0 * torso_h / 2.0, torso_cy + up.1 * torso_h / 2.0);
    let hip = (cx - up.0 * torso_h / 2.0, torso_cy - up.1 * torso_h / 2.0);
    let side = (lc, ls);
    let head_r = 0.1 * h;
    let head = (neck.0 + up.0 * head_r * 1.05, neck.1 + up.1 * head_r * 1.05);

    let mut shapes = Vec::with_capacity(6);
    let leg_len = 0.44 * h;
    let leg_t = 0.1 * h;
    for sgn in [-1.0, 1.0] {
        let at = (hip.0 + side.0 * sgn * torso_w * 0.27, hip.1 + side.1 * sgn * torso_w * 0.27);
        let a = lean + sgn * rng.random_range(0.0..0.35);
        shapes.push((LEGS, Shape::limb(at.0, at.1, a, leg_len, leg_t)));
    }
    shapes.push((TORSO, Shape::Rect { cx, cy: torso_cy, half_w: torso_w / 2.0, half_h: torso_h / 2.0, angle: lean }));
    let arm_len = 0.34 * h;
    let arm_t = 0.08 * h;
    for sgn in [-1.0, 1.0] {
        let shoulder = (neck.0 + side.0 * sgn * torso_w * 0.62, neck.1 + side.1 * sgn * torso_w * 0.62 + 0.03 * h);
        let a = lean + sgn * rng.random_range(0.15..1.6);
        shapes.push((ARMS, Shape::limb(shoulder.0, shoulder.1, a, arm_len, arm_t)));
    }
    shapes.push((HEAD, Shape::Disc { cx: head.0, cy: head.1, r: head_r }));

    let amp = cfg.color_jitter;
    let skin = jitter(rng, [0.93, 0.74, 0.6], amp);
    let shirt_hues: [[f64; 3]; 4] = [[0.85, 0.2, 0.2], [0.2, 0.7, 0.25], [0.95, 0.8, 0.15], [0.7, 0.3, 0.8]];
    let hue = shirt_hues[rng.random_range(0..shirt_hues.len())];
    let shirt = jitter(rng, hue, amp);
    let sleeve = jitter(rng, [0.15, 0.75, 0.75], amp);
    let pants = jitter(rng, [0.12, 0.2, 0.6], amp);
    Figure { shapes, colors: [[0.0; 3], skin, shirt, sleeve, pants] }
}

fn rasterize(fig: &Figure, w: usize, h: usize) -> Vec<u8> {
    let mut out = vec![0u8; w * h];
    for &(label, shape) in &fig.shapes {
        let [x0, y0, x1, y1] = shape.extent();
        let xs = (math::floor(x0).max(0.0) as usize).min(w);
        let xe = ((math::floor(x1) + 1.0).max(0.0) as usize).min(w);
        let ys = (math::floor(y0).max(0.0) as usize).min(h);
        let ye = ((math::floor(y1) + 1.0).max(0.0) as usize).min(h);
        for y in ys..ye {
            for x in xs..xe {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out[y * w + x] = label;
                }
            }
        }
    }
    out
}

fn extent_box(labels: &[u8], w: usize) -> Option<[f64; 4]> {
    bbox_from_labels(labels, w)
}

fn boxes_overlap(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn count(labels: &[u8], v: u8) -> usize {
    labels.iter().filter(|&&l| l == v).count()
}

/// Torso visibility of every figure under painter's order.
fn torsos_visible(maps: &[Vec<u8>]) -> bool {
    let n = maps.len();
    for (i, m) in maps.iter().enumerate() {
        let total = count(m, TORSO);
        if total == 0 {
            return false;
        }
        let visible = m
            .iter()
            .enumerate()
            .filter(|&(p, &l)| l == TORSO && maps[i + 1..n].iter().all(|later| later[p] == 0))
            .count();
        if (visible as f64) < MIN_TORSO_VISIBLE * total as f64 {
            return false;
        }
    }
    true
}

/// Renders the scene for `seed`. Pure in `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let target = rng.random_range(cfg.persons.0..=cfg.persons.1);

    let mut figures: Vec<Figure> = Vec::new();
    let mut maps: Vec<Vec<u8>> = Vec::new();
    let mut extents: Vec<[f64; 4]> = Vec::new();
    for _ in 0..target {
        let may_overlap = rng.random_bool(cfg.overlap_prob);
        for _ in 0..PLACEMENT_TRIES {
            let fig = sample_figure(&mut rng, cfg);
            let map = rasterize(&fig, w, h);
            let Some(ext) = extent_box(&map, w) else { continue };
            if !may_overlap && extents.iter().any(|e| boxes_overlap(e, &ext)) {
                continue;
            }
            maps.push(map);
            if !torsos_visible(&maps) {
                maps.pop();
                continue;
            }
            figures.push(fig);
            extents.push(ext);
            break;
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for (i, m) in maps.iter().enumerate() {
        for (o, &l) in owner.iter_mut().zip(m) {
            if l != 0 {
                *o = Some(i);
            }
        }
    }

    let mut image = Tensor::zeros(&[3, h, w]);
    let bg = jitter(&mut rng, [0.5, 0.5, 0.5], 0.1);
    let plane = w * h;
    for p in 0..plane {
        let rgb = match owner[p] {
            Some(i) => figures[i].colors[maps[i][p] as usize],
            None => bg,
        };
        for (c, &v) in rgb.iter().enumerate() {
            let n = if cfg.noise > 0.0 { rng.random_range(-cfg.noise..cfg.noise) } else { 0.0 };
            image.data_mut()[c * plane + p] = (v + n).clamp(0.0, 1.0);
        }
    }

    let instances = maps
        .into_iter()
        .enumerate()
        .map(|(i, part_labels)| {
            let visible_labels: Vec<u8> =
                part_labels.iter().zip(&owner).map(|(&l, &o)| if o == Some(i) { l } else { 0 }).collect();
            let (centroids, present) = centroids_from_labels(&visible_labels, w, NUM_PARTS);
            let bbox = bbox_from_labels(&visible_labels, w).expect("torso visibility was enforced");
            InstanceGt { part_labels, visible_labels, bbox, centroids, present, draw_order: i }
        })
        .collect();

    Ok(SyntheticScene { seed, height: h, width: w, image, instances })
}

/// Scenes for seeds `base, base+1, ...`.
pub fn generate_dataset(base_seed: u64, n: usize, cfg: &GenConfig) -> Result<Vec<SyntheticScene>> {
    (0..n as u64).map(|i| generate_scene(base_seed.wrapping_add(i), cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene(11, &cfg).unwrap(), generate_scene(11, &cfg).unwrap());
    }

    #[test]
    fn visible_maps_are_disjoint_and_subsets() {
        let cfg = GenConfig { overlap_prob: 1.0, persons: (3, 4), ..Default::default() };
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg).unwrap();
            for p in 0..s.width * s.height {
                let owners = s.instances.iter().filter(|i| i.visible_labels[p] != 0).count();
                assert!(owners <= 1);
                for i in &s.instances {
                    assert!(i.visible_labels[p] == 0 || i.visible_labels[p] == i.part_labels[p]);
                }
            }
        }
    }

    #[test]
    fn torso_always_present() {
        let cfg = GenConfig { overlap_prob: 1.0, persons: (2, 5), ..Default::default() };
        for seed in 0..30 {
            for i in generate_scene(seed, &cfg).unwrap().instances {
                assert!(i.present[TORSO as usize]);
                assert!(i.present[0]);
            }
        }
    }

    #[test]
    fn no_overlap_gives_disjoint_boxes() {
        let cfg = GenConfig { overlap_prob: 0.0, persons: (2, 3), ..Default::default() };
        for seed in 0..30 {
            let s = generate_scene(seed, &cfg).unwrap();
            for (a, ia) in s.instances.iter().enumerate() {
                for ib in &s.instances[a + 1..] {
                    assert!(!boxes_overlap(&ia.bbox, &ib.bbox), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn empty_scene_has_no_instances() {
        let cfg = GenConfig { persons: (0, 0), ..Default::default() };
        let s = generate_scene(1, &cfg).unwrap();
        assert!(s.instances.is_empty());
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn centroid_of_single_pixel_is_its_center() {
        let mut l = vec![0u8; 12];
        l[7] = HEAD;
        let (c, p) = centroids_from_labels(&l, 4, NUM_PARTS);
        assert_eq!(c[1], Some([3.5, 1.5]));
        assert_eq!(c[0], Some([3.5, 1.5]));
        assert_eq!(p, vec![true, true, false, false, false]);
        assert_eq!(bbox_from_labels(&l, 4), Some([3.0, 1.0, 4.0, 2.0]));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GenConfig { persons: (3, 1), ..Default::default() };
        assert!(generate_scene(0, &cfg).is_err());
    }
}
