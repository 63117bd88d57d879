//! Inference, evaluation and overlay rendering over whole datasets.

use std::path::Path;

use rayon::prelude::*;

use repparse_core::metrics::{Evaluator, MetricsReport, Prediction};
use repparse_core::repparse::{full_parse, ParseFlags, ParsingResult};
use repparse_core::synth::SyntheticScene;
use repparse_core::{DecodeConfig, ModelConfig, ParamStore};

use crate::dataset::{self, ScenePredictions};
use crate::error::{Error, Result};
use crate::netpbm;

pub const THREADS_ENV: &str = "REPPARSE_THREADS";

/// Worker pool capped by `REPPARSE_THREADS`, logical cores otherwise.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Error::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Usage(e.to_string()))
}

/// Parses every scene; results come back in input order.
pub fn infer_scenes(
    pool: &rayon::ThreadPool,
    scenes: &[SyntheticScene],
    params: &ParamStore,
    cfg: &ModelConfig,
    dc: &DecodeConfig,
    flags: ParseFlags,
) -> Result<Vec<Vec<ParsingResult>>> {
    pool.install(|| scenes.par_iter().map(|s| full_parse(&s.image, params, cfg, dc, flags).map_err(Error::from)).collect())
}

fn gt_maps(scene: &SyntheticScene) -> Vec<&[u8]> {
    scene.instances.iter().map(|i| i.visible_labels.as_slice()).collect()
}

/// Metrics of already-parsed scenes; reduction runs in scene order.
pub fn evaluate_results(scenes: &[SyntheticScene], results: &[Vec<ParsingResult>], parts: usize) -> Result<MetricsReport> {
    let mut ev = Evaluator::new(parts);
    for (s, rs) in scenes.iter().zip(results) {
        let preds: Vec<Prediction<'_>> = rs.iter().map(|r| Prediction { score: r.score, labels: &r.labels }).collect();
        ev.add_image(&preds, &gt_maps(s))?;
    }
    Ok(ev.report())
}

pub fn evaluate_model(
    pool: &rayon::ThreadPool,
    scenes: &[SyntheticScene],
    params: &ParamStore,
    cfg: &ModelConfig,
    dc: &DecodeConfig,
    flags: ParseFlags,
) -> Result<MetricsReport> {
    let results = infer_scenes(pool, scenes, params, cfg, dc, flags)?;
    evaluate_results(scenes, &results, cfg.parts)
}

/// Matches prediction scene directories to ground-truth ones by name.
pub fn evaluate_dirs(pool: &rayon::ThreadPool, pred_root: &Path, gt_root: &Path) -> Result<MetricsReport> {
    let gt_dirs = dataset::scene_dirs(gt_root)?;
    if gt_dirs.is_empty() {
        return Err(Error::Usage(format!("{}: no scene directories", gt_root.display())));
    }
    let loaded: Vec<(SyntheticScene, ScenePredictions)> = pool.install(|| {
        gt_dirs
            .par_iter()
            .map(|d| {
                let gt = dataset::read_scene(d)?;
                let name = d.file_name().expect("scene dirs have names");
                let pd = pred_root.join(name);
                if !pd.is_dir() {
                    return Err(Error::Usage(format!("{}: missing predictions for {}", pred_root.display(), name.to_string_lossy())));
                }
                let pred = dataset::read_predictions(&pd, gt.width, gt.height)?;
                Ok((gt, pred))
            })
            .collect::<Result<_>>()
    })?;
    let parts = loaded[0].1.parts.max(loaded[0].0.instances.first().map_or(0, |i| i.present.len()));
    let mut ev = Evaluator::new(parts);
    for (gt, pred) in &loaded {
        if pred.parts != parts {
            return Err(Error::Usage(format!("{}: {} parts, expected {parts}", pred.name, pred.parts)));
        }
        let preds: Vec<Prediction<'_>> =
            pred.instances.iter().map(|p| Prediction { score: p.meta.score, labels: &p.labels }).collect();
        ev.add_image(&preds, &gt_maps(gt))?;
    }
    Ok(ev.report())
}

/// Distinct colour for instance `i`.
pub fn instance_color(i: usize) -> [u8; 3] {
    const P: [[u8; 3]; 8] =
        [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60]];
    P[i % P.len()]
}

/// Distinct colour for part `k`; background is black.
pub fn part_color(k: u8) -> [u8; 3] {
    const P: [[u8; 3]; 8] =
        [[0, 0, 0], [255, 200, 150], [220, 40, 40], [40, 200, 220], [40, 60, 200], [120, 220, 80], [250, 220, 40], [160, 80, 200]];
    P[k as usize % P.len()]
}

fn blend(dst: &mut [u8], c: [u8; 3]) {
    for (d, &v) in dst.iter_mut().zip(&c) {
        *d = ((*d as u16 + v as u16) / 2) as u8;
    }
}

/// Tints each instance's support with its colour, lowest score first.
pub fn overlay_instances(rgb: &[u8], labels: &[(f64, &[u8])]) -> Vec<u8> {
    let mut out = rgb.to_vec();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[a].0.total_cmp(&labels[b].0));
    for (rank, &i) in order.iter().enumerate() {
        for (p, &l) in labels[i].1.iter().enumerate() {
            if l != 0 {
                blend(&mut out[3 * p..3 * p + 3], instance_color(labels.len() - 1 - rank));
            }
        }
    }
    out
}

/// Tints pixels by part label.
pub fn overlay_parts(rgb: &[u8], semantic: &[u8]) -> Vec<u8> {
    let mut out = rgb.to_vec();
    for (p, &l) in semantic.iter().enumerate() {
        if l != 0 {
            blend(&mut out[3 * p..3 * p + 3], part_color(l));
        }
    }
    out
}

/// Filled white square of side 3 centred on each point.
pub fn draw_dots(rgb: &mut [u8], width: usize, height: usize, points: &[[f64; 2]]) {
    for pt in points {
        if !pt[0].is_finite() || !pt[1].is_finite() {
            continue;
        }
        let (cx, cy) = (pt[0].floor() as i64, pt[1].floor() as i64);
        for y in cy - 1..=cy + 1 {
            for x in cx - 1..=cx + 1 {
                if (0..width as i64).contains(&x) && (0..height as i64).contains(&y) {
                    let p = 3 * (y as usize * width + x as usize);
                    rgb[p..p + 3].copy_from_slice(&[255, 255, 255]);
                }
            }
        }
    }
}

/// Writes the instance-colour overlay of one parsed scene.
pub fn write_instance_overlay(path: &Path, scene: &SyntheticScene, results: &[ParsingResult]) -> Result<()> {
    let rgb = netpbm::planar_to_rgb(scene.image.data(), scene.width, scene.height);
    let maps: Vec<(f64, &[u8])> = results.iter().map(|r| (r.score, r.labels.as_slice())).collect();
    netpbm::write_ppm(path, scene.width, scene.height, &overlay_instances(&rgb, &maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dots_are_white_and_clipped() {
        let mut rgb = vec![0u8; 3 * 16];
        draw_dots(&mut rgb, 4, 4, &[[0.2, 0.7], [10.0, 10.0], [f64::NAN, 1.0]]);
        let white: Vec<usize> = (0..16).filter(|&p| rgb[3 * p..3 * p + 3] == [255, 255, 255]).collect();
        assert_eq!(white, vec![0, 1, 4, 5]);
    }

    #[test]
    fn overlay_leaves_background_untouched() {
        let rgb = vec![100u8; 3 * 4];
        let labels = [0u8, 1, 0, 2];
        let out = overlay_parts(&rgb, &labels);
        assert_eq!(&out[0..3], &rgb[0..3]);
        assert_ne!(&out[3..6], &rgb[3..6]);
        let inst = overlay_instances(&rgb, &[(0.5, &labels[..])]);
        assert_eq!(&inst[6..9], &rgb[6..9]);
        assert_ne!(&inst[9..12], &rgb[9..12]);
    }
}
