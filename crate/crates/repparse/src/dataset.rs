//! On-disk scene and prediction layouts.
//!
//! ```text
//! <root>/scene_00000/image.ppm
//!                    inst_00.pgm      part index per pixel, 0 elsewhere
//!                    meta.json        {"instances":[{"box","centroids","present"}],"C","seed"}
//! ```
//!
//! Prediction directories reuse the layout with `pred_meta.json` in place of
//! `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use repparse_core::repparse::ParsingResult;
use repparse_core::synth::{InstanceGt, SyntheticScene};
use repparse_core::Tensor;

use crate::error::{Error, Result};
use crate::netpbm;

pub const IMAGE_FILE: &str = "image.ppm";
pub const META_FILE: &str = "meta.json";
pub const PRED_META_FILE: &str = "pred_meta.json";

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:05}")
}

pub fn instance_file_name(index: usize) -> String {
    format!("inst_{index:02}.pgm")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMeta {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub centroids: Vec<Option<[f64; 2]>>,
    pub present: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub instances: Vec<InstanceMeta>,
    #[serde(rename = "C")]
    pub parts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredInstanceMeta {
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Representative-part locations in image pixels.
    pub part_locations: Vec<[f64; 2]>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredMeta {
    pub instances: Vec<PredInstanceMeta>,
    #[serde(rename = "C")]
    pub parts: usize,
}

/// A predicted instance read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PredInstance {
    pub meta: PredInstanceMeta,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePredictions {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub parts: usize,
    pub instances: Vec<PredInstance>,
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Sorted `scene_*` subdirectories of `root`.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(root, err))?;
        let name = e.file_name();
        if name.to_string_lossy().starts_with("scene_") && e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    create_dir(dir)?;
    let rgb = netpbm::planar_to_rgb(scene.image.data(), scene.width, scene.height);
    netpbm::write_ppm(&dir.join(IMAGE_FILE), scene.width, scene.height, &rgb)?;
    let mut instances = Vec::with_capacity(scene.instances.len());
    for (i, inst) in scene.instances.iter().enumerate() {
        netpbm::write_pgm(&dir.join(instance_file_name(i)), scene.width, scene.height, &inst.visible_labels)?;
        instances.push(InstanceMeta { bbox: inst.bbox, centroids: inst.centroids.clone(), present: inst.present.clone() });
    }
    let parts = scene.instances.first().map_or(repparse_core::synth::NUM_PARTS, |i| i.present.len());
    write_json(&dir.join(META_FILE), &SceneMeta { instances, parts, seed: scene.seed })
}

pub fn export_dataset(scenes: &[SyntheticScene], root: &Path) -> Result<()> {
    create_dir(root)?;
    for (i, s) in scenes.iter().enumerate() {
        write_scene(&root.join(scene_dir_name(i)), s)?;
    }
    Ok(())
}

/// Reads an image file into a `[3, H, W]` tensor.
pub fn read_image(path: &Path) -> Result<(usize, usize, Tensor)> {
    let (w, h, rgb) = netpbm::read_ppm(path)?;
    let t = Tensor::new(&[3, h, w], netpbm::rgb_to_planar(&rgb, w, h)).map_err(|e| Error::parse(path, e))?;
    Ok((w, h, t))
}

fn read_labels(path: &Path, width: usize, height: usize, parts: usize) -> Result<Vec<u8>> {
    let (w, h, labels) = netpbm::read_pgm(path)?;
    if (w, h) != (width, height) {
        return Err(Error::parse(path, format!("mask is {w}x{h}, image is {width}x{height}")));
    }
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= parts) {
        return Err(Error::parse(path, format!("label {bad} out of range for {parts} parts")));
    }
    Ok(labels)
}

/// The unoccluded part maps are not stored, so `part_labels` comes back
/// equal to `visible_labels`; `draw_order` is the file index.
pub fn read_scene(dir: &Path) -> Result<SyntheticScene> {
    let meta_path = dir.join(META_FILE);
    let meta: SceneMeta = read_json(&meta_path)?;
    let (width, height, image) = read_image(&dir.join(IMAGE_FILE))?;
    let mut instances = Vec::with_capacity(meta.instances.len());
    for (i, m) in meta.instances.into_iter().enumerate() {
        if m.centroids.len() != meta.parts || m.present.len() != meta.parts {
            return Err(Error::parse(&meta_path, format!("instance {i} does not list {} parts", meta.parts)));
        }
        let labels = read_labels(&dir.join(instance_file_name(i)), width, height, meta.parts)?;
        instances.push(InstanceGt {
            part_labels: labels.clone(),
            visible_labels: labels,
            bbox: m.bbox,
            centroids: m.centroids,
            present: m.present,
            draw_order: i,
        });
    }
    Ok(SyntheticScene { seed: meta.seed, height, width, image, instances })
}

pub fn import_dataset(root: &Path) -> Result<Vec<SyntheticScene>> {
    scene_dirs(root)?.iter().map(|d| read_scene(d)).collect()
}

pub fn write_predictions(dir: &Path, width: usize, height: usize, parts: usize, results: &[ParsingResult]) -> Result<()> {
    create_dir(dir)?;
    let mut instances = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        netpbm::write_pgm(&dir.join(instance_file_name(i)), width, height, &r.labels)?;
        instances.push(PredInstanceMeta {
            score: r.score,
            bbox: r.bbox,
            part_locations: r.part_locations.iter().map(|&(x, y)| [x, y]).collect(),
            alpha: r.alpha.clone(),
        });
    }
    write_json(&dir.join(PRED_META_FILE), &PredMeta { instances, parts })
}

/// Prediction maps take their size from the first mask file.
pub fn read_predictions(dir: &Path, width: usize, height: usize) -> Result<ScenePredictions> {
    let meta: PredMeta = read_json(&dir.join(PRED_META_FILE))?;
    let mut instances = Vec::with_capacity(meta.instances.len());
    for (i, m) in meta.instances.into_iter().enumerate() {
        let labels = read_labels(&dir.join(instance_file_name(i)), width, height, meta.parts)?;
        instances.push(PredInstance { meta: m, labels });
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ScenePredictions { name, width, height, parts: meta.parts, instances })
}
