//! Short training runs over width × depth × mask stride.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use repparse_core::repparse::ParseFlags;
use repparse_core::synth::SyntheticScene;
use repparse_core::train::Trainer;
use repparse_core::ModelConfig;

use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline;

pub const WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const DEPTHS: [usize; 3] = [2, 3, 4];
pub const STRIDES: [usize; 3] = [4, 8, 16];

/// Steps per run and held-out scene count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub steps: usize,
    pub val_scenes: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { steps: 40, val_scenes: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub width_requested: usize,
    pub width: usize,
    pub depth: usize,
    pub mask_stride: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub miou: f64,
    pub ap_p_50: f64,
    pub ap_p_vol: f64,
    pub pcp_50: f64,
    pub train_seconds: f64,
}

/// Multiple of `parts` closest to `width`, ties going down, never zero.
pub fn legal_width(width: usize, parts: usize) -> usize {
    let lo = width / parts * parts;
    let hi = lo + parts;
    if lo == 0 || hi - width < width - lo { hi } else { lo }
}

pub fn grid(parts: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for &w in &WIDTHS {
        for &d in &DEPTHS {
            for &s in &STRIDES {
                out.push((w, legal_width(w, parts), d, s));
            }
        }
    }
    out
}

/// One short run per grid point; `on_row` sees each finished row.
pub fn run_sweep(
    base: &RunConfig,
    sweep: &SweepConfig,
    train: &[SyntheticScene],
    val: &[SyntheticScene],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let pool = pipeline::thread_pool()?;
    let mut rows = Vec::new();
    for (width_requested, width, depth, mask_stride) in grid(base.model.parts) {
        let model = ModelConfig { width, depth, mask_stride, ..base.model.clone() };
        let tc = repparse_core::train::TrainConfig { steps: sweep.steps, ..base.train.clone() };
        let t0 = Instant::now();
        let mut tr = Trainer::new(model.clone(), tc)?;
        let log = tr.run(train, |_, _| {})?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let tail = &log[log.len().saturating_sub(10)..];
        let final_loss = if tail.is_empty() { f64::NAN } else { tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64 };
        let m = pipeline::evaluate_model(&pool, val, &tr.params, &model, &base.decode, ParseFlags::FULL)?;
        let row = SweepRow {
            width_requested,
            width,
            depth,
            mask_stride,
            steps: sweep.steps,
            final_loss,
            miou: m.miou,
            ap_p_50: m.ap_p_50,
            ap_p_vol: m.ap_p_vol,
            pcp_50: m.pcp_50,
            train_seconds,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv(w: impl Write, rows: &[SweepRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv(text: &str) -> csv::Result<Vec<SweepRow>> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legal_widths_for_five_parts() {
        let w: Vec<usize> = WIDTHS.iter().map(|&w| legal_width(w, 5)).collect();
        assert_eq!(w, vec![10, 15, 30, 65]);
        assert_eq!(legal_width(2, 5), 5);
        assert_eq!(legal_width(20, 5), 20);
    }

    #[test]
    fn grid_covers_every_axis_combination() {
        let g = grid(5);
        assert_eq!(g.len(), 36);
        for &(_, w, _, _) in &g {
            assert_eq!(w % 5, 0);
        }
    }
}
