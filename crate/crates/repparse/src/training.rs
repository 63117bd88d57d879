//! Training runs with on-disk artifacts.

use std::path::{Path, PathBuf};

use repparse_core::synth::SyntheticScene;
use repparse_core::train::Trainer;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::create_dir;
use crate::error::Result;
use crate::losslog::{LossLog, LossRow};

pub const CHECKPOINT_FILE: &str = "checkpoint.rppk";
pub const LOSS_FILE: &str = "loss.csv";
/// Steps between checkpoint rewrites.
pub const CHECKPOINT_EVERY: usize = 500;

pub struct TrainArtifacts {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub loss_path: PathBuf,
    pub log: Vec<LossRow>,
}

fn snapshot(tr: &Trainer) -> Checkpoint {
    Checkpoint {
        params: tr.params.clone(),
        config: tr.model.clone(),
        step: tr.step as u64,
        flags: tr.config.flags,
    }
}

/// Trains on `data`, writing `loss.csv` and `checkpoint.rppk` under `out`.
/// `on_step` sees the 1-based step and its batch-mean losses.
pub fn train_to_dir(
    run: &RunConfig,
    data: &[SyntheticScene],
    out: &Path,
    mut on_step: impl FnMut(&LossRow),
) -> Result<TrainArtifacts> {
    run.validate()?;
    create_dir(out)?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let loss_path = out.join(LOSS_FILE);
    let mut log_file = LossLog::create(&loss_path)?;
    let mut trainer = Trainer::new(run.model.clone(), run.train.clone())?;
    let mut log = Vec::with_capacity(run.train.steps);
    while trainer.step < run.train.steps {
        let report = trainer.step(data)?;
        let row = LossRow::new(trainer.step, &report);
        log_file.push(row)?;
        on_step(&row);
        log.push(row);
        if trainer.step % CHECKPOINT_EVERY == 0 {
            log_file.flush()?;
            checkpoint::save(&checkpoint_path, &snapshot(&trainer))?;
        }
    }
    log_file.flush()?;
    let ck = snapshot(&trainer);
    checkpoint::save(&checkpoint_path, &ck)?;
    Ok(TrainArtifacts { checkpoint: ck, checkpoint_path, loss_path, log })
}
