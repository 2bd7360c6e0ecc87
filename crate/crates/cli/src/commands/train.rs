//! `smf train`: optimize a velocity model with periodic CSV logging and
//! checkpointing, resumable from any saved checkpoint.
//!
//! The batch schedule is a pure function of (run seed, step): each epoch is a
//! seeded permutation of the dataset indexed by the global example counter.
//! A resumed run therefore consumes exactly the batches the uninterrupted run
//! would have, which is what makes resume bit-reproducible.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use smf_core::data::Triplet;
use smf_core::flow::{TrainStepReport, Trainer};
use smf_core::model::{load_checkpoint, save_checkpoint};
use smf_core::rng::rng_for;

use super::{load_triplets, runtime, usage, write_text, CliError, CmdResult};
use crate::config::RunConfig;

const BATCH_SALT: u64 = 0x6261_7463; // "batc"

/// Dataset indices for one step. Global example `g = step * batch + i` lives
/// in epoch `g / n` at slot `g % n` of that epoch's permutation.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let n64 = n as u64;
    let mut perm: Vec<u32> = Vec::new();
    let mut perm_epoch = u64::MAX;
    (0..batch_size as u64)
        .map(|i| {
            let g = step * batch_size as u64 + i;
            let (epoch, slot) = (g / n64, g % n64);
            if epoch != perm_epoch {
                perm = (0..n as u32).collect();
                perm.shuffle(&mut rng_for(seed, BATCH_SALT, epoch));
                perm_epoch = epoch;
            }
            perm[slot as usize] as usize
        })
        .collect()
}

fn gather_batch(triplets: &[Triplet], cfg: &RunConfig, step: u64) -> Vec<Triplet> {
    batch_indices(triplets.len(), cfg.batch_size, cfg.seed, step)
        .into_iter()
        .map(|i| triplets[i].clone())
        .collect()
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step:06}.smfc"))
}

fn csv_row(r: &TrainStepReport) -> String {
    format!("{},{},{},{},{}\n", r.step, r.fm_loss, r.attn_loss, r.total_loss, r.grad_norm)
}

pub fn run(cfg: &RunConfig, out: &Path, resume: Option<&Path>, threads: usize) -> CmdResult {
    let triplets = load_triplets(&cfg.dataset_path)?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(runtime)?;
            if ckpt.config != cfg.model_config() {
                return Err(usage(format!(
                    "checkpoint {} was trained with a different model config; \
                     resume with the config that produced it",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(&ckpt, cfg.sampler_config(), cfg.adam_config()).map_err(runtime)?
        }
        None => {
            Trainer::new(cfg.model_config(), cfg.sampler_config(), cfg.adam_config(), cfg.seed).map_err(runtime)?
        }
    };
    trainer.threads = threads;

    let start = trainer.step_count();
    if start >= cfg.steps {
        return Err(usage(format!("checkpoint is already at step {start}, nothing to do for a {}-step run", cfg.steps)));
    }

    super::ensure_dir(out)?;
    write_text(&out.join("run_config.txt"), &cfg.to_file_text())?;

    let log_path = out.join("train_log.csv");
    let fresh_log = !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    if fresh_log {
        log.write_all(b"step,fm_loss,attn_loss,total_loss,grad_norm\n")
            .map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    }

    let mut last_checkpoint: Option<PathBuf> = resume.map(Path::to_path_buf);
    for step in start..cfg.steps {
        let batch = gather_batch(&triplets, cfg, step);
        let report = match trainer.train_step(&batch) {
            Ok(r) if r.total_loss.is_finite() => r,
            outcome => {
                let reason = match outcome {
                    Ok(r) => format!("non-finite loss {} at step {}", r.total_loss, r.step),
                    Err(e) => e.to_string(),
                };
                let kept = match &last_checkpoint {
                    Some(p) => format!("last good checkpoint kept at {}", p.display()),
                    None => "no checkpoint written yet".to_string(),
                };
                return Err(CliError::Runtime(format!("training aborted: {reason}; {kept}")));
            }
        };
        let done = report.step;
        if done % cfg.log_every == 0 || done == cfg.steps {
            log.write_all(csv_row(&report).as_bytes())
                .map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
        }
        if done % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(out, done);
            save_checkpoint(&path, &trainer.checkpoint()).map_err(runtime)?;
            last_checkpoint = Some(path);
        }
        if done == cfg.steps {
            let path = out.join("ckpt_final.smfc");
            save_checkpoint(&path, &trainer.checkpoint()).map_err(runtime)?;
            println!(
                "trained to step {done} (fm_loss {}, total_loss {}); final checkpoint {}",
                report.fm_loss,
                report.total_loss,
                path.display()
            );
        }
    }
    Ok(())
}
