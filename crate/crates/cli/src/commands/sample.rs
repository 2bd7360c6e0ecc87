//! `smf sample`: run the ODE sampler for one (person, garment) pair and write
//! the generated image plus a person | garment | result strip.

use std::path::Path;

use smf_core::data::io::write_ppm;
use smf_core::data::prompt::{tokenize, VOCAB};
use smf_core::flow::sample;
use smf_core::model::load_checkpoint;
use smf_core::Error;

use super::{load_triplets, runtime, usage, CliError, CmdResult};
use crate::config::RunConfig;

pub fn run(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    person: usize,
    garment: usize,
    prompt_override: Option<&str>,
) -> CmdResult {
    let ckpt_path = checkpoint.ok_or_else(|| usage("sample needs --checkpoint"))?;
    let ckpt = load_checkpoint(ckpt_path).map_err(runtime)?;
    let triplets = load_triplets(&cfg.eval_path)?;

    let fetch = |label: &str, index: usize| {
        triplets.get(index).ok_or_else(|| {
            usage(format!("{label} index {index} out of range for {} ({} triplets)", cfg.eval_path.display(), triplets.len()))
        })
    };
    let person_t = fetch("person", person)?;
    let garment_t = fetch("garment", garment)?;

    let prompt = match prompt_override {
        Some(text) => tokenize(text).map_err(|e| match e {
            Error::UnknownWord { word, .. } => {
                CliError::Usage(format!("unknown word {word:?}; the vocabulary is: {}", VOCAB.join(" ")))
            }
            other => usage(other),
        })?,
        None => garment_t.prompt.clone(),
    };
    if prompt.len() > ckpt.config.max_prompt_len {
        return Err(usage(format!(
            "prompt has {} tokens but the model accepts at most {}",
            prompt.len(),
            ckpt.config.max_prompt_len
        )));
    }

    let image = sample(
        &ckpt.tensors,
        &ckpt.config,
        &person_t.person,
        &garment_t.garment,
        &person_t.pose,
        &prompt,
        &cfg.sampler_config(),
    )
    .map_err(runtime)?;

    super::ensure_dir(out)?;
    let sample_path = out.join("sample.ppm");
    let grid_path = out.join("sample_grid.ppm");
    write_ppm(&sample_path, &image).map_err(runtime)?;
    super::write_ppm_row(&grid_path, &[&person_t.person, &garment_t.garment, &image])?;
    println!("wrote {} and {}", sample_path.display(), grid_path.display());
    Ok(())
}
