//! `smf eval`: score a checkpoint on the unpaired pairing list and write the
//! report files.

use std::path::Path;

use smf_core::data::io::read_pairing;
use smf_core::eval::run_unpaired_eval;
use smf_core::model::load_checkpoint;

use super::{load_triplets, runtime, usage, write_text, CmdResult};
use crate::config::RunConfig;

pub fn run(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> CmdResult {
    let ckpt_path = checkpoint.ok_or_else(|| usage("eval needs --checkpoint"))?;
    let ckpt = load_checkpoint(ckpt_path).map_err(runtime)?;
    let triplets = load_triplets(&cfg.eval_path)?;
    let pairing = read_pairing(&cfg.pairing_path).map_err(runtime)?;

    let report =
        run_unpaired_eval(&ckpt.tensors, &ckpt.config, &triplets, &pairing, &cfg.sampler_config()).map_err(runtime)?;

    super::ensure_dir(out)?;
    write_text(&out.join("eval_report.txt"), &report.to_key_values())?;
    write_text(&out.join("eval_pairs.csv"), &report.to_csv())?;
    print!("{}", report.to_key_values());
    Ok(())
}
