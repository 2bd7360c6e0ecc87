//! `smf ablate`: train three model variants from the same seed and the same
//! batch schedule, evaluate them on the same pairing, and tabulate the result.
//!
//! Variants stack the paper's two switches: both off, reference position
//! embeddings on, then attention loss on top. The run fails if the attention
//! loss variant does not concentrate more attention mass on the garment
//! region than the baseline, since that separation is the whole point of the
//! auxiliary loss.

use std::path::Path;

use smf_core::data::io::read_pairing;
use smf_core::eval::{run_unpaired_eval, EvalReport};
use smf_core::flow::Trainer;

use super::{load_triplets, runtime, CliError, CmdResult};
use crate::config::RunConfig;

const VARIANTS: [(&str, bool, bool); 3] =
    [("baseline", false, false), ("ref-pos", true, false), ("ref-pos+attn", true, true)];

fn csv_row(name: &str, r: &EvalReport) -> String {
    format!(
        "{name},{},{},{},{},{},{},{},{}\n",
        r.ssim_mean,
        r.frechet,
        r.kind_accuracy,
        r.color_accuracy,
        r.pattern_accuracy,
        r.fit_accuracy,
        r.overall_accuracy,
        r.attention_mass_ratio_mean
    )
}

pub fn run(cfg: &RunConfig, out: &Path, threads: usize) -> CmdResult {
    let triplets = load_triplets(&cfg.dataset_path)?;
    let eval_set = load_triplets(&cfg.eval_path)?;
    let pairing = read_pairing(&cfg.pairing_path).map_err(runtime)?;

    let mut reports = Vec::new();
    for (name, ref_pos, attn) in VARIANTS {
        let mut variant = cfg.clone();
        variant.use_ref_pos_emb = ref_pos;
        variant.use_attn_loss = attn;

        let mut trainer =
            Trainer::new(variant.model_config(), variant.sampler_config(), variant.adam_config(), variant.seed)
                .map_err(runtime)?;
        trainer.threads = threads;
        for step in 0..variant.steps {
            let batch = super::train::batch_indices(triplets.len(), variant.batch_size, variant.seed, step)
                .into_iter()
                .map(|i| triplets[i].clone())
                .collect::<Vec<_>>();
            let report = trainer.train_step(&batch).map_err(runtime)?;
            if !report.total_loss.is_finite() {
                return Err(CliError::Runtime(format!(
                    "variant {name}: non-finite loss at step {}",
                    report.step
                )));
            }
        }
        let report = run_unpaired_eval(
            trainer.params(),
            trainer.model_config(),
            &eval_set,
            &pairing,
            &variant.sampler_config(),
        )
        .map_err(runtime)?;
        println!("{name}: trained {} steps, evaluated {} pairs", variant.steps, report.n_samples);
        reports.push((name, report));
    }

    let mut csv = String::from(
        "variant,ssim_mean,frechet,accuracy_kind,accuracy_color,accuracy_pattern,accuracy_fit,accuracy_overall,attention_mass_ratio_mean\n",
    );
    println!();
    println!(
        "{:<14} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "variant", "ssim", "frechet", "acc_all", "acc_fit", "attn_mass"
    );
    for (name, r) in &reports {
        csv.push_str(&csv_row(name, r));
        println!(
            "{name:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.ssim_mean, r.frechet, r.overall_accuracy, r.fit_accuracy, r.attention_mass_ratio_mean
        );
    }
    super::ensure_dir(out)?;
    super::write_text(&out.join("ablation.csv"), &csv)?;

    let baseline = reports[0].1.attention_mass_ratio_mean;
    let with_attn = reports[2].1.attention_mass_ratio_mean;
    if with_attn <= baseline {
        return Err(CliError::Runtime(format!(
            "attention loss did not separate: attention_mass_ratio_mean {with_attn} (ref-pos+attn) \
             vs {baseline} (baseline)"
        )));
    }
    Ok(())
}
