//! `smf datagen`: produce the training set, the held-out eval set, and the
//! unpaired evaluation pairing list, then print attribute tallies.

use std::path::Path;

use smf_core::data::consts::COLOR_WORDS;
use smf_core::data::io::write_pairing;
use smf_core::data::{build_dataset, build_pairing_list, Fit, GarmentKind, Pattern, Triplet};

use super::{runtime, CmdResult};
use crate::config::RunConfig;

pub fn run(cfg: &RunConfig) -> CmdResult {
    for path in [&cfg.dataset_path, &cfg.eval_path, &cfg.pairing_path] {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
            }
        }
    }

    let train = build_dataset(cfg.n_train, cfg.data_seed, &cfg.dataset_path).map_err(runtime)?;
    let eval = build_dataset(cfg.n_eval, cfg.eval_seed, &cfg.eval_path).map_err(runtime)?;
    let pairing = build_pairing_list(&eval, cfg.pairing_seed);
    write_pairing(&cfg.pairing_path, &pairing).map_err(runtime)?;

    print_summary("train", &train, &cfg.dataset_path);
    print_summary("eval", &eval, &cfg.eval_path);
    println!("pairing: {} pairs (seed {}) -> {}", pairing.pairs.len(), pairing.seed, cfg.pairing_path.display());
    Ok(())
}

/// Tally the target garment attributes so a skewed seed is visible at a
/// glance.
fn print_summary(label: &str, triplets: &[Triplet], path: &Path) {
    let mut kinds = [0usize; 3];
    let mut colors = [0usize; COLOR_WORDS.len()];
    let mut striped = 0usize;
    let mut tucked = 0usize;
    for t in triplets {
        kinds[t.target_spec.kind.as_u8() as usize] += 1;
        colors[t.target_spec.color_index as usize] += 1;
        striped += (t.target_spec.pattern == Pattern::Stripes) as usize;
        tucked += (t.target_spec.fit == Fit::Tucked) as usize;
    }
    let n = triplets.len();
    println!("{label}: {n} triplets -> {}", path.display());
    println!(
        "  kind: tshirt {} / longsleeve {} / dress {}",
        kinds[GarmentKind::Tshirt.as_u8() as usize],
        kinds[GarmentKind::Longsleeve.as_u8() as usize],
        kinds[GarmentKind::Dress.as_u8() as usize],
    );
    let color_list =
        COLOR_WORDS.iter().zip(colors).map(|(w, c)| format!("{w} {c}")).collect::<Vec<_>>().join(" / ");
    println!("  color: {color_list}");
    println!("  pattern: solid {} / striped {striped}", n - striped);
    println!("  fit: regular {} / tucked {tucked}", n - tucked);
}
