//! One module per subcommand plus the plumbing they share.

pub mod ablate;
pub mod datagen;
pub mod eval;
pub mod gradcheck;
pub mod sample;
pub mod train;

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use smf_core::data::consts::{IMG_H, IMG_W};
use smf_core::data::io::read_dataset;
use smf_core::data::{Image, Triplet};

/// Command failures split by exit code: usage errors (bad flags, bad config,
/// out-of-range indices, unknown prompt words) exit 1, runtime errors
/// (I/O, numerical aborts) exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

pub type CmdResult = std::result::Result<(), CliError>;

pub fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Worker-thread count from `SMF_THREADS`; unset means single-threaded.
/// Results do not depend on this value, only wall time does.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("SMF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("SMF_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>, CliError> {
    read_dataset(path).map_err(runtime)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Write several images side by side as one binary PPM, quantized exactly
/// like the single-image writer so grids and samples agree byte for byte.
pub fn write_ppm_row(path: &Path, images: &[&Image]) -> Result<(), CliError> {
    let inner = |mut w: BufWriter<File>| -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", IMG_W * images.len(), IMG_H)?;
        for y in 0..IMG_H {
            for img in images {
                for x in 0..IMG_W {
                    let px = img.get(x, y).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    w.write_all(&px)?;
                }
            }
        }
        w.flush()
    };
    let file = File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    inner(BufWriter::new(file)).map_err(|e| runtime(format!("{}: {e}", path.display())))
}
