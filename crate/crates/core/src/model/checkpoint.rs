//! SMFC checkpoint files.
//!
//! Layout, little-endian:
//!   magic "SMFC" | version u32 | config (8 x u32 + flags byte) | step u64 |
//!   tensor count u32 | entries...
//! Each entry:
//!   name u16 length + UTF-8 bytes | rank u32 | dims u32 each | f32 payload
//! Entries are written in sorted-name order and payloads are raw bit
//! patterns, so save/load round-trips are bit-exact and repeated saves of the
//! same state produce identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::io::{fmt_err, read_exactly, read_u16, read_u32, read_u64};
use crate::error::{Error, Result};

use super::ModelConfig;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SMFC";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume: configuration, optimizer step count, and all
/// named tensors (parameters plus any optimizer slots, e.g. `adam.m/NAME`).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

fn write_config(w: &mut impl Write, cfg: &ModelConfig) -> std::io::Result<()> {
    for v in [
        cfg.img_h, cfg.img_w, cfg.patch, cfg.d_model, cfg.n_blocks, cfg.n_heads, cfg.vocab_size,
        cfg.max_prompt_len,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let flags = (cfg.use_ref_pos_emb as u8) | (cfg.use_attn_loss as u8) << 1 | (cfg.use_pose as u8) << 2;
    w.write_all(&[flags])
}

fn read_config(r: &mut impl Read, path: &Path) -> Result<ModelConfig> {
    let mut fields = [0u32; 8];
    for f in &mut fields {
        *f = read_u32(r, path, "config")?;
    }
    let mut flags = [0u8; 1];
    read_exactly(r, &mut flags, path, "config flags")?;
    if flags[0] > 0b111 {
        return Err(fmt_err(path, format!("unknown config flag bits {:#x}", flags[0])));
    }
    let cfg = ModelConfig {
        img_h: fields[0] as usize,
        img_w: fields[1] as usize,
        patch: fields[2] as usize,
        d_model: fields[3] as usize,
        n_blocks: fields[4] as usize,
        n_heads: fields[5] as usize,
        vocab_size: fields[6] as usize,
        max_prompt_len: fields[7] as usize,
        use_ref_pos_emb: flags[0] & 1 != 0,
        use_attn_loss: flags[0] & 2 != 0,
        use_pose: flags[0] & 4 != 0,
    };
    cfg.validate().map_err(|e| fmt_err(path, e.to_string()))?;
    Ok(cfg)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.config.validate()?;
    for name in ckpt.tensors.keys() {
        if name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("tensor name too long: {name:.32}...")));
        }
    }
    let inner = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_config(&mut w, &ckpt.config)?;
        w.write_all(&ckpt.step.to_le_bytes())?;
        w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
        // BTreeMap iteration is already sorted by name.
        for (name, tensor) in &ckpt.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    inner().map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exactly(&mut r, &mut magic, path, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, "not an SMFC checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(path, format!("unsupported checkpoint version {version}")));
    }
    let config = read_config(&mut r, path)?;
    let step = read_u64(&mut r, path, "step")?;
    let count = read_u32(&mut r, path, "tensor count")? as usize;

    let mut tensors = BTreeMap::new();
    let mut prev_name: Option<String> = None;
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = read_u16(&mut r, path, &what)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exactly(&mut r, &mut name_bytes, path, &what)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fmt_err(path, format!("{what}: name is not UTF-8")))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(fmt_err(path, format!("{what}: names out of order ({prev:?} before {name:?})")));
            }
        }
        let rank = read_u32(&mut r, path, &what)? as usize;
        if rank > 4 {
            return Err(fmt_err(path, format!("{what}: rank {rank} is not plausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path, &what)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exactly(&mut r, &mut bytes, path, &what)?;
        let data: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| fmt_err(path, format!("{what}: {e}")))?;
        tensors.insert(name.clone(), tensor);
        prev_name = Some(name);
    }
    Ok(Checkpoint { config, step, tensors })
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("smf-ckpt-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn sample_checkpoint() -> Checkpoint {
        let config = ModelConfig::reduced();
        let tensors = init_params(&config, 77).unwrap();
        Checkpoint { config, step: 42, tensors }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tmpdir("rt");
        let path = dir.join("model.smfc");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.step, 42);
        assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for (name, tensor) in &ckpt.tensors {
            let loaded = &back.tensors[name];
            assert_eq!(loaded.shape(), tensor.shape());
            let same_bits = loaded
                .data()
                .iter()
                .zip(tensor.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same_bits, "{name} changed across the roundtrip");
        }
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let dir = tmpdir("stable");
        let ckpt = sample_checkpoint();
        let a = dir.join("a.smfc");
        let b = dir.join("b.smfc");
        save_checkpoint(&a, &ckpt).unwrap();
        save_checkpoint(&b, &ckpt).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn save_load_save_produces_identical_bytes() {
        let dir = tmpdir("sls");
        let a = dir.join("a.smfc");
        let b = dir.join("b.smfc");
        save_checkpoint(&a, &sample_checkpoint()).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tmpdir("magic");
        let path = dir.join("junk.smfc");
        std::fs::write(&path, b"WHAT11112222").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let good = dir.join("good.smfc");
        save_checkpoint(&good, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tmpdir("trunc");
        let path = dir.join("cut.smfc");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn out_of_order_names_are_rejected() {
        // Swap two entry blobs by hand to simulate a corrupted writer.
        let dir = tmpdir("order");
        let path = dir.join("swap.smfc");
        let mut ckpt = sample_checkpoint();
        ckpt.tensors = ckpt.tensors.into_iter().take(2).collect();
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let names: Vec<&String> = ckpt.tensors.keys().collect();
        let entry = |name: &str| {
            let numel: usize = ckpt.tensors[name].shape().iter().product();
            let rank = ckpt.tensors[name].shape().len();
            2 + name.len() + 4 + 4 * rank + 4 * numel
        };
        let header = bytes.len() - entry(names[0]) - entry(names[1]);
        let mut swapped = bytes[..header].to_vec();
        swapped.extend_from_slice(&bytes[header + entry(names[0])..]);
        swapped.extend_from_slice(&bytes[header..header + entry(names[0])]);
        std::fs::write(&path, &swapped).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("out of order"), "{err}");
    }
}
