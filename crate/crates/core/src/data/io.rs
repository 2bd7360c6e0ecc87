//! Dataset, pairing-list, and image file formats.
//!
//! SMFD dataset, little-endian throughout:
//!   magic "SMFD" | version u32 | record count u32 | records...
//! Each record:
//!   source spec u16 (packed) | target spec u16 | identity seed u64 |
//!   pose 3xf32 | prompt u16 length + u16 ids |
//!   person, garment, target: u32 byte length + f32 pixels |
//!   mask: u32 byte length + one byte per patch cell (0/1)
//!
//! SMFP pairing list:
//!   magic "SMFP" | version u32 | seed u64 | pair count u32 |
//!   (person index u32, encoded garment ref u32) per pair
//! Garment refs with the high bit set carry a packed GarmentSpec in the low
//! bits (the fallback for datasets too small to donate a garment).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::consts::{GRID_H, GRID_W, IMG_C, IMG_H, IMG_W};
use super::prompt;
use super::{GarmentSpec, Image, PairingList, PoseSpec, Triplet};

const DATASET_MAGIC: &[u8; 4] = b"SMFD";
const PAIRING_MAGIC: &[u8; 4] = b"SMFP";
const FORMAT_VERSION: u32 = 1;
const IMAGE_BYTES: usize = IMG_H * IMG_W * IMG_C * 4;
const MASK_BYTES: usize = GRID_H * GRID_W;

pub(crate) fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

pub(crate) fn read_exactly(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| fmt_err(path, format!("truncated while reading {what}")))
}

pub(crate) fn read_u16(r: &mut impl Read, path: &Path, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exactly(r, &mut b, path, what)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exactly(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exactly(r, &mut b, path, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, path: &Path, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exactly(r, &mut b, path, what)?;
    Ok(f32::from_le_bytes(b))
}

fn write_image(w: &mut impl Write, img: &Image) -> std::io::Result<()> {
    w.write_all(&(IMAGE_BYTES as u32).to_le_bytes())?;
    for v in img.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_image(r: &mut impl Read, path: &Path, what: &str) -> Result<Image> {
    let len = read_u32(r, path, what)? as usize;
    if len != IMAGE_BYTES {
        return Err(fmt_err(path, format!("{what}: image payload is {len} bytes, expected {IMAGE_BYTES}")));
    }
    let mut bytes = vec![0u8; len];
    read_exactly(r, &mut bytes, path, what)?;
    let mut data = Vec::with_capacity(len / 4);
    for c in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(fmt_err(path, format!("{what}: pixel value {v} outside [0,1]")));
        }
        data.push(v);
    }
    Image::from_vec(data).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn write_dataset(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let inner = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(triplets.len() as u32).to_le_bytes())?;
        for t in triplets {
            w.write_all(&t.source_spec.pack().to_le_bytes())?;
            w.write_all(&t.target_spec.pack().to_le_bytes())?;
            w.write_all(&t.identity_seed.to_le_bytes())?;
            for v in t.pose.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(t.prompt.len() as u16).to_le_bytes())?;
            for id in &t.prompt {
                w.write_all(&id.to_le_bytes())?;
            }
            write_image(&mut w, &t.person)?;
            write_image(&mut w, &t.garment)?;
            write_image(&mut w, &t.target)?;
            w.write_all(&(MASK_BYTES as u32).to_le_bytes())?;
            w.write_all(t.mask_raw())?;
        }
        w.flush()
    };
    inner().map_err(Error::io(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Triplet>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exactly(&mut r, &mut magic, path, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(fmt_err(path, "not an SMFD dataset (bad magic)"));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(path, format!("unsupported dataset version {version}")));
    }
    let count = read_u32(&mut r, path, "record count")? as usize;

    let mut triplets = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("record {i}");
        let source_spec = GarmentSpec::unpack(read_u16(&mut r, path, &what)?)
            .map_err(|e| fmt_err(path, format!("{what}: {e}")))?;
        let target_spec = GarmentSpec::unpack(read_u16(&mut r, path, &what)?)
            .map_err(|e| fmt_err(path, format!("{what}: {e}")))?;
        let identity_seed = read_u64(&mut r, path, &what)?;
        let pose = PoseSpec {
            left_arm_angle: read_f32(&mut r, path, &what)?,
            right_arm_angle: read_f32(&mut r, path, &what)?,
            leg_spread: read_f32(&mut r, path, &what)?,
        };
        pose.validate().map_err(|e| fmt_err(path, format!("{what}: {e}")))?;
        let prompt_len = read_u16(&mut r, path, &what)? as usize;
        let mut prompt = Vec::with_capacity(prompt_len);
        for _ in 0..prompt_len {
            let id = read_u16(&mut r, path, &what)?;
            if id as usize >= prompt::vocab_size() {
                return Err(fmt_err(path, format!("{what}: prompt id {id} out of vocabulary")));
            }
            prompt.push(id);
        }
        let person = read_image(&mut r, path, &what)?;
        let garment = read_image(&mut r, path, &what)?;
        let target = read_image(&mut r, path, &what)?;
        let mask_len = read_u32(&mut r, path, &what)? as usize;
        if mask_len != MASK_BYTES {
            return Err(fmt_err(path, format!("{what}: mask is {mask_len} bytes, expected {MASK_BYTES}")));
        }
        let mut mask = vec![0u8; mask_len];
        read_exactly(&mut r, &mut mask, path, &what)?;
        if !mask.iter().all(|&c| c <= 1) {
            return Err(fmt_err(path, format!("{what}: mask cells must be 0 or 1")));
        }
        triplets.push(Triplet::from_parts(
            person,
            garment,
            target,
            mask,
            prompt,
            pose,
            source_spec,
            target_spec,
            identity_seed,
        ));
    }
    Ok(triplets)
}

pub fn write_pairing(path: &Path, list: &PairingList) -> Result<()> {
    let inner = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(PAIRING_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&list.seed.to_le_bytes())?;
        w.write_all(&(list.pairs.len() as u32).to_le_bytes())?;
        for &(p, g) in &list.pairs {
            w.write_all(&p.to_le_bytes())?;
            w.write_all(&g.to_le_bytes())?;
        }
        w.flush()
    };
    inner().map_err(Error::io(path))
}

pub fn read_pairing(path: &Path) -> Result<PairingList> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exactly(&mut r, &mut magic, path, "magic")?;
    if &magic != PAIRING_MAGIC {
        return Err(fmt_err(path, "not an SMFP pairing list (bad magic)"));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(path, format!("unsupported pairing version {version}")));
    }
    let seed = read_u64(&mut r, path, "seed")?;
    let count = read_u32(&mut r, path, "pair count")? as usize;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("pair {i}");
        let p = read_u32(&mut r, path, &what)?;
        let g = read_u32(&mut r, path, &what)?;
        pairs.push((p, g));
    }
    Ok(PairingList { seed, pairs })
}

/// Write a binary PPM (P6) view of an image, for eyeballing outputs.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let inner = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{IMG_W} {IMG_H}\n255\n")?;
        for v in img.data() {
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            w.write_all(&[byte])?;
        }
        w.flush()
    };
    inner().map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::super::{build_pairing_list, build_triplets};
    use super::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("smf-io-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = tmpdir("ds");
        let path = dir.join("toy.smfd");
        let triplets = build_triplets(3, 41);
        write_dataset(&path, &triplets).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, triplets);
        // Writing the same data twice yields byte-identical files.
        let path2 = dir.join("toy2.smfd");
        write_dataset(&path2, &triplets).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_a_format_error_with_path() {
        let dir = tmpdir("magic");
        let path = dir.join("junk.smfd");
        std::fs::write(&path, b"NOPE0000").unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("junk.smfd"), "{err}");
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let dir = tmpdir("trunc");
        let path = dir.join("cut.smfd");
        let triplets = build_triplets(2, 5);
        write_dataset(&path, &triplets).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn pairing_roundtrip_and_byte_stability() {
        let dir = tmpdir("pair");
        let triplets = build_triplets(6, 11);
        let list = build_pairing_list(&triplets, 1234);
        let path = dir.join("a.smfp");
        write_pairing(&path, &list).unwrap();
        assert_eq!(read_pairing(&path).unwrap(), list);
        let path2 = dir.join("b.smfp");
        write_pairing(&path2, &build_pairing_list(&triplets, 1234)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn ppm_has_expected_header_and_size() {
        let dir = tmpdir("ppm");
        let path = dir.join("img.ppm");
        let t = build_triplets(1, 9).remove(0);
        write_ppm(&path, &t.person).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + IMG_H * IMG_W * 3);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = read_dataset(Path::new("/nonexistent/nowhere.smfd")).unwrap_err().to_string();
        assert!(err.contains("nowhere.smfd"), "{err}");
    }
}
