//! The conditional DiT velocity network: configuration, parameters, token
//! plumbing, transformer blocks, and checkpoints.

pub mod checkpoint;
pub mod dit;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::data::consts::{GRID_H, GRID_W, IMG_C, IMG_H, IMG_W, N_IMG_TOKENS, PATCH};
use crate::data::{prompt, Image};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dit::{
    assemble_sequence, dit_forward, e2e_grad_check, embed_pose, embed_text, embed_time,
    extract_attention_map, DitOutput, StreamOrder, TextTokens, TokenSequence,
};

/// Patch feature width: 4x4 pixels x 3 channels.
pub const PATCH_DIM: usize = PATCH * PATCH * IMG_C;
/// Sequence: 64 target + 64 person + 64 garment + 1 pose token.
pub const SEQ_LEN: usize = 3 * N_IMG_TOKENS + 1;
/// Sinusoidal time features: 8 frequency pairs.
pub const TIME_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
    /// Reference positional (segment) embeddings on top of the shared 2D
    /// grid embedding. Off reproduces the ablation baseline.
    pub use_ref_pos_emb: bool,
    /// Attention-guided auxiliary loss; consumed by the trainer.
    pub use_attn_loss: bool,
    /// Pose token conditioning.
    pub use_pose: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_h: IMG_H,
            img_w: IMG_W,
            patch: PATCH,
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            vocab_size: prompt::vocab_size(),
            max_prompt_len: 12,
            use_ref_pos_emb: true,
            use_attn_loss: true,
            use_pose: true,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference end-to-end checks.
    pub fn reduced() -> Self {
        ModelConfig { d_model: 8, n_blocks: 1, n_heads: 2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_h != IMG_H || self.img_w != IMG_W || self.patch != PATCH {
            return Err(Error::Config(format!(
                "geometry {}x{} patch {} does not match the renderer ({IMG_H}x{IMG_W} patch {PATCH})",
                self.img_h, self.img_w, self.patch
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        if self.vocab_size == 0 || self.vocab_size > u16::MAX as usize {
            return Err(Error::Config(format!("vocab size {} out of range", self.vocab_size)));
        }
        if self.max_prompt_len == 0 {
            return Err(Error::Config("max_prompt_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

enum Init {
    Normal,
    Zero,
    One,
}

/// (name, shape, init) for every parameter, in the fixed initialization
/// order. Weight matrices and embeddings draw from N(0, 0.02); biases start
/// at zero, layer-norm gains at one, and the output head entirely at zero so
/// the initial velocity field is zero.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
        ("patch_embed.w".into(), vec![PATCH_DIM, d], Init::Normal),
        ("patch_embed.b".into(), vec![d], Init::Zero),
        ("pos_emb".into(), vec![N_IMG_TOKENS, d], Init::Normal),
        ("segment_emb".into(), vec![3, d], Init::Normal),
        ("text.table".into(), vec![cfg.vocab_size, d], Init::Normal),
        ("text.w1".into(), vec![d, d], Init::Normal),
        ("text.b1".into(), vec![d], Init::Zero),
        ("text.w2".into(), vec![d, d], Init::Normal),
        ("text.b2".into(), vec![d], Init::Zero),
        ("time.w1".into(), vec![TIME_FEATURES, d], Init::Normal),
        ("time.b1".into(), vec![d], Init::Zero),
        ("time.w2".into(), vec![d, d], Init::Normal),
        ("time.b2".into(), vec![d], Init::Zero),
        ("pose.w".into(), vec![3, d], Init::Normal),
        ("pose.b".into(), vec![d], Init::Zero),
    ];
    for b in 0..cfg.n_blocks {
        let pre = format!("block{b}");
        specs.push((format!("{pre}.ln1.g"), vec![d], Init::One));
        specs.push((format!("{pre}.ln1.b"), vec![d], Init::Zero));
        for (w, bias) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            specs.push((format!("{pre}.attn.{w}"), vec![d, d], Init::Normal));
            specs.push((format!("{pre}.attn.{bias}"), vec![d], Init::Zero));
        }
        specs.push((format!("{pre}.ln2.g"), vec![d], Init::One));
        specs.push((format!("{pre}.ln2.b"), vec![d], Init::Zero));
        for (w, bias) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            specs.push((format!("{pre}.xattn.{w}"), vec![d, d], Init::Normal));
            specs.push((format!("{pre}.xattn.{bias}"), vec![d], Init::Zero));
        }
        specs.push((format!("{pre}.ln3.g"), vec![d], Init::One));
        specs.push((format!("{pre}.ln3.b"), vec![d], Init::Zero));
        specs.push((format!("{pre}.mlp.w1"), vec![d, 4 * d], Init::Normal));
        specs.push((format!("{pre}.mlp.b1"), vec![4 * d], Init::Zero));
        specs.push((format!("{pre}.mlp.w2"), vec![4 * d, d], Init::Normal));
        specs.push((format!("{pre}.mlp.b2"), vec![d], Init::Zero));
    }
    specs.push(("head.ln.g".into(), vec![d], Init::One));
    specs.push(("head.ln.b".into(), vec![d], Init::Zero));
    specs.push(("head.w".into(), vec![d, PATCH_DIM], Init::Zero));
    specs.push(("head.b".into(), vec![PATCH_DIM], Init::Zero));
    specs
}

/// Initialize parameters from a seed, in the documented fixed order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0x696e_6974, 0);
    let mut params = BTreeMap::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Normal => (0..n).map(|_| 0.02 * rng.sample::<f32, _>(StandardNormal)).collect(),
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Fetch a parameter by name, with a clear error when absent.
pub fn param<'a>(params: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::Config(format!("parameter {name:?} not found in model")))
}

/// Split an image into non-overlapping 4x4 patches, row-major over the patch
/// grid, each flattened as (y, x, channel).
pub fn patchify(img: &Image) -> Tensor {
    let mut data = Vec::with_capacity(N_IMG_TOKENS * PATCH_DIM);
    for gy in 0..GRID_H {
        for gx in 0..GRID_W {
            for py in 0..PATCH {
                for px in 0..PATCH {
                    let rgb = img.get(gx * PATCH + px, gy * PATCH + py);
                    data.extend_from_slice(&rgb);
                }
            }
        }
    }
    Tensor::new(vec![N_IMG_TOKENS, PATCH_DIM], data).expect("patch arithmetic is fixed")
}

/// Inverse of [`patchify`], producing raw pixel floats (unclamped).
pub fn unpatchify(tokens: &Tensor) -> Result<Vec<f32>> {
    if tokens.shape() != [N_IMG_TOKENS, PATCH_DIM] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: vec![N_IMG_TOKENS, PATCH_DIM],
        });
    }
    let mut out = vec![0.0f32; IMG_H * IMG_W * IMG_C];
    let data = tokens.data();
    for gy in 0..GRID_H {
        for gx in 0..GRID_W {
            let tok = (gy * GRID_W + gx) * PATCH_DIM;
            for py in 0..PATCH {
                for px in 0..PATCH {
                    let src = tok + (py * PATCH + px) * IMG_C;
                    let (x, y) = (gx * PATCH + px, gy * PATCH + py);
                    let dst = (y * IMG_W + x) * IMG_C;
                    out[dst..dst + 3].copy_from_slice(&data[src..src + 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Clamp raw pixel floats into a displayable image.
pub fn pixels_to_image(pixels: &[f32]) -> Result<Image> {
    Image::from_vec(pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_triplet;

    #[test]
    fn patchify_shapes_and_inverse() {
        let t = make_triplet(1);
        let tokens = patchify(&t.person);
        assert_eq!(tokens.shape(), &[64, 48]);
        let back = unpatchify(&tokens).unwrap();
        assert_eq!(back, t.person.data());
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let img = Image::filled([0.3, 0.6, 0.9]);
        let tokens = patchify(&img);
        let first = &tokens.data()[..PATCH_DIM];
        for tok in tokens.data().chunks(PATCH_DIM) {
            assert_eq!(tok, first);
        }
    }

    #[test]
    fn init_is_deterministic_and_head_is_zero() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for (name, t) in &a {
            assert_eq!(t.data(), b[name].data(), "{name}");
            assert!(t.data().iter().all(|v| v.is_finite()), "{name}");
        }
        assert!(a["head.w"].data().iter().all(|&v| v == 0.0));
        assert!(a["head.b"].data().iter().all(|&v| v == 0.0));
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(a["patch_embed.w"].data(), c["patch_embed.w"].data());
    }

    #[test]
    fn config_validation_rejects_bad_heads() {
        let cfg = ModelConfig { n_heads: 5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { d_model: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layer_norm_gains_initialize_to_one() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, 3).unwrap();
        assert!(p["block0.ln1.g"].data().iter().all(|&v| v == 1.0));
        assert!(p["head.ln.b"].data().iter().all(|&v| v == 0.0));
    }
}
