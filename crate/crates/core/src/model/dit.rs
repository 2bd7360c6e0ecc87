//! Token embedding, sequence assembly, transformer blocks, and attention-map
//! extraction.
//!
//! One fused sequence [target | slot 1 | slot 2 | pose] flows through L
//! pre-norm blocks of self-attention, text cross-attention, and an MLP. Slot
//! 1 hosts the person stream and slot 2 the garment stream in normal use;
//! segment embeddings attach to slots, which is exactly what makes the
//! reference-positional-embedding ablation observable by swapping streams.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor};
use crate::data::consts::N_IMG_TOKENS;
use crate::data::{prompt, PoseSpec};
use crate::error::{Error, Result};

use super::{param, ModelConfig, PATCH_DIM, SEQ_LEN, TIME_FEATURES};

/// Additive logit for masked (padding) text keys.
const PAD_LOGIT_BIAS: f32 = -1e9;

/// Projected text tokens plus the additive key bias that masks padding.
pub struct TextTokens {
    pub tokens: Tensor,
    pub pad_bias: Tensor,
}

/// Which reference stream occupies slot 1. Production code uses
/// [`StreamOrder::PersonGarment`]; the swapped order exists to test the
/// segment-embedding symmetry break.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamOrder {
    PersonGarment,
    GarmentPerson,
}

/// Assembled model input: fused tokens and where the garment tokens sit.
pub struct TokenSequence {
    pub tokens: Tensor,
    pub garment_start: usize,
}

/// Velocity tokens for the target stream plus per-block attention maps
/// (each a length-64 patch-grid vector, on-tape when training).
#[derive(Debug)]
pub struct DitOutput {
    pub velocity: Tensor,
    pub attention: Vec<Tensor>,
}

fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = tape.matmul(x, w)?;
    tape.bias_add(&y, b)
}

fn ones(rows: usize) -> Tensor {
    Tensor::new(vec![rows, 1], vec![1.0; rows]).expect("shape matches data")
}

/// Broadcast a (1, d) row to (rows, d) via an outer product with ones.
fn broadcast_row(tape: &mut Tape, row: &Tensor, rows: usize) -> Result<Tensor> {
    tape.matmul(&ones(rows), row)
}

fn check_finite(x: &Tensor, context: &str) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context.to_string() })
    }
}

/// Embed prompt ids: table lookup, then a per-position 2-layer MLP. Short
/// prompts are padded to `max_prompt_len`; pad positions get a large negative
/// key bias so cross-attention ignores them.
pub fn embed_text(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    ids: &[u16],
) -> Result<TextTokens> {
    if ids.len() > cfg.max_prompt_len {
        return Err(Error::Config(format!(
            "prompt has {} tokens, max {}",
            ids.len(),
            cfg.max_prompt_len
        )));
    }
    let mut padded = ids.to_vec();
    padded.resize(cfg.max_prompt_len, prompt::PAD_ID);
    let emb = tape.embedding(param(params, "text.table")?, &padded)?;
    let h = linear(tape, &emb, param(params, "text.w1")?, param(params, "text.b1")?)?;
    let h = tape.gelu(&h)?;
    let tokens = linear(tape, &h, param(params, "text.w2")?, param(params, "text.b2")?)?;
    let bias: Vec<f32> = (0..cfg.max_prompt_len)
        .map(|i| if i < ids.len() { 0.0 } else { PAD_LOGIT_BIAS })
        .collect();
    let pad_bias = Tensor::new(vec![cfg.max_prompt_len], bias)?;
    Ok(TextTokens { tokens, pad_bias })
}

/// Sinusoidal features for flow time t: 8 log-spaced frequency pairs
/// (sin, cos) at frequencies pi * 2^i for i = 0..8.
pub fn time_features(t: f32) -> [f32; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    for i in 0..TIME_FEATURES / 2 {
        let omega = std::f32::consts::PI * (1u32 << i) as f32;
        f[2 * i] = (omega * t).sin();
        f[2 * i + 1] = (omega * t).cos();
    }
    f
}

/// Embed flow time through the sinusoidal features and a 2-layer MLP,
/// yielding a (1, d_model) row added to every token.
pub fn embed_time(tape: &mut Tape, params: &BTreeMap<String, Tensor>, t: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidOp { op: "embed_time", msg: format!("t = {t} outside [0,1]") });
    }
    let feats = Tensor::new(vec![1, TIME_FEATURES], time_features(t).to_vec())?;
    let h = linear(tape, &feats, param(params, "time.w1")?, param(params, "time.b1")?)?;
    let h = tape.gelu(&h)?;
    linear(tape, &h, param(params, "time.w2")?, param(params, "time.b2")?)
}

/// Project the three pose angles to a single (1, d_model) token.
pub fn embed_pose(tape: &mut Tape, params: &BTreeMap<String, Tensor>, pose: &PoseSpec) -> Result<Tensor> {
    let p = Tensor::new(vec![1, 3], pose.to_array().to_vec())?;
    linear(tape, &p, param(params, "pose.w")?, param(params, "pose.b")?)
}

/// Project raw patch tokens of one image stream and add the shared 2D
/// positional embedding.
fn embed_image_stream(tape: &mut Tape, params: &BTreeMap<String, Tensor>, raw: &Tensor) -> Result<Tensor> {
    let projected = linear(tape, raw, param(params, "patch_embed.w")?, param(params, "patch_embed.b")?)?;
    tape.add(&projected, param(params, "pos_emb")?)
}

fn add_segment(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    stream: &Tensor,
    slot: usize,
) -> Result<Tensor> {
    let seg = tape.slice(param(params, "segment_emb")?, 0, slot, 1)?;
    let seg = broadcast_row(tape, &seg, N_IMG_TOKENS)?;
    tape.add(stream, &seg)
}

/// Fuse target, reference, and pose tokens into the model sequence.
///
/// All image tokens share the patch projection and 2D positional embedding.
/// With `use_ref_pos_emb` on, each slot also receives its learned segment
/// embedding (slot-keyed, so swapping the reference order changes the
/// computation); with the flag off the slots are anonymous.
pub fn assemble_sequence(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    target_raw: &Tensor,
    person_raw: &Tensor,
    garment_raw: &Tensor,
    pose: &PoseSpec,
    order: StreamOrder,
) -> Result<TokenSequence> {
    let mut target = embed_image_stream(tape, params, target_raw)?;
    let person = embed_image_stream(tape, params, person_raw)?;
    let garment = embed_image_stream(tape, params, garment_raw)?;

    let (mut slot1, mut slot2, garment_start) = match order {
        StreamOrder::PersonGarment => (person, garment, 2 * N_IMG_TOKENS),
        StreamOrder::GarmentPerson => (garment, person, N_IMG_TOKENS),
    };
    if cfg.use_ref_pos_emb {
        target = add_segment(tape, params, &target, 0)?;
        slot1 = add_segment(tape, params, &slot1, 1)?;
        slot2 = add_segment(tape, params, &slot2, 2)?;
    }
    let pose_token = if cfg.use_pose {
        embed_pose(tape, params, pose)?
    } else {
        Tensor::zeros(vec![1, cfg.d_model])
    };
    let tokens = tape.concat(&[&target, &slot1, &slot2, &pose_token], 0)?;
    Ok(TokenSequence { tokens, garment_start })
}

/// Multi-head attention: queries from `xq`, keys/values from `xkv`, weights
/// under `prefix`. Returns the output tokens and each head's attention grid.
fn attention(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    prefix: &str,
    n_heads: usize,
    xq: &Tensor,
    xkv: &Tensor,
    key_bias: Option<&Tensor>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let q = linear(tape, xq, param(params, &format!("{prefix}.wq"))?, param(params, &format!("{prefix}.bq"))?)?;
    let k = linear(tape, xkv, param(params, &format!("{prefix}.wk"))?, param(params, &format!("{prefix}.bk"))?)?;
    let v = linear(tape, xkv, param(params, &format!("{prefix}.wv"))?, param(params, &format!("{prefix}.bv"))?)?;

    let d = q.shape()[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(&q, 1, h * dh, dh)?;
        let kh = tape.slice(&k, 1, h * dh, dh)?;
        let vh = tape.slice(&v, 1, h * dh, dh)?;
        let kt = tape.transpose(&kh)?;
        let mut scores = tape.matmul(&qh, &kt)?;
        scores = tape.scale(&scores, scale)?;
        if let Some(bias) = key_bias {
            scores = tape.bias_add(&scores, bias)?;
        }
        let attn = tape.softmax(&scores)?;
        outs.push(tape.matmul(&attn, &vh)?);
        weights.push(attn);
    }
    let heads: Vec<&Tensor> = outs.iter().collect();
    let merged = tape.concat(&heads, 1)?;
    let out = linear(
        tape,
        &merged,
        param(params, &format!("{prefix}.wo"))?,
        param(params, &format!("{prefix}.bo"))?,
    )?;
    Ok((out, weights))
}

/// Reduce one block's self-attention weights to the patch-grid map A_l:
/// for each target-query row, the head-averaged total softmax mass on the
/// garment keys. Returns a length-64 vector in patch row-major order.
pub fn extract_attention_map(
    tape: &mut Tape,
    head_weights: &[Tensor],
    garment_start: usize,
) -> Result<Tensor> {
    if head_weights.is_empty() {
        return Err(Error::InvalidOp { op: "extract_attention_map", msg: "no attention heads".into() });
    }
    let key_ones = Tensor::new(vec![N_IMG_TOKENS, 1], vec![1.0; N_IMG_TOKENS])?;
    let mut acc: Option<Tensor> = None;
    for w in head_weights {
        let target_rows = tape.slice(w, 0, 0, N_IMG_TOKENS)?;
        let garment_cols = tape.slice(&target_rows, 1, garment_start, N_IMG_TOKENS)?;
        let sums = tape.matmul(&garment_cols, &key_ones)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &sums)?,
            None => sums,
        });
    }
    let mean = tape.scale(&acc.unwrap(), 1.0 / head_weights.len() as f32)?;
    tape.reshape(&mean, vec![N_IMG_TOKENS])
}

/// Run the DiT velocity network.
///
/// Per block: pre-norm self-attention over the fused sequence (time embedding
/// added to every token before block 0), pre-norm cross-attention into the
/// text tokens, pre-norm 4x MLP, each with a residual connection. The output
/// head layer-norms the target rows and maps them to patch velocity.
pub fn dit_forward(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    seq: &TokenSequence,
    text: &TextTokens,
    t: f32,
) -> Result<DitOutput> {
    let te = embed_time(tape, params, t)?;
    let te_rows = broadcast_row(tape, &te, SEQ_LEN)?;
    let mut x = tape.add(&seq.tokens, &te_rows)?;

    let mut attention_maps = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let pre = format!("block{b}");
        let h = tape.layer_norm(&x, param(params, &format!("{pre}.ln1.g"))?, param(params, &format!("{pre}.ln1.b"))?)?;
        let (sa, head_weights) =
            attention(tape, params, &format!("{pre}.attn"), cfg.n_heads, &h, &h, None)?;
        x = tape.add(&x, &sa)?;
        attention_maps.push(extract_attention_map(tape, &head_weights, seq.garment_start)?);

        let h = tape.layer_norm(&x, param(params, &format!("{pre}.ln2.g"))?, param(params, &format!("{pre}.ln2.b"))?)?;
        let (ca, _) = attention(
            tape,
            params,
            &format!("{pre}.xattn"),
            cfg.n_heads,
            &h,
            &text.tokens,
            Some(&text.pad_bias),
        )?;
        x = tape.add(&x, &ca)?;

        let h = tape.layer_norm(&x, param(params, &format!("{pre}.ln3.g"))?, param(params, &format!("{pre}.ln3.b"))?)?;
        let m = linear(tape, &h, param(params, &format!("{pre}.mlp.w1"))?, param(params, &format!("{pre}.mlp.b1"))?)?;
        let m = tape.gelu(&m)?;
        let m = linear(tape, &m, param(params, &format!("{pre}.mlp.w2"))?, param(params, &format!("{pre}.mlp.b2"))?)?;
        x = tape.add(&x, &m)?;

        check_finite(&x, &format!("block {b}"))?;
    }

    let target_rows = tape.slice(&x, 0, 0, N_IMG_TOKENS)?;
    let h = tape.layer_norm(&target_rows, param(params, "head.ln.g")?, param(params, "head.ln.b")?)?;
    let velocity = linear(tape, &h, param(params, "head.w")?, param(params, "head.b")?)?;
    check_finite(&velocity, "output head")?;
    Ok(DitOutput { velocity, attention: attention_maps })
}

/// End-to-end gradient check of the full training loss (flow-matching MSE
/// plus the attention regularizer, lambda = 0.1) at the reduced
/// configuration, with every parameter as a leaf. The output head is
/// re-randomized because the zero-initialized head would block gradient flow
/// to everything upstream of it. `corrupt` scales the analytic gradient of
/// the first parameter for the harness self-test.
pub fn e2e_grad_check(corrupt: Option<f32>) -> Result<crate::autodiff::GradCheckReport> {
    let cfg = ModelConfig::reduced();
    let mut params = super::init_params(&cfg, 31)?;
    let mut rng = crate::rng::rng_for(31, 0xe2e, 0);
    let head = Tensor::randn(vec![cfg.d_model, PATCH_DIM], &mut rng);
    params.insert(
        "head.w".to_string(),
        Tensor::new(head.shape().to_vec(), head.data().iter().map(|v| v * 0.02).collect())?,
    );
    let trip = crate::data::make_triplet(55);
    let xt = Tensor::randn(vec![N_IMG_TOKENS, PATCH_DIM], &mut rng);
    let target = Tensor::randn(vec![N_IMG_TOKENS, PATCH_DIM], &mut rng);
    let mask: Vec<f32> = trip.mask().iter().map(|&c| c as f32).collect();
    let mask_t = Tensor::new(vec![N_IMG_TOKENS], mask)?;
    let person_raw = super::patchify(&trip.person);
    let garment_raw = super::patchify(&trip.garment);

    // Leaf 0 is the corruption target for the self-test, so it must be a
    // parameter with a structurally nonzero gradient. Sorted order would put
    // a key-projection bias first, and those have exactly zero gradient
    // (shifting every key logit in a row leaves the softmax unchanged).
    let mut names: Vec<String> = vec!["patch_embed.w".to_string()];
    names.extend(params.keys().filter(|n| *n != "patch_embed.w").cloned());
    let values: Vec<Tensor> = names.iter().map(|n| params[n].clone()).collect();
    crate::autodiff::check::grad_check_values("model-e2e", &values, corrupt, |tape, leaves| {
        let p: BTreeMap<String, Tensor> =
            names.iter().cloned().zip(leaves.iter().cloned()).collect();
        let seq = assemble_sequence(
            tape,
            &p,
            &cfg,
            &xt,
            &person_raw,
            &garment_raw,
            &trip.pose,
            StreamOrder::PersonGarment,
        )?;
        let text = embed_text(tape, &p, &cfg, &trip.prompt)?;
        let out = dit_forward(tape, &p, &cfg, &seq, &text, 0.5)?;
        let fm = tape.mse(&out.velocity, &target)?;
        let mut acc: Option<Tensor> = None;
        for map in &out.attention {
            let inside = tape.mul(map, &mask_t)?;
            let mass = tape.sum(&inside)?;
            acc = Some(match acc {
                Some(prev) => tape.add(&prev, &mass)?,
                None => mass,
            });
        }
        let attn = tape.scale(&acc.expect("n_blocks >= 1"), -1.0 / cfg.n_blocks as f32)?;
        let weighted = tape.scale(&attn, 0.1)?;
        tape.add(&fm, &weighted)
    })
}
