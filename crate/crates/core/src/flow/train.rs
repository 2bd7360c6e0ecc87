//! The training step: per-triplet loss graphs, order-deterministic batch
//! reduction, the Adam update, and checkpoint round-tripping of trainer state.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::adam::AdamConfig;
use crate::autodiff::{AdamState, Tape, Tensor};
use crate::data::consts::N_IMG_TOKENS;
use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::model::{
    assemble_sequence, dit_forward, embed_text, init_params, patchify, Checkpoint, ModelConfig,
    StreamOrder, PATCH_DIM,
};

use super::{fm_target, interpolate, SamplerConfig};

/// Stream salt for per-triplet (t, z) draws.
pub(crate) const TRAIN_SALT: u64 = 0x7665_6c6f;

/// Seeds pack (step, triplet index) into one stream id as step << 16 | index.
const MAX_BATCH: usize = 1 << 16;

/// Checkpoint key prefixes for the optimizer moment buffers.
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

/// Per-step diagnostics: batch-mean losses and the L2 norm of the averaged
/// gradient. `step` counts completed optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStepReport {
    pub step: u64,
    pub fm_loss: f32,
    pub attn_loss: f32,
    pub total_loss: f32,
    pub grad_norm: f32,
}

struct PassResult {
    grads: BTreeMap<String, Vec<f32>>,
    fm: f64,
    attn: f64,
    total: f64,
}

/// Owns parameters, optimizer state, and the training configuration.
pub struct Trainer {
    model_cfg: ModelConfig,
    flow_cfg: SamplerConfig,
    adam_cfg: AdamConfig,
    /// Worker threads for per-triplet passes; results are identical for any
    /// value because the gradient reduction runs in triplet-index order.
    pub threads: usize,
    params: BTreeMap<String, Tensor>,
    adam: AdamState,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        flow_cfg: SamplerConfig,
        adam_cfg: AdamConfig,
        init_seed: u64,
    ) -> Result<Trainer> {
        flow_cfg.validate()?;
        let params = init_params(&model_cfg, init_seed)?;
        Ok(Trainer { model_cfg, flow_cfg, adam_cfg, threads: 1, params, adam: AdamState::new() })
    }

    /// Resume from a checkpoint written by [`Trainer::checkpoint`]: parameter
    /// tensors under their own names, Adam moments under `adam.m/` and
    /// `adam.v/`.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        flow_cfg: SamplerConfig,
        adam_cfg: AdamConfig,
    ) -> Result<Trainer> {
        flow_cfg.validate()?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in &ckpt.tensors {
            if let Some(base) = name.strip_prefix(ADAM_M_PREFIX) {
                m.insert(base.to_string(), tensor.data().to_vec());
            } else if let Some(base) = name.strip_prefix(ADAM_V_PREFIX) {
                v.insert(base.to_string(), tensor.data().to_vec());
            } else {
                params.insert(name.clone(), tensor.clone());
            }
        }
        if m.is_empty() && v.is_empty() {
            if ckpt.step != 0 {
                return Err(Error::Config(format!(
                    "checkpoint is at step {} but carries no optimizer moments",
                    ckpt.step
                )));
            }
            let trainer = Trainer { model_cfg: ckpt.config.clone(), flow_cfg, adam_cfg, threads: 1, params, adam: AdamState::new() };
            trainer.validate_params()?;
            return Ok(trainer);
        }
        let mut entries = Vec::with_capacity(m.len());
        for (name, m_buf) in m {
            let v_buf = v.remove(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint has adam.m/{name} without adam.v/{name}"))
            })?;
            let param = params.get(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint has moments for unknown parameter {name:?}"))
            })?;
            if m_buf.len() != param.numel() || v_buf.len() != param.numel() {
                return Err(Error::Config(format!("moment size mismatch for {name:?}")));
            }
            entries.push((name, m_buf, v_buf));
        }
        if let Some(orphan) = v.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint has adam.v/{orphan} without adam.m/{orphan}"
            )));
        }
        if entries.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has moments for {} of {} parameters",
                entries.len(),
                params.len()
            )));
        }
        let trainer = Trainer {
            model_cfg: ckpt.config.clone(),
            flow_cfg,
            adam_cfg,
            threads: 1,
            params,
            adam: AdamState::from_entries(ckpt.step, entries),
        };
        trainer.validate_params()?;
        Ok(trainer)
    }

    /// Every expected parameter present with the right shape.
    fn validate_params(&self) -> Result<()> {
        let reference = init_params(&self.model_cfg, 0)?;
        if self.params.len() != reference.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                reference.len(),
                self.params.len()
            )));
        }
        for (name, want) in &reference {
            let got = self.params.get(name).ok_or_else(|| {
                Error::Config(format!("missing parameter {name:?}"))
            })?;
            if got.shape() != want.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load params",
                    lhs: got.shape().to_vec(),
                    rhs: want.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn flow_config(&self) -> &SamplerConfig {
        &self.flow_cfg
    }

    /// Completed optimizer updates.
    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// Snapshot parameters plus optimizer moments for bit-exact resume.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.params.clone();
        for (name, m, v) in self.adam.entries() {
            let shape = vec![m.len()];
            tensors.insert(
                format!("{ADAM_M_PREFIX}{name}"),
                Tensor::new(shape.clone(), m.to_vec()).expect("moment buffer matches shape"),
            );
            tensors.insert(
                format!("{ADAM_V_PREFIX}{name}"),
                Tensor::new(shape, v.to_vec()).expect("moment buffer matches shape"),
            );
        }
        Checkpoint { config: self.model_cfg.clone(), step: self.adam.step_count(), tensors }
    }

    /// One optimizer update from a batch of triplets: per triplet draw
    /// (t, z) from its own seeded stream, build the loss graph, backprop;
    /// then average gradients in triplet-index order and apply Adam.
    ///
    /// The garment mask is read here and only here, and only when the
    /// attention loss is active.
    pub fn train_step(&mut self, batch: &[Triplet]) -> Result<TrainStepReport> {
        if batch.is_empty() {
            return Err(Error::Config("train_step needs a nonempty batch".into()));
        }
        if batch.len() > MAX_BATCH {
            return Err(Error::Config(format!("batch of {} exceeds the {MAX_BATCH} limit", batch.len())));
        }
        let step = self.adam.step_count();
        let results = self.run_passes(step, batch)?;

        let mut grads: BTreeMap<String, Vec<f32>> =
            self.params.iter().map(|(k, p)| (k.clone(), vec![0.0f32; p.numel()])).collect();
        let (mut fm, mut attn, mut total) = (0.0f64, 0.0f64, 0.0f64);
        for r in &results {
            fm += r.fm;
            attn += r.attn;
            total += r.total;
            for (name, g) in &r.grads {
                let acc = grads.get_mut(name).expect("pass grads share param names");
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        let mut grad_sq = 0.0f64;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= inv;
                grad_sq += (*v as f64) * (*v as f64);
            }
        }
        self.adam.step(&self.adam_cfg, &mut self.params, &grads)?;

        let n = batch.len() as f64;
        Ok(TrainStepReport {
            step: self.adam.step_count(),
            fm_loss: (fm / n) as f32,
            attn_loss: (attn / n) as f32,
            total_loss: (total / n) as f32,
            grad_norm: grad_sq.sqrt() as f32,
        })
    }

    fn run_passes(&self, step: u64, batch: &[Triplet]) -> Result<Vec<PassResult>> {
        if self.threads <= 1 || batch.len() == 1 {
            return batch.iter().enumerate().map(|(i, t)| self.triplet_pass(step, i, t)).collect();
        }
        let threads = self.threads.min(batch.len());
        let chunk = batch.len().div_ceil(threads);
        let mut collected: Vec<Result<Vec<PassResult>>> = Vec::new();
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, t)| self.triplet_pass(step, c * chunk + j, t))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            collected = handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect();
        });
        let mut flat = Vec::with_capacity(batch.len());
        for part in collected {
            flat.extend(part?);
        }
        Ok(flat)
    }

    fn triplet_pass(&self, step: u64, index: usize, trip: &Triplet) -> Result<PassResult> {
        let lambda = if self.model_cfg.use_attn_loss { self.flow_cfg.lambda_attn } else { 0.0 };
        let mut rng = crate::rng::rng_for(self.flow_cfg.seed, TRAIN_SALT, (step << 16) | index as u64);
        let t: f32 = rng.gen();
        let z = Tensor::randn(vec![N_IMG_TOKENS, PATCH_DIM], &mut rng);
        let x0 = patchify(&trip.target);
        let xt = Tensor::new(vec![N_IMG_TOKENS, PATCH_DIM], interpolate(x0.data(), z.data(), t)?)?;
        let target = Tensor::new(vec![N_IMG_TOKENS, PATCH_DIM], fm_target(x0.data(), z.data())?)?;

        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        for (name, p) in &self.params {
            leaves.insert(name.clone(), tape.leaf(p));
        }
        let seq = assemble_sequence(
            &mut tape,
            &leaves,
            &self.model_cfg,
            &xt,
            &patchify(&trip.person),
            &patchify(&trip.garment),
            &trip.pose,
            StreamOrder::PersonGarment,
        )?;
        let text = embed_text(&mut tape, &leaves, &self.model_cfg, &trip.prompt)?;
        let out = dit_forward(&mut tape, &leaves, &self.model_cfg, &seq, &text, t)?;

        let fm_node = tape.mse(&out.velocity, &target)?;
        let (loss_node, attn_val) = if lambda != 0.0 {
            let mask: Vec<f32> = trip.mask().iter().map(|&c| c as f32).collect();
            let mask_t = Tensor::new(vec![N_IMG_TOKENS], mask)?;
            let mut acc: Option<Tensor> = None;
            for map in &out.attention {
                let inside = tape.mul(map, &mask_t)?;
                let mass = tape.sum(&inside)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(&prev, &mass)?,
                    None => mass,
                });
            }
            let attn_node =
                tape.scale(&acc.expect("config validation enforces n_blocks >= 1"), -1.0 / out.attention.len() as f32)?;
            let weighted = tape.scale(&attn_node, lambda)?;
            (tape.add(&fm_node, &weighted)?, attn_node.scalar_value() as f64)
        } else {
            (fm_node.clone(), 0.0)
        };

        let fm = fm_node.scalar_value() as f64;
        let total = loss_node.scalar_value() as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss at train step {step} (batch index {index})"),
            });
        }

        let mut by_ref = tape.backward(&loss_node)?;
        let mut grads = BTreeMap::new();
        for (name, leaf) in &leaves {
            // Parameters outside the active graph (e.g. the pose projector
            // with use_pose off) get zero gradient.
            let g = by_ref.take(leaf).unwrap_or_else(|| vec![0.0; leaf.numel()]);
            grads.insert(name.clone(), g);
        }
        Ok(PassResult { grads, fm, attn: attn_val, total })
    }
}
