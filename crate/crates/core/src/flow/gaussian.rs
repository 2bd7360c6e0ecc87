//! The 1D Gaussian flow-matching task.
//!
//! For scalar data x0 ~ N(mu, sigma^2) the optimal velocity field has the
//! closed form in [`super::gaussian_oracle_velocity`], so a small trained
//! model can be measured against ground truth. This is the end-to-end
//! correctness oracle for the whole training loop: if the loss, autodiff, or
//! optimizer were wrong, the learned field would not match.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::adam::AdamConfig;
use crate::autodiff::{AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::gaussian_oracle_velocity;

const GAUSS_SALT: u64 = 0x6761_7573;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian1dConfig {
    pub mu: f64,
    pub sigma: f64,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for Gaussian1dConfig {
    fn default() -> Self {
        Gaussian1dConfig { mu: 1.0, sigma: 1.0, hidden: 64, steps: 20_000, batch: 256, lr: 1e-2, seed: 0 }
    }
}

impl Gaussian1dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.hidden == 0 || self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("hidden, steps, and batch must all be nonzero".into()));
        }
        Ok(())
    }
}

/// A 2-layer MLP velocity model v(y, t) for scalar flow matching. Inputs are
/// the raw pair (y, t); time needs no featurization at this scale.
pub struct GaussianMlp {
    params: BTreeMap<String, Tensor>,
}

fn forward(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    input: &Tensor,
) -> Result<Tensor> {
    let h = tape.matmul(input, &params["w1"])?;
    let h = tape.bias_add(&h, &params["b1"])?;
    let h = tape.gelu(&h)?;
    let out = tape.matmul(&h, &params["w2"])?;
    tape.bias_add(&out, &params["b2"])
}

impl GaussianMlp {
    pub fn velocity(&self, y: f32, t: f32) -> Result<f32> {
        let mut tape = Tape::new();
        let input = Tensor::new(vec![1, 2], vec![y, t])?;
        Ok(forward(&mut tape, &self.params, &input)?.scalar_value())
    }
}

/// Train the MLP with the flow-matching objective: per step draw a batch of
/// (x0, z, t), regress v(x_t, t) onto x0 - z, apply Adam.
pub fn train_gaussian_mlp(cfg: &Gaussian1dConfig) -> Result<GaussianMlp> {
    cfg.validate()?;
    let mut init_rng = rng_for(cfg.seed, GAUSS_SALT, 0);
    let scaled = |shape: Vec<usize>, std: f32, rng: &mut rand_chacha::ChaCha8Rng| {
        let t = Tensor::randn(shape, rng);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * std).collect()).expect("shape unchanged")
    };
    let mut params = BTreeMap::new();
    params.insert("w1".to_string(), scaled(vec![2, cfg.hidden], 0.5, &mut init_rng));
    params.insert("b1".to_string(), Tensor::zeros(vec![cfg.hidden]));
    params.insert("w2".to_string(), scaled(vec![cfg.hidden, 1], 0.5, &mut init_rng));
    params.insert("b2".to_string(), Tensor::zeros(vec![1]));

    let mut adam = AdamState::new();
    for step in 0..cfg.steps {
        // Linear learning-rate decay: the flow-matching target is noisy
        // (x0 - z has conditional variance given x_t), so a constant rate
        // leaves the weights bouncing on a stochastic-gradient floor.
        let lr = cfg.lr * (1.0 - step as f32 / cfg.steps as f32);
        let adam_cfg = AdamConfig { lr, ..Default::default() };
        let mut rng = rng_for(cfg.seed, GAUSS_SALT, 1 + step as u64);
        let mut input = Vec::with_capacity(cfg.batch * 2);
        let mut target = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let x0 = cfg.mu as f32 + cfg.sigma as f32 * rng.sample::<f32, _>(StandardNormal);
            let z: f32 = rng.sample(StandardNormal);
            let t: f32 = rng.gen();
            input.extend_from_slice(&[(1.0 - t) * x0 + t * z, t]);
            target.push(x0 - z);
        }
        let input = Tensor::new(vec![cfg.batch, 2], input)?;
        let target = Tensor::new(vec![cfg.batch, 1], target)?;

        let mut tape = Tape::new();
        let leaves: BTreeMap<String, Tensor> =
            params.iter().map(|(k, p)| (k.clone(), tape.leaf(p))).collect();
        let pred = forward(&mut tape, &leaves, &input)?;
        let loss = tape.mse(&pred, &target)?;
        if !loss.scalar_value().is_finite() {
            return Err(Error::NonFinite { context: format!("gaussian task loss at step {step}") });
        }
        let mut grads = tape.backward(&loss)?;
        let by_name: BTreeMap<String, Vec<f32>> = leaves
            .iter()
            .map(|(k, leaf)| (k.clone(), grads.take(leaf).expect("all MLP params are in the graph")))
            .collect();
        adam.step(&adam_cfg, &mut params, &by_name)?;
    }
    Ok(GaussianMlp { params })
}

/// RMS error of the trained field against the closed-form oracle over the
/// grid t in {0.05, 0.10, ..., 0.95} and, per t, 41 evenly spaced y values
/// covering the x_t distribution's mean +/- 2 standard deviations.
pub fn oracle_rms(mlp: &GaussianMlp, mu: f64, sigma: f64) -> Result<f64> {
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for ti in 1..=19 {
        let t = ti as f64 * 0.05;
        let mean_t = (1.0 - t) * mu;
        let std_t = ((1.0 - t) * (1.0 - t) * sigma * sigma + t * t).sqrt();
        for yi in 0..41 {
            let y = mean_t - 2.0 * std_t + 4.0 * std_t * yi as f64 / 40.0;
            let predicted = mlp.velocity(y as f32, t as f32)? as f64;
            let oracle = gaussian_oracle_velocity(y, t, mu, sigma)?;
            sum_sq += (predicted - oracle) * (predicted - oracle);
            count += 1;
        }
    }
    Ok((sum_sq / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trained_mlp_matches_the_oracle() {
        let cfg = Gaussian1dConfig::default();
        let mlp = train_gaussian_mlp(&cfg).unwrap();
        let rms = oracle_rms(&mlp, cfg.mu, cfg.sigma).unwrap();
        assert!(rms < 0.05, "rms {rms} vs oracle");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = Gaussian1dConfig { steps: 50, ..Default::default() };
        let a = train_gaussian_mlp(&cfg).unwrap();
        let b = train_gaussian_mlp(&cfg).unwrap();
        for (ka, va) in &a.params {
            assert!(va.data().iter().zip(b.params[ka].data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn config_validation() {
        assert!(Gaussian1dConfig { sigma: 0.0, ..Default::default() }.validate().is_err());
        assert!(Gaussian1dConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(Gaussian1dConfig::default().validate().is_ok());
    }
}
