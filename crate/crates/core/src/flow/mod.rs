//! Flow-matching math: the interpolation path, losses, closed-form oracles,
//! the training step, and the deterministic Euler sampler.
//!
//! Training regresses velocity v = x0 - z on straight paths
//! x_t = (1-t) x0 + t z; sampling starts at z (t = 1) and integrates x <- x +
//! h v with decreasing t, which is consistent with the loss because one Euler
//! step reproduces the path identity
//! interpolate(t - h) - interpolate(t) = h (x0 - z) exactly.
//!
//! The plain f64 functions here are the independent reference arithmetic;
//! the tape-based graph inside `train_step` is checked against them.

pub mod gaussian;
pub mod sample;
pub mod train;

use crate::error::{Error, Result};

pub use gaussian::{train_gaussian_mlp, Gaussian1dConfig, GaussianMlp};
pub use sample::{euler_integrate, sample, sample_traced, SampleTrace};
pub use train::{Trainer, TrainStepReport};

/// Sampler and flow-loss knobs. `lambda_attn` lives here because it is part
/// of the flow objective rather than the architecture; it is read only by
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub lambda_attn: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 25, seed: 0, lambda_attn: 0.1 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.lambda_attn >= 0.0) {
            return Err(Error::Config(format!("lambda_attn must be >= 0, got {}", self.lambda_attn)));
        }
        Ok(())
    }
}

fn check_same_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op, lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    Ok(())
}

/// x_t = (1-t) x0 + t z.
pub fn interpolate(x0: &[f32], z: &[f32], t: f32) -> Result<Vec<f32>> {
    check_same_len("interpolate", x0, z)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidOp { op: "interpolate", msg: format!("t = {t} outside [0,1]") });
    }
    Ok(x0.iter().zip(z).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// The regression target x0 - z.
pub fn fm_target(x0: &[f32], z: &[f32]) -> Result<Vec<f32>> {
    check_same_len("fm_target", x0, z)?;
    Ok(x0.iter().zip(z).map(|(a, b)| a - b).collect())
}

/// Mean squared error between the predicted velocity and x0 - z.
pub fn fm_loss(v_pred: &[f32], x0: &[f32], z: &[f32]) -> Result<f64> {
    check_same_len("fm_loss", v_pred, x0)?;
    let target = fm_target(x0, z)?;
    let sum: f64 = v_pred
        .iter()
        .zip(&target)
        .map(|(v, t)| {
            let r = (v - t) as f64;
            r * r
        })
        .sum();
    Ok(sum / v_pred.len() as f64)
}

/// Attention regularizer: -(1/L) sum over blocks of the attention mass inside
/// the mask. Map entries are softmax sub-sums (nonnegative), so the L1 norm
/// is a plain sum.
pub fn attn_loss(maps: &[Vec<f32>], mask: &[u8]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::InvalidOp { op: "attn_loss", msg: "no attention maps".into() });
    }
    let mut total = 0.0f64;
    for map in maps {
        if map.len() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "attn_loss",
                lhs: vec![map.len()],
                rhs: vec![mask.len()],
            });
        }
        for (a, m) in map.iter().zip(mask) {
            total += *a as f64 * *m as f64;
        }
    }
    Ok(-total / maps.len() as f64)
}

/// L_total = L_FM + lambda_attn * L_attn. With lambda_attn = 0 this returns
/// fm_loss bit-for-bit and never touches the attention inputs.
pub fn total_loss(
    v_pred: &[f32],
    x0: &[f32],
    z: &[f32],
    maps: &[Vec<f32>],
    mask: &[u8],
    lambda_attn: f32,
) -> Result<f64> {
    let fm = fm_loss(v_pred, x0, z)?;
    if lambda_attn == 0.0 {
        return Ok(fm);
    }
    Ok(fm + lambda_attn as f64 * attn_loss(maps, mask)?)
}

/// Closed-form flow target for scalar data x0 ~ N(mu, sigma^2), z ~ N(0, 1):
///
///   v*(y, t) = mu + [(1-t) sigma^2 - t] / [(1-t)^2 sigma^2 + t^2] * (y - (1-t) mu)
///
/// which is E[x0 - z | x_t = y]. Used as the independent oracle that trained
/// velocity models are measured against.
pub fn gaussian_oracle_velocity(y: f64, t: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidOp {
            op: "gaussian_oracle_velocity",
            msg: format!("t = {t} outside (0,1); conditioning is degenerate at the endpoints"),
        });
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidOp {
            op: "gaussian_oracle_velocity",
            msg: format!("sigma must be positive, got {sigma}"),
        });
    }
    let s2 = sigma * sigma;
    let coeff = ((1.0 - t) * s2 - t) / ((1.0 - t) * (1.0 - t) * s2 + t * t);
    Ok(mu + coeff * (y - (1.0 - t) * mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randvec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let mut rng = rng_for(1, 0, 0);
        let x0 = randvec(&mut rng, 32);
        let z = randvec(&mut rng, 32);
        assert_eq!(interpolate(&x0, &z, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &z, 1.0).unwrap(), z);
        assert_eq!(interpolate(&[0.0], &[2.0], 0.5).unwrap(), vec![1.0]);
        assert!(interpolate(&x0, &z[..5], 0.5).is_err());
        assert!(interpolate(&x0, &z, 1.5).is_err());
    }

    #[test]
    fn path_difference_equals_scaled_target() {
        // interpolate(t-h) - interpolate(t) = h * (x0 - z): the identity that
        // makes the sampler's x <- x + h*v update exact on straight paths.
        let mut rng = rng_for(2, 0, 0);
        for case in 0..1000 {
            let x0 = randvec(&mut rng, 8);
            let z = randvec(&mut rng, 8);
            let t: f32 = rng.gen();
            let h: f32 = rng.gen::<f32>() * t;
            let a = interpolate(&x0, &z, t - h).unwrap();
            let b = interpolate(&x0, &z, t).unwrap();
            let target = fm_target(&x0, &z).unwrap();
            for i in 0..8 {
                let lhs = a[i] - b[i];
                let rhs = h * target[i];
                assert!((lhs - rhs).abs() <= 1e-6, "case {case}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn fm_target_examples_and_linearity() {
        assert_eq!(fm_target(&[1.0], &[0.0]).unwrap(), vec![1.0]);
        assert_eq!(fm_target(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        let mut rng = rng_for(3, 0, 0);
        for _ in 0..50 {
            let x0 = randvec(&mut rng, 6);
            let z = randvec(&mut rng, 6);
            let a: f32 = rng.gen_range(-2.0..2.0);
            let scaled_x0: Vec<f32> = x0.iter().map(|v| a * v).collect();
            let scaled_z: Vec<f32> = z.iter().map(|v| a * v).collect();
            let lhs = fm_target(&scaled_x0, &scaled_z).unwrap();
            let rhs = fm_target(&x0, &z).unwrap();
            for i in 0..6 {
                assert!((lhs[i] - a * rhs[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fm_loss_examples() {
        let x0 = vec![1.0, 2.0, 3.0];
        let z = vec![0.5, 1.0, 1.5];
        let perfect = fm_target(&x0, &z).unwrap();
        assert_eq!(fm_loss(&perfect, &x0, &z).unwrap(), 0.0);
        assert_eq!(fm_loss(&[0.0; 4], &[1.0; 4], &[0.0; 4]).unwrap(), 1.0);

        // Doubling the residual quadruples the loss.
        let v1: Vec<f32> = perfect.iter().map(|v| v + 0.3).collect();
        let v2: Vec<f32> = perfect.iter().map(|v| v + 0.6).collect();
        let l1 = fm_loss(&v1, &x0, &z).unwrap();
        let l2 = fm_loss(&v2, &x0, &z).unwrap();
        // f32 inputs: 0.3 and 0.6 are not exactly representable, so the
        // ratio carries their rounding.
        assert!((l2 / l1 - 4.0).abs() < 1e-5, "{l2} / {l1}");
    }

    #[test]
    fn attn_loss_fixture_and_bounds() {
        let uniform = vec![vec![64.0f32 / 193.0; 64]; 4];
        let mut mask = vec![0u8; 64];
        for cell in mask.iter_mut().take(20) {
            *cell = 1;
        }
        let loss = attn_loss(&uniform, &mask).unwrap();
        let expected = -20.0 * 64.0 / 193.0;
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");

        // Zero mask kills the loss; doubling disjoint active cells doubles it.
        assert_eq!(attn_loss(&uniform, &[0u8; 64]).unwrap(), 0.0);
        let mut mask2 = mask.clone();
        for cell in mask2.iter_mut().skip(20).take(20) {
            *cell = 1;
        }
        let loss2 = attn_loss(&uniform, &mask2).unwrap();
        assert!((loss2 - 2.0 * loss).abs() < 1e-9);

        // Random maps stay within [-(sum M), 0].
        let mut rng = rng_for(4, 0, 0);
        for _ in 0..50 {
            let maps: Vec<Vec<f32>> = (0..3).map(|_| (0..64).map(|_| rng.gen::<f32>()).collect()).collect();
            let mask: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1u8)).collect();
            let active: f64 = mask.iter().map(|&m| m as f64).sum();
            let l = attn_loss(&maps, &mask).unwrap();
            assert!(l <= 0.0 && l >= -active, "{l} outside [-{active}, 0]");
        }

        assert!(attn_loss(&[], &mask).is_err());
        assert!(attn_loss(&[vec![0.0; 8]], &mask).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let x0 = vec![1.0, 0.0];
        let z = vec![0.0, 0.0];
        let v = vec![0.0, 0.0];
        let maps = vec![vec![0.5f32; 2]];
        let mask = vec![1u8, 0];

        // lambda = 0 matches fm_loss bit for bit.
        let fm = fm_loss(&v, &x0, &z).unwrap();
        let tot0 = total_loss(&v, &x0, &z, &maps, &mask, 0.0).unwrap();
        assert_eq!(fm.to_bits(), tot0.to_bits());
        // ... even when the attention inputs are malformed.
        assert!(total_loss(&v, &x0, &z, &[], &mask, 0.0).is_ok());

        // fm = 0.5, attn = -0.25, lambda = 1 -> 0.25.
        let tot1 = total_loss(&v, &x0, &z, &[vec![0.25, 0.9]], &mask, 1.0).unwrap();
        assert!((tot1 - 0.25).abs() < 1e-12, "{tot1}");
    }

    #[test]
    fn gaussian_oracle_examples() {
        assert_eq!(gaussian_oracle_velocity(0.0, 0.5, 0.0, 1.0).unwrap(), 0.0);
        for t in [0.1, 0.3, 0.7, 0.9] {
            assert_eq!(gaussian_oracle_velocity(0.0, t, 0.0, 1.0).unwrap(), 0.0);
        }
        let v = gaussian_oracle_velocity(0.5, 0.5, 1.0, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        assert!(gaussian_oracle_velocity(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(gaussian_oracle_velocity(0.0, 1.0, 0.0, 1.0).is_err());
        assert!(gaussian_oracle_velocity(0.0, 0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn gaussian_oracle_matches_monte_carlo() {
        // Kernel-weighted Monte Carlo estimate of E[x0 - z | x_t ~= y].
        let mu = 1.0f64;
        let sigma = 1.0f64;
        let mut rng = rng_for(5, 0, 0);
        for (y, t) in [(0.5f64, 0.5f64), (0.0, 0.3), (1.2, 0.7)] {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            let bandwidth = 0.05f64;
            for _ in 0..400_000 {
                let x0 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
                let z: f64 = rng.sample(StandardNormal);
                let xt = (1.0 - t) * x0 + t * z;
                let u = (xt - y) / bandwidth;
                let w = (-0.5 * u * u).exp();
                num += w * (x0 - z);
                den += w;
            }
            let mc = num / den;
            let oracle = gaussian_oracle_velocity(y, t, mu, sigma).unwrap();
            assert!((mc - oracle).abs() < 0.05, "y={y} t={t}: mc {mc} vs oracle {oracle}");
        }
    }
}
