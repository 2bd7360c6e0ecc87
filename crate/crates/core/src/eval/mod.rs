//! Metrics and the unpaired evaluation harness.
//!
//! SSIM and a pooled-feature Fréchet distance measure image quality, a
//! rule-based oracle reads garment attributes back off rendered or generated
//! images, and attention-mass ratios quantify how much of the model's
//! garment attention lands inside the garment region. The harness ties them
//! together over a pairing list: because the toy renderer can produce the
//! true try-on result for any (person, garment) pair, the unpaired protocol
//! here is fully supervised.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::data::consts::*;
use crate::data::prompt::prompt_from_spec;
use crate::data::render::sleeve_difference_pixels;
use crate::data::{
    garment_mask, make_triplet, render_catalog, render_person, Fit, GarmentKind, GarmentRef, GarmentSpec, Image,
    PairingList, Pattern, PoseSpec, Triplet,
};
use crate::error::{Error, Result};
use crate::flow::{sample_traced, SampleTrace, SamplerConfig};
use crate::model::ModelConfig;
use crate::rng::derive_seed;

/// Stream salt for seeds derived by the evaluation harness.
const EVAL_SALT: u64 = 0x6576_616c;

// ---------------------------------------------------------------------------
// SSIM

/// SSIM window side in pixels.
const SSIM_WINDOW: usize = 7;
/// Stabilizers (K1=0.01, K2=0.03) squared, for dynamic range 1.0.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Structural similarity between two images: uniform 7x7 windows placed
/// fully inside the frame, per-channel maps averaged into one scalar.
/// Window moments use the weighted-population form (uniform weights 1/49).
/// The fixed 32x32 image type makes dimension mismatches unrepresentable.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0u32;
    for c in 0..IMG_C {
        for y0 in 0..=IMG_H - SSIM_WINDOW {
            for x0 in 0..=IMG_W - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let pa = a.get(x, y)[c] as f64;
                        let pb = b.get(x, y)[c] as f64;
                        sa += pa;
                        sb += pb;
                        saa += pa * pa;
                        sbb += pb * pb;
                        sab += pa * pb;
                    }
                }
                let ma = sa / n;
                let mb = sb / n;
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                windows += 1;
            }
        }
    }
    total / windows as f64
}

/// Mean absolute per-channel pixel difference, a cheap "did anything change"
/// probe for prompt-control checks.
pub fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    let n = a.data().len();
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
    sum / n as f64
}

// ---------------------------------------------------------------------------
// Pooled features and Fréchet distance

/// Pooling block side: 32x32 averages down to a 4x4 grid.
const FEAT_POOL: usize = 8;
/// Feature dimensionality: 4x4 grid cells times 3 channels.
pub const FEATURE_DIM: usize = (IMG_H / FEAT_POOL) * (IMG_W / FEAT_POOL) * IMG_C;

/// Training-free image features: average-pool to 4x4x3 and flatten in the
/// image's own (row, column, channel) order. Linear in pixel values.
pub fn feature_extract(img: &Image) -> Vec<f32> {
    let gh = IMG_H / FEAT_POOL;
    let gw = IMG_W / FEAT_POOL;
    let cell = (FEAT_POOL * FEAT_POOL) as f64;
    let mut out = vec![0.0f32; FEATURE_DIM];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = [0.0f64; IMG_C];
            for y in gy * FEAT_POOL..(gy + 1) * FEAT_POOL {
                for x in gx * FEAT_POOL..(gx + 1) * FEAT_POOL {
                    let px = img.get(x, y);
                    for c in 0..IMG_C {
                        acc[c] += px[c] as f64;
                    }
                }
            }
            for c in 0..IMG_C {
                out[(gy * gw + gx) * IMG_C + c] = (acc[c] / cell) as f32;
            }
        }
    }
    out
}

/// Covariance ridge added when a feature set is too small for a full-rank
/// sample covariance.
const COV_EPSILON: f64 = 1e-6;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d x d).
/// Returns (eigenvalues, eigenvectors) with `a = V diag(w) V^T`; column k of
/// `v` belongs to `w[k]`.
fn jacobi_eigh(d: usize, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| m[p * d + q] * m[p * d + q])
            .sum();
        if off.sqrt() <= 1e-14 * scale {
            let w = (0..d).map(|i| m[i * d + i]).collect();
            return Ok((w, v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Two-sided rotation in the (p, q) plane: columns, then rows.
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::InvalidOp { op: "jacobi_eigh", msg: "no convergence in 100 sweeps".into() })
}

fn mat_mul(d: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Symmetric positive-semidefinite square root via eigendecomposition;
/// slightly negative eigenvalues from rounding clamp to zero.
fn sqrtm_sym(d: usize, a: &[f64]) -> Result<Vec<f64>> {
    let (w, v) = jacobi_eigh(d, a)?;
    let roots: Vec<f64> = w.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for (k, r) in roots.iter().enumerate() {
                acc += v[i * d + k] * r * v[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    Ok(out)
}

/// Fréchet distance between two Gaussians given directly by their moments:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, the matrix square
/// root computed from the symmetric product `S_a^{1/2} S_b S_a^{1/2}`.
/// Clamped at zero against numerical negatives.
pub fn frechet_from_moments(mu_a: &[f64], cov_a: &[f64], mu_b: &[f64], cov_b: &[f64]) -> Result<f64> {
    let d = mu_a.len();
    if d == 0 || mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return Err(Error::ShapeMismatch {
            op: "frechet_from_moments",
            lhs: vec![mu_a.len(), cov_a.len()],
            rhs: vec![mu_b.len(), cov_b.len()],
        });
    }
    for &x in mu_a.iter().chain(mu_b).chain(cov_a).chain(cov_b) {
        if !x.is_finite() {
            return Err(Error::NonFinite { context: "frechet_from_moments input".into() });
        }
    }
    let a_half = sqrtm_sym(d, cov_a)?;
    let inner = mat_mul(d, &a_half, &mat_mul(d, cov_b, &a_half));
    // Symmetrize before the eigensolve; the product is symmetric only up to
    // rounding.
    let mut sym = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (w, _) = jacobi_eigh(d, &sym)?;
    let tr_sqrt: f64 = w.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// Sample mean and covariance (denominator n-1) of a feature set, with a
/// `COV_EPSILON` ridge whenever fewer than dim+1 samples are available.
fn sample_moments(feats: &[Vec<f32>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = feats.len();
    if n == 0 {
        return Err(Error::InvalidOp { op: "frechet_distance", msg: "empty feature set".into() });
    }
    let d = feats[0].len();
    if d == 0 {
        return Err(Error::InvalidOp { op: "frechet_distance", msg: "zero-dimensional features".into() });
    }
    for row in feats {
        if row.len() != d {
            return Err(Error::ShapeMismatch { op: "frechet_distance", lhs: vec![d], rhs: vec![row.len()] });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "frechet_distance feature".into() });
        }
    }
    let mut mu = vec![0.0f64; d];
    for row in feats {
        for (m, &x) in mu.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    if n >= 2 {
        for row in feats {
            let centered: Vec<f64> = row.iter().zip(&mu).map(|(&x, m)| x as f64 - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += centered[i] * centered[j];
                }
            }
        }
        for c in &mut cov {
            *c /= (n - 1) as f64;
        }
    }
    if n < d + 1 {
        for i in 0..d {
            cov[i * d + i] += COV_EPSILON;
        }
    }
    Ok((mu, cov))
}

/// Fréchet distance between the Gaussian fits of two feature sets.
pub fn frechet_distance(feats_a: &[Vec<f32>], feats_b: &[Vec<f32>]) -> Result<f64> {
    let (mu_a, cov_a) = sample_moments(feats_a)?;
    let (mu_b, cov_b) = sample_moments(feats_b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

// ---------------------------------------------------------------------------
// Attention mass

/// Garment-attention maps collected from a model run: any number of 64-cell
/// patch-grid maps, e.g. every block of every sampler step pooled together.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub maps: Vec<Vec<f32>>,
}

impl AttentionRecord {
    /// Pool every block of every sampler step of a trace into one record.
    pub fn from_trace(trace: &SampleTrace) -> Self {
        AttentionRecord { maps: trace.attention.iter().flatten().cloned().collect() }
    }
}

/// Fraction of recorded attention mass inside the mask:
/// sum over maps of `A[p]·M[p]` divided by the total mass, in [0, 1].
/// A record with zero total mass (or no maps at all) scores 0.
pub fn attention_mass_ratio(rec: &AttentionRecord, mask: &[u8]) -> Result<f64> {
    if mask.len() != N_IMG_TOKENS {
        return Err(Error::ShapeMismatch {
            op: "attention_mass_ratio",
            lhs: vec![N_IMG_TOKENS],
            rhs: vec![mask.len()],
        });
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for map in &rec.maps {
        if map.len() != N_IMG_TOKENS {
            return Err(Error::ShapeMismatch {
                op: "attention_mass_ratio",
                lhs: vec![N_IMG_TOKENS],
                rhs: vec![map.len()],
            });
        }
        for (a, &m) in map.iter().zip(mask) {
            den += *a as f64;
            if m != 0 {
                num += *a as f64;
            }
        }
    }
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Attribute oracle

/// Minimum per-attribute confidence for a prediction to count as grounded.
pub const ORACLE_CONFIDENCE_THRESHOLD: f32 = 0.5;

/// Color distance at which the torso stops looking like any palette entry.
const COLOR_CONFIDENCE_SCALE: f32 = 0.25;
/// Row-average gap between adjacent stripe bands that separates stripes from
/// solids; the closest palette color to white sits 0.93 away.
const STRIPE_GAP_THRESHOLD: f32 = 0.45;
/// Maximum distance from the predicted base color for the below-hip probe to
/// read as a dress skirt.
const DRESS_MATCH_THRESHOLD: f32 = 0.5;

/// Torso probe columns, strictly inside the torso for every pose.
const PROBE_X0: usize = 12;
const PROBE_X1: usize = 20;
/// Colored-band torso rows above the tucked hem: these pixels show the base
/// garment color for every kind, pattern, and fit, and the garment layer
/// paints over any arm that crosses them.
const COLOR_PROBE_ROWS: [usize; 5] = [9, 10, 13, 14, 17];
/// Adjacent colored/white stripe-band rows for alternation detection.
const PATTERN_ROW_BASE: usize = 10;
const PATTERN_ROW_ALT: usize = 11;
/// The row the tucked waistline is drawn on (a colored band row otherwise).
const FIT_PROBE_ROW: usize = TORSO_Y1 - TUCK_SHORTEN;
/// Below-hip colored-band row: dress skirts paint it, tops leave legs and
/// background. Arms cannot reach below row 21 at any pose.
const DRESS_PROBE_ROW: usize = 22;
const DRESS_PROBE_XS: [usize; 3] = [15, 16, 17];

/// Best-guess garment attributes read off an image at a known pose, with a
/// confidence in [0, 1] per attribute. The oracle never fails; unreadable
/// images simply come back with low confidence everywhere.
#[derive(Clone, Copy, Debug)]
pub struct OraclePrediction {
    pub kind: GarmentKind,
    pub color_index: u8,
    pub pattern: Pattern,
    pub fit: Fit,
    pub kind_confidence: f32,
    pub color_confidence: f32,
    pub pattern_confidence: f32,
    pub fit_confidence: f32,
}

impl OraclePrediction {
    /// The predicted spec, canonicalized like every stored spec.
    pub fn spec(&self) -> GarmentSpec {
        GarmentSpec { kind: self.kind, color_index: self.color_index, pattern: self.pattern, fit: self.fit }
            .canonical()
    }

    /// True when every attribute clears the confidence threshold.
    pub fn confident(&self) -> bool {
        self.kind_confidence >= ORACLE_CONFIDENCE_THRESHOLD
            && self.color_confidence >= ORACLE_CONFIDENCE_THRESHOLD
            && self.pattern_confidence >= ORACLE_CONFIDENCE_THRESHOLD
            && self.fit_confidence >= ORACLE_CONFIDENCE_THRESHOLD
    }
}

fn color_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

fn avg_pixels(img: &Image, pixels: impl Iterator<Item = (usize, usize)>) -> [f32; 3] {
    let mut acc = [0.0f32; 3];
    let mut n = 0;
    for (x, y) in pixels {
        let px = img.get(x, y);
        for c in 0..3 {
            acc[c] += px[c];
        }
        n += 1;
    }
    for c in &mut acc {
        *c /= n as f32;
    }
    acc
}

fn avg_row(img: &Image, y: usize) -> [f32; 3] {
    avg_pixels(img, (PROBE_X0..PROBE_X1).map(move |x| (x, y)))
}

fn nearest_palette(c: [f32; 3]) -> (u8, f32) {
    let mut best = (0u8, f32::INFINITY);
    for (i, p) in GARMENT_PALETTE.iter().enumerate() {
        let d = color_dist(c, *p);
        if d < best.1 {
            best = (i as u8, d);
        }
    }
    best
}

/// Whether row `y` falls on a white stripe band (the renderer's band phase).
fn stripe_row_is_white(y: usize) -> bool {
    (y as i32 - TORSO_Y0 as i32).div_euclid(STRIPE_BAND_PX).rem_euclid(2) == 1
}

/// True when `pose` leaves any visible pixel difference between a longsleeve
/// and a t-shirt worn with this fit. Arms folded across the torso vanish
/// behind the torso garment, and then no observer can recover the kind.
pub fn kind_distinguishable(pose: &PoseSpec, fit: Fit) -> bool {
    !sleeve_difference_pixels(pose, fit).is_empty()
}

/// Read garment attributes off `img`, probing at body coordinates derived
/// from `pose`. Color comes from always-colored torso bands, pattern from
/// adjacent-band alternation, fit from the waistline row, and kind from the
/// below-hip skirt probe followed by a vote over exactly the pixels where
/// the two sleeve hypotheses render differently.
pub fn attribute_oracle(img: &Image, pose: &PoseSpec) -> OraclePrediction {
    // Color: average over torso pixels that show the base color for every
    // spec, then snap to the nearest palette entry. Low confidence here means
    // no garment is visible at all, so it gates every other attribute.
    let torso_avg =
        avg_pixels(img, COLOR_PROBE_ROWS.iter().flat_map(|&y| (PROBE_X0..PROBE_X1).map(move |x| (x, y))));
    let (color_index, base_dist) = nearest_palette(torso_avg);
    let color_confidence = (1.0 - base_dist / COLOR_CONFIDENCE_SCALE).clamp(0.0, 1.0);
    let base = GARMENT_PALETTE[color_index as usize];

    // Pattern: adjacent band rows agree on solids and split on stripes.
    let band_gap = color_dist(avg_row(img, PATTERN_ROW_BASE), avg_row(img, PATTERN_ROW_ALT));
    let pattern = if band_gap > STRIPE_GAP_THRESHOLD { Pattern::Stripes } else { Pattern::Solid };
    let pattern_confidence =
        ((band_gap - STRIPE_GAP_THRESHOLD).abs() / STRIPE_GAP_THRESHOLD).min(1.0).min(color_confidence);

    // Fit: the waistline row is a colored band unless tucking overdraws it.
    let waist_avg = avg_row(img, FIT_PROBE_ROW);
    let d_waist = color_dist(waist_avg, WAISTLINE_COLOR);
    let d_band = color_dist(waist_avg, base);
    let fit = if d_waist < d_band { Fit::Tucked } else { Fit::Regular };
    let waist_gap = color_dist(WAISTLINE_COLOR, base).max(1e-6);
    let fit_confidence = ((d_waist - d_band).abs() / waist_gap).min(1.0).min(color_confidence);

    // Kind: a skirt paints the below-hip band in the base color; otherwise
    // vote over the visible lower-arm sleeve pixels.
    let skirt_avg = avg_pixels(img, DRESS_PROBE_XS.iter().map(|&x| (x, DRESS_PROBE_ROW)));
    let d_skirt = color_dist(skirt_avg, base);
    let (kind, kind_confidence) = if d_skirt < DRESS_MATCH_THRESHOLD {
        (GarmentKind::Dress, (1.0 - d_skirt / DRESS_MATCH_THRESHOLD).min(color_confidence))
    } else {
        let diff = sleeve_difference_pixels(pose, fit);
        if diff.is_empty() {
            // The pose hides the lower arms completely; the hypotheses render
            // identically and the evidence does not exist in the image.
            (GarmentKind::Tshirt, 0.0)
        } else {
            // On striped garments prefer colored-band pixels: white sleeve
            // bands sit within noise range of the pale backgrounds.
            let colored: Vec<(usize, usize)> =
                diff.iter().copied().filter(|&(_, y)| !stripe_row_is_white(y)).collect();
            let probes =
                if pattern == Pattern::Stripes && !colored.is_empty() { &colored } else { &diff };
            let mut votes_long = 0usize;
            for &(x, y) in probes {
                let px = img.get(x, y);
                let expected = if pattern == Pattern::Stripes && stripe_row_is_white(y) {
                    STRIPE_WHITE
                } else {
                    base
                };
                let d_garment = color_dist(px, expected);
                let d_other = SKIN_PALETTE
                    .iter()
                    .chain(BG_PALETTE.iter())
                    .map(|c| color_dist(px, *c))
                    .fold(f32::INFINITY, f32::min);
                if d_garment < d_other {
                    votes_long += 1;
                }
            }
            let frac = votes_long as f32 / probes.len() as f32;
            let kind = if frac >= 0.5 { GarmentKind::Longsleeve } else { GarmentKind::Tshirt };
            (kind, (2.0 * frac - 1.0).abs().min(color_confidence))
        }
    };

    OraclePrediction {
        kind,
        color_index,
        pattern,
        fit,
        kind_confidence,
        color_confidence,
        pattern_confidence,
        fit_confidence,
    }
}

/// Deterministic (pose, garment, identity) cases for oracle calibration,
/// drawn from the triplet sampler's own distributions. Poses whose renders
/// cannot distinguish the sleeve kinds are skipped: no probe can recover
/// what the renderer never painted.
pub fn calibration_cases(n: usize, seed: u64) -> Vec<(PoseSpec, GarmentSpec, u64)> {
    let mut out = Vec::with_capacity(n);
    let mut draw = 0u64;
    while out.len() < n {
        let t = make_triplet(derive_seed(seed, EVAL_SALT, draw));
        draw += 1;
        let spec = t.target_spec;
        if spec.kind != GarmentKind::Dress && !kind_distinguishable(&t.pose, spec.fit) {
            continue;
        }
        out.push((t.pose, spec, t.identity_seed));
    }
    out
}

// ---------------------------------------------------------------------------
// Unpaired evaluation harness

/// Everything the harness resolves for one pairing entry before generation
/// runs: inputs for the generator plus ground truth for scoring.
#[derive(Clone, Debug)]
pub struct EvalPair {
    /// Position in the pairing list.
    pub pair_index: usize,
    pub person_index: usize,
    /// Encoded garment reference from the pairing entry.
    pub garment_code: u32,
    pub garment_spec: GarmentSpec,
    pub person_image: Image,
    pub garment_image: Image,
    pub prompt: Vec<u16>,
    pub pose: PoseSpec,
    pub identity_seed: u64,
    /// True try-on result: the paired garment worn by this person.
    pub true_target: Image,
    /// Patch-grid garment mask, used only to score attention; the generator
    /// never sees it.
    pub mask: Vec<u8>,
}

/// A generated try-on image plus optional attention maps for diagnostics.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub image: Image,
    pub attention: Option<AttentionRecord>,
}

/// Per-pair scores. CSV column order: pair_index, person_index,
/// garment_code, ssim, kind_ok, color_ok, pattern_ok, fit_ok,
/// attention_mass_ratio (blank when the generator supplied no attention).
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub pair_index: usize,
    pub person_index: usize,
    pub garment_code: u32,
    pub ssim: f64,
    pub kind_ok: bool,
    pub color_ok: bool,
    pub pattern_ok: bool,
    pub fit_ok: bool,
    pub attention_mass_ratio: Option<f64>,
}

/// Set-level metrics over one pairing list, plus the per-pair rows they
/// were aggregated from (in pairing-list order).
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ssim_mean: f64,
    pub frechet: f64,
    pub kind_accuracy: f64,
    pub color_accuracy: f64,
    pub pattern_accuracy: f64,
    pub fit_accuracy: f64,
    /// Mean of the four per-attribute accuracies.
    pub overall_accuracy: f64,
    /// Mean over pairs that supplied attention; 0 when none did.
    pub attention_mass_ratio_mean: f64,
    pub n_samples: usize,
    pub pairing_seed: u64,
    pub pairs: Vec<PairRecord>,
}

impl EvalReport {
    /// Flat `key = value` serialization of the set-level fields.
    pub fn to_key_values(&self) -> String {
        format!(
            "ssim_mean = {}\nfrechet = {}\naccuracy_kind = {}\naccuracy_color = {}\n\
             accuracy_pattern = {}\naccuracy_fit = {}\naccuracy_overall = {}\n\
             attention_mass_ratio_mean = {}\nn_samples = {}\npairing_seed = {}\n",
            self.ssim_mean,
            self.frechet,
            self.kind_accuracy,
            self.color_accuracy,
            self.pattern_accuracy,
            self.fit_accuracy,
            self.overall_accuracy,
            self.attention_mass_ratio_mean,
            self.n_samples,
            self.pairing_seed,
        )
    }

    /// CSV of the per-pair rows, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "pair_index,person_index,garment_code,ssim,kind_ok,color_ok,pattern_ok,fit_ok,attention_mass_ratio\n",
        );
        for r in &self.pairs {
            let ratio = r.attention_mass_ratio.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.pair_index,
                r.person_index,
                r.garment_code,
                r.ssim,
                u8::from(r.kind_ok),
                u8::from(r.color_ok),
                u8::from(r.pattern_ok),
                u8::from(r.fit_ok),
                ratio,
            ));
        }
        out
    }
}

/// Resolve one pairing entry into concrete inputs and ground truth. The true
/// target render reuses the person's identity seed so skin and background
/// match the person image.
pub fn resolve_pair(triplets: &[Triplet], pairing: &PairingList, pair_index: usize) -> Result<EvalPair> {
    let &(person, garment_code) = pairing
        .pairs
        .get(pair_index)
        .ok_or_else(|| Error::IndexOutOfRange(format!("pairing entry {pair_index}")))?;
    let person_index = person as usize;
    let t = triplets
        .get(person_index)
        .ok_or_else(|| Error::IndexOutOfRange(format!("person record {person_index}")))?;
    let (garment_spec, garment_image, prompt) = match GarmentRef::decode(garment_code)? {
        GarmentRef::Record(j) => {
            let other = triplets
                .get(j as usize)
                .ok_or_else(|| Error::IndexOutOfRange(format!("garment record {j}")))?;
            (other.target_spec, other.garment.clone(), other.prompt.clone())
        }
        GarmentRef::Spec(s) => {
            let s = s.canonical();
            (s, render_catalog(&s), prompt_from_spec(&s))
        }
    };
    let true_target = render_person(&t.pose, &garment_spec, t.identity_seed);
    let mask = garment_mask(&t.pose, &garment_spec);
    Ok(EvalPair {
        pair_index,
        person_index,
        garment_code,
        garment_spec,
        person_image: t.person.clone(),
        garment_image,
        prompt,
        pose: t.pose,
        identity_seed: t.identity_seed,
        true_target,
        mask,
    })
}

/// Evaluate an arbitrary generator over a pairing list. Pairs are processed
/// and aggregated in list order; determinism is entirely the generator's.
pub fn run_eval_with<F>(triplets: &[Triplet], pairing: &PairingList, generate: &mut F) -> Result<EvalReport>
where
    F: FnMut(&EvalPair) -> Result<GeneratedSample>,
{
    if pairing.pairs.is_empty() {
        return Err(Error::Config("pairing list is empty".into()));
    }
    let n = pairing.pairs.len();
    let mut gen_feats = Vec::with_capacity(n);
    let mut true_feats = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut ssim_sum = 0.0f64;
    let (mut kind_n, mut color_n, mut pattern_n, mut fit_n) = (0usize, 0usize, 0usize, 0usize);
    let mut ratio_sum = 0.0f64;
    let mut ratio_n = 0usize;
    for pair_index in 0..n {
        let pair = resolve_pair(triplets, pairing, pair_index)?;
        let sample = generate(&pair)?;
        let s = ssim(&sample.image, &pair.true_target);
        let pred = attribute_oracle(&sample.image, &pair.pose);
        let want = pair.garment_spec.canonical();
        let got = pred.spec();
        let record = PairRecord {
            pair_index,
            person_index: pair.person_index,
            garment_code: pair.garment_code,
            ssim: s,
            kind_ok: got.kind == want.kind,
            color_ok: got.color_index == want.color_index,
            pattern_ok: got.pattern == want.pattern,
            fit_ok: got.fit == want.fit,
            attention_mass_ratio: match &sample.attention {
                Some(rec) => Some(attention_mass_ratio(rec, &pair.mask)?),
                None => None,
            },
        };
        ssim_sum += s;
        kind_n += record.kind_ok as usize;
        color_n += record.color_ok as usize;
        pattern_n += record.pattern_ok as usize;
        fit_n += record.fit_ok as usize;
        if let Some(r) = record.attention_mass_ratio {
            ratio_sum += r;
            ratio_n += 1;
        }
        gen_feats.push(feature_extract(&sample.image));
        true_feats.push(feature_extract(&pair.true_target));
        pairs.push(record);
    }
    let frechet = frechet_distance(&gen_feats, &true_feats)?;
    let kind_accuracy = kind_n as f64 / n as f64;
    let color_accuracy = color_n as f64 / n as f64;
    let pattern_accuracy = pattern_n as f64 / n as f64;
    let fit_accuracy = fit_n as f64 / n as f64;
    Ok(EvalReport {
        ssim_mean: ssim_sum / n as f64,
        frechet,
        kind_accuracy,
        color_accuracy,
        pattern_accuracy,
        fit_accuracy,
        overall_accuracy: (kind_accuracy + color_accuracy + pattern_accuracy + fit_accuracy) / 4.0,
        attention_mass_ratio_mean: if ratio_n > 0 { ratio_sum / ratio_n as f64 } else { 0.0 },
        n_samples: n,
        pairing_seed: pairing.seed,
        pairs,
    })
}

/// Evaluate a trained model over a pairing list: sample each pair's try-on
/// with the flow sampler and score against renderer ground truth. Per-pair
/// noise seeds derive from the pair's content, not its list position, so
/// reordering a pairing list permutes rows without changing any sample.
pub fn run_unpaired_eval(
    params: &BTreeMap<String, Tensor>,
    model_cfg: &ModelConfig,
    triplets: &[Triplet],
    pairing: &PairingList,
    sampler: &SamplerConfig,
) -> Result<EvalReport> {
    run_eval_with(triplets, pairing, &mut |pair: &EvalPair| {
        let key = ((pair.person_index as u64) << 32) | pair.garment_code as u64;
        let per_pair = SamplerConfig { seed: derive_seed(sampler.seed, EVAL_SALT, key), ..*sampler };
        let trace = sample_traced(
            params,
            model_cfg,
            &pair.person_image,
            &pair.garment_image,
            &pair.pose,
            &pair.prompt,
            &per_pair,
        )?;
        let attention = AttentionRecord::from_trace(&trace);
        Ok(GeneratedSample { image: trace.image, attention: Some(attention) })
    })
}
