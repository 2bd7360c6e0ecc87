//! Procedural try-on triplets: renderer, prompts, pairing lists, and files.
//!
//! Every generated artifact is an exact pure function of its seeds, which is
//! what lets the rest of the system pin oracles to frozen fixtures instead of
//! trusting a teacher model.

pub mod consts;
pub mod io;
pub mod prompt;
pub mod render;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

use consts::*;

pub use render::{garment_mask, render_catalog, render_person, render_person_with_coverage, Coverage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GarmentKind {
    Tshirt,
    Longsleeve,
    Dress,
}

impl GarmentKind {
    pub fn as_u8(self) -> u8 {
        match self {
            GarmentKind::Tshirt => 0,
            GarmentKind::Longsleeve => 1,
            GarmentKind::Dress => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(GarmentKind::Tshirt),
            1 => Ok(GarmentKind::Longsleeve),
            2 => Ok(GarmentKind::Dress),
            _ => Err(Error::Config(format!("garment kind {v} out of range"))),
        }
    }

    pub const ALL: [GarmentKind; 3] = [GarmentKind::Tshirt, GarmentKind::Longsleeve, GarmentKind::Dress];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fit {
    Regular,
    Tucked,
}

/// The semantic content of a garment: everything the prompt can talk about.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GarmentSpec {
    pub kind: GarmentKind,
    pub color_index: u8,
    pub pattern: Pattern,
    pub fit: Fit,
}

impl GarmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.color_index as usize >= GARMENT_PALETTE.len() {
            return Err(Error::Config(format!("color index {} out of range", self.color_index)));
        }
        Ok(())
    }

    /// A dress has no tuckable hem; its fit is stored as regular so that spec
    /// comparisons and prompts cannot distinguish phantom variants.
    pub fn canonical(mut self) -> Self {
        if self.kind == GarmentKind::Dress {
            self.fit = Fit::Regular;
        }
        self
    }

    /// Pack into 7 bits: kind(2) | color(3) | pattern(1) | fit(1).
    pub fn pack(&self) -> u16 {
        let mut v = self.kind.as_u8() as u16;
        v |= (self.color_index as u16) << 2;
        v |= match self.pattern {
            Pattern::Solid => 0,
            Pattern::Stripes => 1 << 5,
        };
        v |= match self.fit {
            Fit::Regular => 0,
            Fit::Tucked => 1 << 6,
        };
        v
    }

    pub fn unpack(v: u16) -> Result<Self> {
        let spec = GarmentSpec {
            kind: GarmentKind::from_u8((v & 0b11) as u8)?,
            color_index: ((v >> 2) & 0b111) as u8,
            pattern: if v & (1 << 5) == 0 { Pattern::Solid } else { Pattern::Stripes },
            fit: if v & (1 << 6) == 0 { Fit::Regular } else { Fit::Tucked },
        };
        spec.validate()?;
        Ok(spec)
    }

    fn sample(rng: &mut impl Rng) -> Self {
        GarmentSpec {
            kind: GarmentKind::ALL[rng.gen_range(0..3)],
            color_index: rng.gen_range(0..GARMENT_PALETTE.len() as u8),
            pattern: if rng.gen_range(0..2) == 0 { Pattern::Solid } else { Pattern::Stripes },
            fit: if rng.gen_range(0..2) == 0 { Fit::Regular } else { Fit::Tucked },
        }
        .canonical()
    }
}

pub const ARM_ANGLE_MAX: f32 = std::f32::consts::FRAC_PI_3;
pub const LEG_SPREAD_MAX: f32 = std::f32::consts::PI / 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSpec {
    /// Outward rotation of the left arm from straight down, radians.
    pub left_arm_angle: f32,
    /// Outward rotation of the right arm from straight down, radians.
    pub right_arm_angle: f32,
    /// Outward rotation of both legs from straight down, radians.
    pub leg_spread: f32,
}

impl PoseSpec {
    pub const NEUTRAL: PoseSpec = PoseSpec { left_arm_angle: 0.25, right_arm_angle: 0.25, leg_spread: 0.1 };

    pub fn validate(&self) -> Result<()> {
        let ok = self.left_arm_angle.abs() <= ARM_ANGLE_MAX + 1e-6
            && self.right_arm_angle.abs() <= ARM_ANGLE_MAX + 1e-6
            && self.leg_spread >= -1e-6
            && self.leg_spread <= LEG_SPREAD_MAX + 1e-6;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("pose out of range: {self:?}")))
        }
    }

    fn sample(rng: &mut impl Rng) -> Self {
        PoseSpec {
            left_arm_angle: rng.gen_range(-ARM_ANGLE_MAX..=ARM_ANGLE_MAX),
            right_arm_angle: rng.gen_range(-ARM_ANGLE_MAX..=ARM_ANGLE_MAX),
            leg_spread: rng.gen_range(0.0..=LEG_SPREAD_MAX),
        }
    }

    pub fn to_array(&self) -> [f32; 3] {
        [self.left_arm_angle, self.right_arm_angle, self.leg_spread]
    }
}

/// 32x32 RGB image, floats in [0,1], row-major (y, x, c).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Vec<f32>,
}

impl Image {
    pub fn filled(rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(IMG_H * IMG_W * IMG_C);
        for _ in 0..IMG_H * IMG_W {
            data.extend_from_slice(&rgb);
        }
        Image { data }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != IMG_H * IMG_W * IMG_C {
            return Err(Error::Config(format!("image payload has {} floats", data.len())));
        }
        Ok(Image { data })
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * IMG_W + x) * IMG_C;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * IMG_W + x) * IMG_C;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

static MASK_READS: AtomicU64 = AtomicU64::new(0);

#[cfg(test)]
pub(crate) mod test_support {
    use std::sync::{Mutex, MutexGuard};

    static MASK_COUNTER_LOCK: Mutex<()> = Mutex::new(());

    /// The mask-read counter is process-global, so tests that reset or assert
    /// on it (or that trigger reads, e.g. training with the attention loss
    /// on) must hold this lock to avoid cross-test interference.
    pub fn lock_mask_counter() -> MutexGuard<'static, ()> {
        MASK_COUNTER_LOCK.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Number of times any triplet's mask has been read through [`Triplet::mask`]
/// since the last reset. The mask-free inference contract is verified by
/// bracketing sampler runs with [`reset_mask_reads`] and this counter.
pub fn mask_reads() -> u64 {
    MASK_READS.load(Ordering::SeqCst)
}

pub fn reset_mask_reads() {
    MASK_READS.store(0, Ordering::SeqCst);
}

/// One supervised example: person, catalog garment, ground-truth try-on
/// result, patch-space garment mask, prompt, and the metadata that produced
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub person: Image,
    pub garment: Image,
    pub target: Image,
    mask_cells: Vec<u8>,
    pub prompt: Vec<u16>,
    pub pose: PoseSpec,
    pub source_spec: GarmentSpec,
    pub target_spec: GarmentSpec,
    pub identity_seed: u64,
}

impl Triplet {
    /// The training-time garment-region indicator M. Instrumented: every call
    /// bumps the global mask-read counter so tests can prove inference never
    /// touches it.
    pub fn mask(&self) -> &[u8] {
        MASK_READS.fetch_add(1, Ordering::SeqCst);
        &self.mask_cells
    }

    /// Uncounted access for serialization and test plumbing.
    pub(crate) fn mask_raw(&self) -> &[u8] {
        &self.mask_cells
    }

    pub(crate) fn from_parts(
        person: Image,
        garment: Image,
        target: Image,
        mask_cells: Vec<u8>,
        prompt: Vec<u16>,
        pose: PoseSpec,
        source_spec: GarmentSpec,
        target_spec: GarmentSpec,
        identity_seed: u64,
    ) -> Self {
        Triplet { person, garment, target, mask_cells, prompt, pose, source_spec, target_spec, identity_seed }
    }
}

// Stream salts for the independent per-triplet rng streams.
const STREAM_IDENTITY: u64 = 0;
const STREAM_POSE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_SOURCE: u64 = 3;
const TRIPLET_SALT: u64 = 0x7472_6970;
const PAIRING_SALT: u64 = 0x7061_6972;

/// Build one fully determined triplet from a seed.
pub fn make_triplet(rng_seed: u64) -> Triplet {
    let identity_seed = rng_for(rng_seed, TRIPLET_SALT, STREAM_IDENTITY).gen::<u64>();
    let pose = PoseSpec::sample(&mut rng_for(rng_seed, TRIPLET_SALT, STREAM_POSE));
    let target_spec = GarmentSpec::sample(&mut rng_for(rng_seed, TRIPLET_SALT, STREAM_TARGET));
    let mut source_rng = rng_for(rng_seed, TRIPLET_SALT, STREAM_SOURCE);
    let source_spec = loop {
        let s = GarmentSpec::sample(&mut source_rng);
        if s != target_spec {
            break s;
        }
    };

    let person = render_person(&pose, &source_spec, identity_seed);
    let (target, coverage) = render_person_with_coverage(&pose, &target_spec, identity_seed);
    let garment = render_catalog(&target_spec);
    let mask_cells = render::coverage_to_mask(&coverage);
    let prompt = prompt::prompt_from_spec(&target_spec);

    Triplet::from_parts(person, garment, target, mask_cells, prompt, pose, source_spec, target_spec, identity_seed)
}

/// Generate `n` triplets with per-item seeds `seed ^ index`.
pub fn build_triplets(n: usize, seed: u64) -> Vec<Triplet> {
    (0..n).map(|i| make_triplet(seed ^ i as u64)).collect()
}

/// Generate a dataset and write it to `path` in SMFD format.
pub fn build_dataset(n: usize, seed: u64, path: &std::path::Path) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let triplets = build_triplets(n, seed);
    io::write_dataset(path, &triplets)?;
    Ok(triplets)
}

/// What an unpaired-eval entry tries on: another record's garment, or a
/// freshly sampled spec when the dataset is too small to provide one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GarmentRef {
    Record(u32),
    Spec(GarmentSpec),
}

const GARMENT_REF_SPEC_BIT: u32 = 0x8000_0000;

impl GarmentRef {
    pub fn encode(self) -> u32 {
        match self {
            GarmentRef::Record(i) => i,
            GarmentRef::Spec(s) => GARMENT_REF_SPEC_BIT | s.pack() as u32,
        }
    }

    pub fn decode(v: u32) -> Result<Self> {
        if v & GARMENT_REF_SPEC_BIT == 0 {
            Ok(GarmentRef::Record(v))
        } else {
            Ok(GarmentRef::Spec(GarmentSpec::unpack((v & 0x7fff) as u16)?))
        }
    }
}

/// Fixed person-to-garment assignment for the unpaired evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct PairingList {
    pub seed: u64,
    /// (person record index, encoded garment ref) per entry, one per record.
    pub pairs: Vec<(u32, u32)>,
}

/// Assign each person a garment it is not already wearing, reproducibly.
/// Candidates are other records whose target garment differs from this
/// record's worn (source) garment; when none exists the entry falls back to a
/// fresh sampled spec, encoded with the high bit set.
pub fn build_pairing_list(triplets: &[Triplet], seed: u64) -> PairingList {
    let mut pairs = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let mut rng = rng_for(seed, PAIRING_SALT, i as u64);
        let candidates: Vec<u32> = triplets
            .iter()
            .enumerate()
            .filter(|(j, other)| *j != i && other.target_spec != t.source_spec)
            .map(|(j, _)| j as u32)
            .collect();
        let garment = if candidates.is_empty() {
            let spec = loop {
                let s = GarmentSpec::sample(&mut rng);
                if s != t.source_spec {
                    break s;
                }
            };
            GarmentRef::Spec(spec)
        } else {
            GarmentRef::Record(candidates[rng.gen_range(0..candidates.len())])
        };
        pairs.push((i as u32, garment.encode()));
    }
    PairingList { seed, pairs }
}

/// Seed for record `i` of a dataset built with root `seed`, exposed so other
/// components can re-derive ground truth for a record.
pub fn record_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Derived stream for uses that need a triplet-scoped but distinct rng.
pub fn triplet_stream(seed: u64, salt: u64) -> u64 {
    derive_seed(seed, TRIPLET_SALT, salt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_pack_roundtrip() {
        for kind in GarmentKind::ALL {
            for color in 0..6u8 {
                for pattern in [Pattern::Solid, Pattern::Stripes] {
                    for fit in [Fit::Regular, Fit::Tucked] {
                        let s = GarmentSpec { kind, color_index: color, pattern, fit };
                        assert_eq!(GarmentSpec::unpack(s.pack()).unwrap(), s);
                    }
                }
            }
        }
    }

    #[test]
    fn source_never_equals_target() {
        // Sampling mirrors make_triplet's spec streams; rendering is skipped
        // so the 10k-seed sweep stays fast.
        for seed in 0..10_000u64 {
            let target = GarmentSpec::sample(&mut rng_for(seed, TRIPLET_SALT, STREAM_TARGET));
            let mut source_rng = rng_for(seed, TRIPLET_SALT, STREAM_SOURCE);
            let source = loop {
                let s = GarmentSpec::sample(&mut source_rng);
                if s != target {
                    break s;
                }
            };
            assert_ne!(source, target, "seed {seed}");
        }
        for seed in 0..100u64 {
            let t = make_triplet(seed);
            assert_ne!(t.source_spec, t.target_spec, "seed {seed}");
        }
    }

    #[test]
    fn same_seed_identical_triplet() {
        let a = make_triplet(42);
        let b = make_triplet(42);
        assert_eq!(a, b);
        let c = make_triplet(43);
        assert_ne!(a, c);
    }

    #[test]
    fn person_and_target_agree_outside_garment_coverage() {
        for seed in [0u64, 7, 19, 131] {
            let t = make_triplet(seed);
            let (_, src_cov) = render_person_with_coverage(&t.pose, &t.source_spec, t.identity_seed);
            let (_, tgt_cov) = render_person_with_coverage(&t.pose, &t.target_spec, t.identity_seed);
            for y in 0..IMG_H {
                for x in 0..IMG_W {
                    let covered = src_cov.garment[y * IMG_W + x] || tgt_cov.garment[y * IMG_W + x];
                    if !covered {
                        assert_eq!(t.person.get(x, y), t.target.get(x, y), "seed {seed} pixel ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn mask_cells_binary_and_nonempty() {
        for seed in 0..50u64 {
            let t = make_triplet(seed);
            let m = t.mask_raw();
            assert_eq!(m.len(), GRID_H * GRID_W);
            assert!(m.iter().all(|&c| c == 0 || c == 1));
            assert!(m.iter().any(|&c| c == 1));
        }
    }

    #[test]
    fn mask_faithful_to_target_coverage() {
        for seed in [3u64, 77, 1234] {
            let t = make_triplet(seed);
            let (_, cov) = render_person_with_coverage(&t.pose, &t.target_spec, t.identity_seed);
            for gy in 0..GRID_H {
                for gx in 0..GRID_W {
                    let mut any = false;
                    for py in gy * PATCH..(gy + 1) * PATCH {
                        for px in gx * PATCH..(gx + 1) * PATCH {
                            any |= cov.garment[py * IMG_W + px];
                        }
                    }
                    assert_eq!(t.mask_raw()[gy * GRID_W + gx], any as u8, "seed {seed} cell ({gx},{gy})");
                }
            }
        }
    }

    #[test]
    fn mask_read_counter_counts() {
        let _guard = test_support::lock_mask_counter();
        let t = make_triplet(5);
        reset_mask_reads();
        assert_eq!(mask_reads(), 0);
        let _ = t.mask();
        let _ = t.mask();
        assert_eq!(mask_reads(), 2);
        let _ = t.mask_raw();
        assert_eq!(mask_reads(), 2);
        reset_mask_reads();
    }

    #[test]
    fn five_hundred_triplets_cover_every_kind_color_combo() {
        let triplets = build_triplets(500, 2024);
        let mut seen = [[false; 6]; 3];
        for t in &triplets {
            seen[t.target_spec.kind.as_u8() as usize][t.target_spec.color_index as usize] = true;
        }
        for kind in 0..3 {
            for color in 0..6 {
                assert!(seen[kind][color], "missing kind {kind} color {color}");
            }
        }
    }

    #[test]
    fn pairing_respects_garment_differs_constraint() {
        let triplets = build_triplets(24, 7);
        let list = build_pairing_list(&triplets, 99);
        assert_eq!(list.pairs.len(), 24);
        for &(pi, enc) in &list.pairs {
            let worn = triplets[pi as usize].source_spec;
            match GarmentRef::decode(enc).unwrap() {
                GarmentRef::Record(gi) => {
                    assert_ne!(gi, pi);
                    assert_ne!(triplets[gi as usize].target_spec, worn);
                }
                GarmentRef::Spec(s) => assert_ne!(s, worn),
            }
        }
        assert_eq!(build_pairing_list(&triplets, 99), list);
    }

    #[test]
    fn single_record_pairing_falls_back_to_fresh_spec() {
        let triplets = build_triplets(1, 3);
        let list = build_pairing_list(&triplets, 11);
        assert_eq!(list.pairs.len(), 1);
        match GarmentRef::decode(list.pairs[0].1).unwrap() {
            GarmentRef::Spec(s) => assert_ne!(s, triplets[0].source_spec),
            GarmentRef::Record(_) => panic!("n=1 pairing must fall back to a sampled spec"),
        }
    }

    #[test]
    fn garment_ref_encoding_roundtrip() {
        let r = GarmentRef::Record(17);
        assert_eq!(GarmentRef::decode(r.encode()).unwrap(), r);
        let s = GarmentRef::Spec(GarmentSpec {
            kind: GarmentKind::Dress,
            color_index: 4,
            pattern: Pattern::Stripes,
            fit: Fit::Regular,
        });
        assert_eq!(GarmentRef::decode(s.encode()).unwrap(), s);
    }
}
