//! Deterministic rasterizer for person, try-on target, and catalog images.
//!
//! A pixel is painted by priority: garment (including the tucked waistline),
//! then bare body, then background. Coverage grids report exactly which
//! pixels the garment layer owns, so masks and consistency tests share one
//! source of truth with the images themselves.

use crate::rng::mix64;

use super::consts::*;
use super::{Fit, GarmentKind, GarmentSpec, Image, Pattern, PoseSpec};

/// Pixel-level layer ownership for one rendered person.
#[derive(Clone, Debug)]
pub struct Coverage {
    /// True where the garment layer painted the pixel.
    pub garment: Vec<bool>,
    /// True where bare body (skin) is visible.
    pub body: Vec<bool>,
}

/// Squared distance from point p to segment a-b.
fn seg_dist2(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    dx * dx + dy * dy
}

struct Skeleton {
    elbow_l: (f32, f32),
    wrist_l: (f32, f32),
    elbow_r: (f32, f32),
    wrist_r: (f32, f32),
    foot_l: (f32, f32),
    foot_r: (f32, f32),
}

impl Skeleton {
    fn from_pose(pose: &PoseSpec) -> Self {
        // Angle 0 hangs straight down; positive rotates away from the torso.
        let dir_l = (-pose.left_arm_angle.sin(), pose.left_arm_angle.cos());
        let dir_r = (pose.right_arm_angle.sin(), pose.right_arm_angle.cos());
        let elbow_l = (SHOULDER_L.0 + UPPER_ARM_LEN * dir_l.0, SHOULDER_L.1 + UPPER_ARM_LEN * dir_l.1);
        let wrist_l = (elbow_l.0 + LOWER_ARM_LEN * dir_l.0, elbow_l.1 + LOWER_ARM_LEN * dir_l.1);
        let elbow_r = (SHOULDER_R.0 + UPPER_ARM_LEN * dir_r.0, SHOULDER_R.1 + UPPER_ARM_LEN * dir_r.1);
        let wrist_r = (elbow_r.0 + LOWER_ARM_LEN * dir_r.0, elbow_r.1 + LOWER_ARM_LEN * dir_r.1);
        let leg_l = (-pose.leg_spread.sin(), pose.leg_spread.cos());
        let leg_r = (pose.leg_spread.sin(), pose.leg_spread.cos());
        let foot_l = (HIP_L.0 + LEG_LEN * leg_l.0, HIP_L.1 + LEG_LEN * leg_l.1);
        let foot_r = (HIP_R.0 + LEG_LEN * leg_r.0, HIP_R.1 + LEG_LEN * leg_r.1);
        Skeleton { elbow_l, wrist_l, elbow_r, wrist_r, foot_l, foot_r }
    }

    fn in_upper_arms(&self, p: (f32, f32), r: f32) -> bool {
        let r2 = r * r;
        seg_dist2(p, SHOULDER_L, self.elbow_l) <= r2 || seg_dist2(p, SHOULDER_R, self.elbow_r) <= r2
    }

    fn in_lower_arms(&self, p: (f32, f32), r: f32) -> bool {
        let r2 = r * r;
        seg_dist2(p, self.elbow_l, self.wrist_l) <= r2 || seg_dist2(p, self.elbow_r, self.wrist_r) <= r2
    }

    fn in_legs(&self, p: (f32, f32)) -> bool {
        let r2 = LEG_RADIUS * LEG_RADIUS;
        seg_dist2(p, HIP_L, self.foot_l) <= r2 || seg_dist2(p, HIP_R, self.foot_r) <= r2
    }
}

fn in_torso(x: usize, y: usize) -> bool {
    (TORSO_X0..TORSO_X1).contains(&x) && (TORSO_Y0..TORSO_Y1).contains(&y)
}

fn in_head(p: (f32, f32)) -> bool {
    let (dx, dy) = (p.0 - HEAD_CENTER.0, p.1 - HEAD_CENTER.1);
    dx * dx + dy * dy <= HEAD_RADIUS * HEAD_RADIUS
}

fn in_skirt(p: (f32, f32), y: usize) -> bool {
    if !(TORSO_Y1..SKIRT_Y1).contains(&y) {
        return false;
    }
    let span = (SKIRT_Y1 - TORSO_Y1) as f32;
    let half = SKIRT_HALF_TOP + (SKIRT_HALF_BOTTOM - SKIRT_HALF_TOP) * (y - TORSO_Y1) as f32 / span;
    let center = (TORSO_X0 + TORSO_X1) as f32 / 2.0;
    (p.0 - center).abs() <= half
}

/// The garment layer for one pixel: None, or the color to paint.
fn garment_pixel(x: usize, y: usize, p: (f32, f32), skel: &Skeleton, spec: &GarmentSpec) -> Option<[f32; 3]> {
    let spec = spec.canonical();
    let tucked = spec.fit == Fit::Tucked && spec.kind != GarmentKind::Dress;
    let hem = if tucked { TORSO_Y1 - TUCK_SHORTEN } else { TORSO_Y1 };

    if tucked && y == hem && (TORSO_X0..TORSO_X1).contains(&x) {
        return Some(WAISTLINE_COLOR);
    }

    let torso_garment = (TORSO_X0..TORSO_X1).contains(&x) && (TORSO_Y0..hem).contains(&y);
    let covered = match spec.kind {
        GarmentKind::Tshirt => torso_garment || skel.in_upper_arms(p, SLEEVE_RADIUS),
        GarmentKind::Longsleeve => {
            torso_garment || skel.in_upper_arms(p, SLEEVE_RADIUS) || skel.in_lower_arms(p, SLEEVE_RADIUS)
        }
        GarmentKind::Dress => torso_garment || in_skirt(p, y),
    };
    if !covered {
        return None;
    }
    let base = GARMENT_PALETTE[spec.color_index as usize];
    match spec.pattern {
        Pattern::Solid => Some(base),
        Pattern::Stripes => {
            // Bands counted from the torso top so every piece of the outfit
            // shows the same phase at a given row.
            let band = (y as i32 - TORSO_Y0 as i32).div_euclid(STRIPE_BAND_PX).rem_euclid(2);
            Some(if band == 0 { base } else { STRIPE_WHITE })
        }
    }
}

/// Render a posed person wearing `garment`, returning layer coverage too.
pub fn render_person_with_coverage(pose: &PoseSpec, garment: &GarmentSpec, identity_seed: u64) -> (Image, Coverage) {
    let mixed = mix64(identity_seed);
    let skin = SKIN_PALETTE[(mixed & 0b11) as usize];
    let bg = BG_PALETTE[((mixed >> 2) & 0b11) as usize];
    let skel = Skeleton::from_pose(pose);

    let mut img = Image::filled(bg);
    let mut cov = Coverage { garment: vec![false; IMG_H * IMG_W], body: vec![false; IMG_H * IMG_W] };
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            if let Some(rgb) = garment_pixel(x, y, p, &skel, garment) {
                img.set(x, y, rgb);
                cov.garment[y * IMG_W + x] = true;
            } else if in_head(p)
                || in_torso(x, y)
                || skel.in_upper_arms(p, ARM_RADIUS)
                || skel.in_lower_arms(p, ARM_RADIUS)
                || skel.in_legs(p)
            {
                img.set(x, y, skin);
                cov.body[y * IMG_W + x] = true;
            }
        }
    }
    (img, cov)
}

/// Render a posed person wearing `garment`.
pub fn render_person(pose: &PoseSpec, garment: &GarmentSpec, identity_seed: u64) -> Image {
    render_person_with_coverage(pose, garment, identity_seed).0
}

/// Catalog view: the garment alone at a fixed pose on pure white. Fit is
/// never visible here; tucking exists only in prompts and worn renderings.
pub fn render_catalog(garment: &GarmentSpec) -> Image {
    let pose = PoseSpec {
        left_arm_angle: CATALOG_POSE_ARM_ANGLE,
        right_arm_angle: CATALOG_POSE_ARM_ANGLE,
        leg_spread: 0.0,
    };
    let spec = GarmentSpec { fit: Fit::Regular, ..*garment };
    let skel = Skeleton::from_pose(&pose);
    let mut img = Image::filled([1.0, 1.0, 1.0]);
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            if let Some(rgb) = garment_pixel(x, y, p, &skel, &spec) {
                img.set(x, y, rgb);
            }
        }
    }
    img
}

/// Max-pool pixel garment coverage down to the patch grid.
pub fn coverage_to_mask(cov: &Coverage) -> Vec<u8> {
    let mut mask = vec![0u8; GRID_H * GRID_W];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            if cov.garment[y * IMG_W + x] {
                mask[(y / PATCH) * GRID_W + x / PATCH] = 1;
            }
        }
    }
    mask
}

/// Patch-space garment-region indicator for the target garment worn at
/// `pose`. Geometry does not depend on identity, so any seed gives the same
/// mask; 0 is used.
pub fn garment_mask(pose: &PoseSpec, garment: &GarmentSpec) -> Vec<u8> {
    let (_, cov) = render_person_with_coverage(pose, garment, 0);
    coverage_to_mask(&cov)
}

/// Pixels where a longsleeve and a t-shirt with the same color, pattern, and
/// `fit` render differently at `pose`: the visible part of the lower-arm
/// sleeves. Arms folded across the torso disappear behind the torso garment,
/// so this set can be empty, in which case the two kinds produce identical
/// images and no observer can tell them apart.
pub(crate) fn sleeve_difference_pixels(pose: &PoseSpec, fit: Fit) -> Vec<(usize, usize)> {
    let tshirt = GarmentSpec { kind: GarmentKind::Tshirt, color_index: 0, pattern: Pattern::Solid, fit };
    let long = GarmentSpec { kind: GarmentKind::Longsleeve, ..tshirt };
    let skel = Skeleton::from_pose(pose);
    let mut diff = Vec::new();
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            if garment_pixel(x, y, p, &skel, &tshirt) != garment_pixel(x, y, p, &skel, &long) {
                diff.push((x, y));
            }
        }
    }
    diff
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GarmentKind) -> GarmentSpec {
        GarmentSpec { kind, color_index: 0, pattern: Pattern::Solid, fit: Fit::Regular }
    }

    #[test]
    fn render_is_deterministic() {
        let pose = PoseSpec { left_arm_angle: -0.4, right_arm_angle: 0.2, leg_spread: 0.3 };
        let a = render_person(&pose, &spec(GarmentKind::Longsleeve), 77);
        let b = render_person(&pose, &spec(GarmentKind::Longsleeve), 77);
        assert_eq!(a, b);
        let c = render_catalog(&spec(GarmentKind::Dress));
        let d = render_catalog(&spec(GarmentKind::Dress));
        assert_eq!(c, d);
    }

    #[test]
    fn longsleeve_vs_tshirt_differ_exactly_on_lower_arm_sleeves() {
        let pose = PoseSpec::NEUTRAL;
        let seed = 5;
        let (short, short_cov) = render_person_with_coverage(&pose, &spec(GarmentKind::Tshirt), seed);
        let (long, long_cov) = render_person_with_coverage(&pose, &spec(GarmentKind::Longsleeve), seed);

        let mut diff = Vec::new();
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                if short.get(x, y) != long.get(x, y) {
                    diff.push((x, y));
                }
            }
        }
        // The long sleeve is the only geometry that changed, so differing
        // pixels must be exactly the garment pixels gained.
        let mut gained = Vec::new();
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                if long_cov.garment[y * IMG_W + x] && !short_cov.garment[y * IMG_W + x] {
                    gained.push((x, y));
                }
            }
        }
        assert_eq!(diff, gained);
        // Frozen fixture: lower-arm sleeve area at the neutral pose.
        assert_eq!(diff.len(), 32, "lower-arm sleeve pixel count changed");
        let skel = Skeleton::from_pose(&pose);
        for &(x, y) in &diff {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            assert!(skel.in_lower_arms(p, SLEEVE_RADIUS), "pixel ({x},{y}) is not on a lower arm");
        }
    }

    #[test]
    fn torso_color_matches_palette_for_every_color() {
        let pose = PoseSpec::NEUTRAL;
        for color in 0..6u8 {
            for kind in GarmentKind::ALL {
                let g = GarmentSpec { kind, color_index: color, pattern: Pattern::Solid, fit: Fit::Regular };
                let img = render_person(&pose, &g, 9);
                // Center of the chest is garment for every kind.
                assert_eq!(img.get(16, 10), GARMENT_PALETTE[color as usize]);
            }
        }
    }

    #[test]
    fn catalog_corners_are_pure_white() {
        for kind in GarmentKind::ALL {
            let img = render_catalog(&spec(kind));
            for (x, y) in [(0, 0), (IMG_W - 1, 0), (0, IMG_H - 1), (IMG_W - 1, IMG_H - 1)] {
                assert_eq!(img.get(x, y), [1.0, 1.0, 1.0]);
            }
        }
    }

    #[test]
    fn dress_catalog_has_more_nonwhite_than_tshirt() {
        let count_nonwhite = |img: &Image| {
            let mut n = 0;
            for y in 0..IMG_H {
                for x in 0..IMG_W {
                    if img.get(x, y) != [1.0, 1.0, 1.0] {
                        n += 1;
                    }
                }
            }
            n
        };
        let dress = count_nonwhite(&render_catalog(&spec(GarmentKind::Dress)));
        let tshirt = count_nonwhite(&render_catalog(&spec(GarmentKind::Tshirt)));
        assert!(dress > tshirt, "dress {dress} <= tshirt {tshirt}");
        // Frozen fixture counts.
        assert_eq!(tshirt, 148);
        assert_eq!(dress, 198);
    }

    #[test]
    fn dress_mask_superset_of_tshirt_mask() {
        let pose = PoseSpec::NEUTRAL;
        let dress = garment_mask(&pose, &spec(GarmentKind::Dress));
        let tshirt = garment_mask(&pose, &spec(GarmentKind::Tshirt));
        let mut strictly_more = false;
        for i in 0..dress.len() {
            assert!(dress[i] >= tshirt[i], "cell {i}: tshirt on but dress off");
            strictly_more |= dress[i] > tshirt[i];
        }
        assert!(strictly_more);
    }

    #[test]
    fn no_garment_mask_touches_head_rows() {
        // Head pixels end above row 8; patch rows 0 and 1 must stay clear for
        // every kind, fit, and pose extreme.
        let poses = [
            PoseSpec { left_arm_angle: 0.0, right_arm_angle: 0.0, leg_spread: 0.0 },
            PoseSpec {
                left_arm_angle: super::super::ARM_ANGLE_MAX,
                right_arm_angle: -super::super::ARM_ANGLE_MAX,
                leg_spread: super::super::LEG_SPREAD_MAX,
            },
            PoseSpec::NEUTRAL,
        ];
        for pose in &poses {
            for kind in GarmentKind::ALL {
                for fit in [Fit::Regular, Fit::Tucked] {
                    let g = GarmentSpec { kind, color_index: 2, pattern: Pattern::Stripes, fit };
                    let mask = garment_mask(pose, &g);
                    for cell in &mask[..2 * GRID_W] {
                        assert_eq!(*cell, 0, "garment bled into head rows: {g:?} {pose:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn tucked_fit_shows_waistline_and_shorter_hem() {
        let pose = PoseSpec::NEUTRAL;
        let tucked = GarmentSpec { fit: Fit::Tucked, ..spec(GarmentKind::Tshirt) };
        let img = render_person(&pose, &tucked, 3);
        let hem = TORSO_Y1 - TUCK_SHORTEN;
        assert_eq!(img.get(16, hem), WAISTLINE_COLOR);
        // Rows below the waistline show skin, not garment.
        let regular = render_person(&pose, &spec(GarmentKind::Tshirt), 3);
        assert_eq!(regular.get(16, hem + 1), GARMENT_PALETTE[0]);
        assert_ne!(img.get(16, hem + 1), GARMENT_PALETTE[0]);
    }

    #[test]
    fn stripes_alternate_in_two_pixel_bands() {
        let pose = PoseSpec::NEUTRAL;
        let striped = GarmentSpec { pattern: Pattern::Stripes, ..spec(GarmentKind::Tshirt) };
        let img = render_person(&pose, &striped, 3);
        // Torso top at TORSO_Y0: band 0 colored, band 1 white, and so on.
        assert_eq!(img.get(16, TORSO_Y0), GARMENT_PALETTE[0]);
        assert_eq!(img.get(16, TORSO_Y0 + 1), GARMENT_PALETTE[0]);
        assert_eq!(img.get(16, TORSO_Y0 + 2), STRIPE_WHITE);
        assert_eq!(img.get(16, TORSO_Y0 + 3), STRIPE_WHITE);
        assert_eq!(img.get(16, TORSO_Y0 + 4), GARMENT_PALETTE[0]);
    }

    #[test]
    fn all_pixel_values_stay_in_unit_range() {
        for seed in 0..20u64 {
            let t = super::super::make_triplet(seed);
            for img in [&t.person, &t.garment, &t.target] {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
            }
        }
    }
}
