//! Frozen palette, geometry, and grid constants for the procedural renderer.
//!
//! Everything visual in the dataset derives from the numbers in this file.
//! They are pinned by regression fixtures; changing any value is a format
//! break for previously generated datasets and checkpoints trained on them.

/// Image height in pixels.
pub const IMG_H: usize = 32;
/// Image width in pixels.
pub const IMG_W: usize = 32;
/// Color channels.
pub const IMG_C: usize = 3;
/// Side of a square model patch, in pixels.
pub const PATCH: usize = 4;
/// Patch-grid height (8).
pub const GRID_H: usize = IMG_H / PATCH;
/// Patch-grid width (8).
pub const GRID_W: usize = IMG_W / PATCH;
/// Image tokens per stream (64).
pub const N_IMG_TOKENS: usize = GRID_H * GRID_W;

/// The six garment colors, indexed by `GarmentSpec::color_index`.
pub const GARMENT_PALETTE: [[f32; 3]; 6] = [
    [0.80, 0.10, 0.10], // 0 red
    [0.10, 0.60, 0.20], // 1 green
    [0.15, 0.30, 0.80], // 2 blue
    [0.90, 0.80, 0.10], // 3 yellow
    [0.55, 0.20, 0.70], // 4 purple
    [0.05, 0.05, 0.05], // 5 black
];

/// Word used in prompts for each palette entry, same order as the palette.
pub const COLOR_WORDS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "black"];

/// Stripe bands alternate between the garment color and this white.
pub const STRIPE_WHITE: [f32; 3] = [1.0, 1.0, 1.0];

/// 1 px belt line drawn when a top is tucked in.
pub const WAISTLINE_COLOR: [f32; 3] = [0.20, 0.20, 0.20];

/// Skin tones; `identity_seed` picks one.
pub const SKIN_PALETTE: [[f32; 3]; 4] = [
    [0.98, 0.85, 0.72],
    [0.85, 0.65, 0.50],
    [0.65, 0.45, 0.32],
    [0.45, 0.30, 0.22],
];

/// Light background tints; `identity_seed` picks one.
pub const BG_PALETTE: [[f32; 3]; 4] = [
    [0.93, 0.93, 0.96],
    [0.96, 0.93, 0.90],
    [0.92, 0.95, 0.92],
    [0.95, 0.95, 0.93],
];

// Body geometry. Pixel (x, y) is tested at its center (x+0.5, y+0.5).
// The head stays strictly above every garment shape: garment pixels never
// rise above row 8, so patch rows 0 and 1 belong to head and background only.

/// Head disc center (x, y) and radius.
pub const HEAD_CENTER: (f32, f32) = (16.0, 5.0);
pub const HEAD_RADIUS: f32 = 2.9;

/// Torso rectangle: x in [TORSO_X0, TORSO_X1), y in [TORSO_Y0, TORSO_Y1).
pub const TORSO_X0: usize = 11;
pub const TORSO_X1: usize = 21;
pub const TORSO_Y0: usize = 9;
pub const TORSO_Y1: usize = 21;

/// Shoulder joints; arms hang from here, rotated outward by the pose angles.
pub const SHOULDER_L: (f32, f32) = (11.5, 10.0);
pub const SHOULDER_R: (f32, f32) = (20.5, 10.0);
/// Straight arms: the elbow splits the segment for short-sleeve coverage.
pub const UPPER_ARM_LEN: f32 = 5.0;
pub const LOWER_ARM_LEN: f32 = 5.0;
/// Capsule radius of bare arm pixels.
pub const ARM_RADIUS: f32 = 1.2;
/// Capsule radius of sleeve pixels (slightly wider than the arm).
pub const SLEEVE_RADIUS: f32 = 1.6;

/// Hip joints and leg capsules.
pub const HIP_L: (f32, f32) = (13.5, 21.0);
pub const HIP_R: (f32, f32) = (18.5, 21.0);
pub const LEG_LEN: f32 = 9.5;
pub const LEG_RADIUS: f32 = 1.4;

/// Dress skirt trapezoid: rows TORSO_Y1..SKIRT_Y1, half-width widening
/// linearly from SKIRT_HALF_TOP to SKIRT_HALF_BOTTOM around the torso center.
pub const SKIRT_Y1: usize = 27;
pub const SKIRT_HALF_TOP: f32 = 5.0;
pub const SKIRT_HALF_BOTTOM: f32 = 8.0;

/// Horizontal stripe bands are this many pixels tall, anchored at TORSO_Y0 so
/// every garment piece of one outfit shows the same banding.
pub const STRIPE_BAND_PX: i32 = 2;

/// Tucking shortens the torso hem by this many pixels and draws the waistline
/// on the row just below the shortened hem.
pub const TUCK_SHORTEN: usize = 3;

/// Catalog images render the garment at this fixed pose on pure white.
pub const CATALOG_POSE_ARM_ANGLE: f32 = 0.30;
