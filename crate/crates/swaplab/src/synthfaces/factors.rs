//! Identity/attribute factor space.
//!
//! A face is fully determined by 8 identity factors and 9 attribute factors, each
//! confined to a documented closed interval. Identity factors are things a face
//! keeps across photographs (skin/eye color, proportions); attribute factors are
//! per-shot state (background, pose, expression, lighting, glasses). Keeping the
//! two groups disjoint is what makes swap quality measurable exactly.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SwapLabError};

/// One factor's name and closed interval.
#[derive(Debug, Clone, Copy)]
pub struct FactorDef {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

impl FactorDef {
    pub const fn new(name: &'static str, lo: f64, hi: f64) -> Self {
        FactorDef { name, lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn halfwidth(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

pub const TAU: f64 = std::f64::consts::TAU;

/// Identity factor table. Indices are stable and used throughout the crate.
pub const IDENTITY_DEFS: [FactorDef; 8] = [
    FactorDef::new("skin_hue", 0.02, 0.18),
    FactorDef::new("skin_saturation", 0.25, 0.70),
    FactorDef::new("eye_hue", 0.45, 0.80),
    FactorDef::new("face_width", 0.25, 0.42),
    FactorDef::new("face_height", 0.30, 0.47),
    FactorDef::new("eye_spacing", 0.14, 0.26),
    FactorDef::new("eye_size", 0.035, 0.080),
    FactorDef::new("brow_thickness", 0.012, 0.050),
];

/// Attribute factor table.
///
/// `lighting_direction` is circular on [0, τ); `glasses_flag` is binary {0,1};
/// `glasses_darkness` has no pixel effect while the flag is 0.
pub const ATTRIBUTE_DEFS: [FactorDef; 9] = [
    FactorDef::new("background_hue", 0.50, 0.95),
    FactorDef::new("background_brightness", 0.25, 0.65),
    FactorDef::new("pose_yaw", -0.5, 0.5),
    FactorDef::new("pose_pitch", -0.5, 0.5),
    FactorDef::new("mouth_curvature", -1.0, 1.0),
    FactorDef::new("lighting_direction", 0.0, TAU),
    FactorDef::new("lighting_strength", 0.0, 0.5),
    FactorDef::new("glasses_flag", 0.0, 1.0),
    FactorDef::new("glasses_darkness", 0.0, 1.0),
];

// Named indices into the factor arrays.
pub const ID_SKIN_HUE: usize = 0;
pub const ID_SKIN_SAT: usize = 1;
pub const ID_EYE_HUE: usize = 2;
pub const ID_FACE_WIDTH: usize = 3;
pub const ID_FACE_HEIGHT: usize = 4;
pub const ID_EYE_SPACING: usize = 5;
pub const ID_EYE_SIZE: usize = 6;
pub const ID_BROW_THICKNESS: usize = 7;

pub const AT_BG_HUE: usize = 0;
pub const AT_BG_BRIGHTNESS: usize = 1;
pub const AT_YAW: usize = 2;
pub const AT_PITCH: usize = 3;
pub const AT_MOUTH_CURVATURE: usize = 4;
pub const AT_LIGHT_DIRECTION: usize = 5;
pub const AT_LIGHT_STRENGTH: usize = 6;
pub const AT_GLASSES_FLAG: usize = 7;
pub const AT_GLASSES_DARKNESS: usize = 8;

/// Complete description of one renderable face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub identity: [f64; 8],
    pub attributes: [f64; 9],
}

impl FactorVector {
    /// Checks every field against its interval; the glasses flag must be exactly
    /// 0 or 1. Renderers and proxies call this before touching pixels.
    pub fn validate(&self) -> Result<()> {
        for (i, def) in IDENTITY_DEFS.iter().enumerate() {
            let v = self.identity[i];
            if !(v >= def.lo && v <= def.hi) || !v.is_finite() {
                return Err(SwapLabError::InvalidFactor {
                    name: def.name,
                    value: v,
                    lo: def.lo,
                    hi: def.hi,
                });
            }
        }
        for (i, def) in ATTRIBUTE_DEFS.iter().enumerate() {
            let v = self.attributes[i];
            if !(v >= def.lo && v <= def.hi) || !v.is_finite() {
                return Err(SwapLabError::InvalidFactor {
                    name: def.name,
                    value: v,
                    lo: def.lo,
                    hi: def.hi,
                });
            }
        }
        let flag = self.attributes[AT_GLASSES_FLAG];
        if flag != 0.0 && flag != 1.0 {
            return Err(SwapLabError::InvalidFactor {
                name: "glasses_flag",
                value: flag,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(())
    }

    /// Identity fields of `self` combined with attribute fields of `other`.
    pub fn with_attributes_of(&self, other: &FactorVector) -> FactorVector {
        FactorVector {
            identity: self.identity,
            attributes: other.attributes,
        }
    }

    /// Per-factor map of identity onto [-1, 1] (interval midpoint → 0).
    pub fn normalized_identity(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (i, def) in IDENTITY_DEFS.iter().enumerate() {
            out[i] = (self.identity[i] - def.mid()) / def.halfwidth();
        }
        out
    }

    /// Per-factor map of attributes onto [-1, 1].
    pub fn normalized_attributes(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (i, def) in ATTRIBUTE_DEFS.iter().enumerate() {
            out[i] = (self.attributes[i] - def.mid()) / def.halfwidth();
        }
        out
    }
}

/// Inverse of [`FactorVector::normalized_identity`] for one factor.
pub fn denormalize_identity(i: usize, n: f64) -> f64 {
    IDENTITY_DEFS[i].mid() + n * IDENTITY_DEFS[i].halfwidth()
}

/// Inverse of [`FactorVector::normalized_attributes`] for one factor.
pub fn denormalize_attribute(i: usize, n: f64) -> f64 {
    ATTRIBUTE_DEFS[i].mid() + n * ATTRIBUTE_DEFS[i].halfwidth()
}

/// Uniform draw of an identity block.
pub fn sample_identity(rng: &mut ChaCha12Rng) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (i, def) in IDENTITY_DEFS.iter().enumerate() {
        out[i] = rng.random_range(def.lo..def.hi);
    }
    out
}

/// Uniform draw of an attribute block (glasses flag is Bernoulli(½), direction
/// half-open on [0, τ)).
pub fn sample_attributes(rng: &mut ChaCha12Rng) -> [f64; 9] {
    let mut out = [0.0; 9];
    for (i, def) in ATTRIBUTE_DEFS.iter().enumerate() {
        out[i] = match i {
            AT_GLASSES_FLAG => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => rng.random_range(def.lo..def.hi),
        };
    }
    out
}

/// Uniform draw of a full factor vector.
pub fn sample_factors(rng: &mut ChaCha12Rng) -> FactorVector {
    // Identity first, then attributes: the draw order is part of the documented
    // seeding contract (equal seeds → equal vectors).
    let identity = sample_identity(rng);
    let attributes = sample_attributes(rng);
    FactorVector {
        identity,
        attributes,
    }
}

/// Two samples sharing an identity with independently drawn attributes.
///
/// Guarantees at least one attribute field differs by redrawing the second
/// attribute block on (measure-zero) full collision.
pub fn make_identity_pair(rng: &mut ChaCha12Rng) -> (FactorVector, FactorVector) {
    let identity = sample_identity(rng);
    let attrs_a = sample_attributes(rng);
    let mut attrs_b = sample_attributes(rng);
    while attrs_b == attrs_a {
        attrs_b = sample_attributes(rng);
    }
    (
        FactorVector {
            identity,
            attributes: attrs_a,
        },
        FactorVector {
            identity,
            attributes: attrs_b,
        },
    )
}
