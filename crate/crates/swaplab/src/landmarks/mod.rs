//! Keypoint extraction, identity/pose recombination, and landmark-map
//! rendering.
//!
//! Keypoints are derived from the same [`FaceGeometry`] the face renderer
//! uses, so "landmarks match the drawn face" holds exactly instead of up to a
//! detector error. A coefficient set keeps the geometric identity separate
//! from pose and expression, which is what lets a swap borrow one face's
//! proportions while following another's motion.

use serde::{Deserialize, Serialize};

use crate::synthfaces::factors::{FactorVector, AT_MOUTH_CURVATURE, AT_PITCH, AT_YAW};
use crate::synthfaces::geometry::{FaceGeometry, IMG_SIZE};
use crate::tensor::Tensor;

/// Total keypoints: 12 face-boundary samples, 2 eye centers, 5 mouth-arc
/// samples.
pub const NUM_LANDMARKS: usize = 19;

/// Geometry coefficients: identity proportions plus the two pose angles and
/// the one expression parameter that move keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub identity: [f64; 8],
    pub yaw: f64,
    pub pitch: f64,
    pub curvature: f64,
}

/// Reads the coefficient set off a factor vector.
pub fn extract(f: &FactorVector) -> CoefficientSet {
    CoefficientSet {
        identity: f.identity,
        yaw: f.attributes[AT_YAW],
        pitch: f.attributes[AT_PITCH],
        curvature: f.attributes[AT_MOUTH_CURVATURE],
    }
}

/// Identity proportions from `source`, pose and expression from `target` —
/// the landmark conditioning for rendering `source`'s face doing what
/// `target` is doing.
pub fn recombine(source: &CoefficientSet, target: &CoefficientSet) -> CoefficientSet {
    CoefficientSet {
        identity: source.identity,
        yaw: target.yaw,
        pitch: target.pitch,
        curvature: target.curvature,
    }
}

fn geometry_of(c: &CoefficientSet) -> FaceGeometry {
    FaceGeometry::from_parts(&c.identity, c.yaw, c.pitch, c.curvature)
}

/// Keypoint positions in image coordinates (shear applied).
///
/// Layout: [0, 12) face boundary at equally spaced parameter angles, [12, 14)
/// eye centers (left, right), [14, 19) mouth arc at s ∈ {-1, -½, 0, ½, 1}.
pub fn landmark_points(c: &CoefficientSet) -> [(f64, f64); NUM_LANDMARKS] {
    let g = geometry_of(c);
    let mut pts = [(0.0, 0.0); NUM_LANDMARKS];
    for k in 0..12 {
        let theta = std::f64::consts::TAU * k as f64 / 12.0;
        pts[k] = g.sheared(g.face_boundary_point(theta));
    }
    pts[12] = g.sheared(g.eye_centers[0]);
    pts[13] = g.sheared(g.eye_centers[1]);
    for (i, s) in [-1.0, -0.5, 0.0, 0.5, 1.0].into_iter().enumerate() {
        pts[14 + i] = g.sheared(g.mouth_point(s));
    }
    pts
}

/// Channel index each keypoint is drawn into: boundary → 0, eyes → 1,
/// mouth → 2.
pub fn landmark_channel(index: usize) -> usize {
    match index {
        0..=11 => 0,
        12 | 13 => 1,
        _ => 2,
    }
}

/// Renders keypoints as a [3, 64, 64] map: each point deposits a bilinear
/// unit splat into its channel on a black canvas, preserving subpixel
/// position. Distinct feature groups live in distinct channels so a consumer
/// never has to guess which dot is which.
pub fn render_landmarks(c: &CoefficientSet) -> Tensor {
    let mut img = Tensor::zeros(&[3, IMG_SIZE, IMG_SIZE]);
    let plane = IMG_SIZE * IMG_SIZE;
    for (i, (x, y)) in landmark_points(c).into_iter().enumerate() {
        let ch = landmark_channel(i);
        // Bilinear split around the point's continuous position; pixel (ix, iy)
        // covers centers at (ix + 0.5, iy + 0.5).
        let fx = x - 0.5;
        let fy = y - 0.5;
        let ix = fx.floor();
        let iy = fy.floor();
        let dx = fx - ix;
        let dy = fy - iy;
        for (ox, oy, w) in [
            (0, 0, (1.0 - dx) * (1.0 - dy)),
            (1, 0, dx * (1.0 - dy)),
            (0, 1, (1.0 - dx) * dy),
            (1, 1, dx * dy),
        ] {
            let px = ix as isize + ox;
            let py = iy as isize + oy;
            if px >= 0 && py >= 0 && (px as usize) < IMG_SIZE && (py as usize) < IMG_SIZE {
                img.data[ch * plane + py as usize * IMG_SIZE + px as usize] += w;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthfaces::factors::{sample_factors, AT_GLASSES_FLAG, ID_EYE_SIZE};
    use crate::synthfaces::render::{hsv_to_rgb, render, IMG_PIXELS};
    use crate::util::rng_for;

    #[test]
    fn eye_keypoints_coincide_with_rendered_eye_centers() {
        for i in 0..100 {
            let f = sample_factors(&mut rng_for(31, "lm", i));
            let g = FaceGeometry::from_factors(&f);
            let pts = landmark_points(&extract(&f));
            for (k, eye) in g.eye_centers.iter().enumerate() {
                let expected = g.sheared(*eye);
                assert_eq!(pts[12 + k], expected, "eye keypoint diverged from renderer geometry");
            }
        }
    }

    #[test]
    fn boundary_keypoints_lie_on_the_drawn_face_edge() {
        // With glasses off and small eyes, face-boundary pixels are pure
        // background/skin blends, so each boundary keypoint must land in the
        // anti-aliasing band: its pixel color sits between the two layers.
        let mut f = sample_factors(&mut rng_for(31, "edge", 3));
        f.attributes[AT_GLASSES_FLAG] = 0.0;
        f.attributes[crate::synthfaces::factors::AT_LIGHT_STRENGTH] = 0.0;
        f.identity[ID_EYE_SIZE] = 0.04;
        let img = render(&f).unwrap();
        let bg = hsv_to_rgb(
            f.attributes[crate::synthfaces::factors::AT_BG_HUE],
            0.40,
            f.attributes[crate::synthfaces::factors::AT_BG_BRIGHTNESS],
        );
        let face = hsv_to_rgb(
            f.identity[crate::synthfaces::factors::ID_SKIN_HUE],
            f.identity[crate::synthfaces::factors::ID_SKIN_SAT],
            0.62,
        );
        let pts = landmark_points(&extract(&f));
        for (i, (x, y)) in pts.iter().enumerate().take(12) {
            let (ix, iy) = (x.floor() as usize, y.floor() as usize);
            for ch in 0..3 {
                let v = img.data[ch * IMG_PIXELS + iy * IMG_SIZE + ix];
                let (lo, hi) = (bg[ch].min(face[ch]), bg[ch].max(face[ch]));
                assert!(
                    v >= lo - 1e-9 && v <= hi + 1e-9,
                    "boundary keypoint {i} at ({ix},{iy}) channel {ch}: {v} outside [{lo},{hi}]"
                );
            }
        }
    }

    #[test]
    fn recombine_splits_identity_from_pose_and_expression() {
        let a = extract(&sample_factors(&mut rng_for(32, "rc", 0)));
        let b = extract(&sample_factors(&mut rng_for(32, "rc", 1)));
        let r = recombine(&a, &b);
        assert_eq!(r.identity, a.identity);
        assert_eq!((r.yaw, r.pitch, r.curvature), (b.yaw, b.pitch, b.curvature));
        // Recombining with itself is the identity operation.
        assert_eq!(recombine(&a, &a), a);
    }

    #[test]
    fn recombined_coefficients_match_direct_extraction_of_the_swap() {
        // Building the swapped face's factors first and extracting, versus
        // extracting both and recombining, must agree exactly.
        let src = sample_factors(&mut rng_for(32, "rc2", 0));
        let tgt = sample_factors(&mut rng_for(32, "rc2", 1));
        let swapped = src.with_attributes_of(&tgt);
        assert_eq!(extract(&swapped), recombine(&extract(&src), &extract(&tgt)));
    }

    #[test]
    fn landmark_map_is_typed_and_mass_preserving() {
        let c = extract(&sample_factors(&mut rng_for(33, "map", 0)));
        let img = render_landmarks(&c);
        let plane = IMG_SIZE * IMG_SIZE;
        for (ch, expected) in [(0usize, 12.0), (1, 2.0), (2, 5.0)] {
            let mass: f64 = img.data[ch * plane..(ch + 1) * plane].iter().sum();
            assert!(
                (mass - expected).abs() < 1e-9,
                "channel {ch} mass {mass}, expected {expected}"
            );
        }
        assert!(img.data.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&v)));
    }

    #[test]
    fn landmark_map_moves_with_subpixel_pose_changes() {
        let mut f = sample_factors(&mut rng_for(33, "sub", 0));
        f.attributes[AT_YAW] = 0.0;
        let a = render_landmarks(&extract(&f));
        f.attributes[AT_YAW] = 0.01;
        let b = render_landmarks(&extract(&f));
        let total_shift: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
        assert!(total_shift > 0.0, "subpixel pose change was quantized away");
        let max_jump = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_jump < 0.5, "splat jumped discontinuously: {max_jump}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let c = extract(&sample_factors(&mut rng_for(33, "det", 0)));
        assert_eq!(render_landmarks(&c).data, render_landmarks(&c).data);
    }
}
