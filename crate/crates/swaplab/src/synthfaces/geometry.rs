//! Face geometry shared by the renderer and the landmark extractor.
//!
//! Both consumers derive every screen-space position from this one struct, so
//! keypoints and drawn features agree by construction rather than by tolerance.
//!
//! Coordinate model: the face lives in an *unsheared* frame; yaw additionally
//! shears the whole face horizontally around the face center (`x += shear·(y -
//! cy)`). Feature shapes are defined unsheared; `sheared(point)` maps any
//! unsheared point to final image coordinates. Pixel (ix, iy) has continuous
//! center (ix + 0.5, iy + 0.5).

use super::factors::{
    FactorVector, AT_MOUTH_CURVATURE, AT_PITCH, AT_YAW, ID_BROW_THICKNESS, ID_EYE_SIZE,
    ID_EYE_SPACING, ID_FACE_HEIGHT, ID_FACE_WIDTH,
};

/// Output image side length in pixels.
pub const IMG_SIZE: usize = 64;

/// All scalar geometry for one face, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceGeometry {
    /// Face center (already includes pose translation).
    pub cx: f64,
    pub cy: f64,
    /// Horizontal shear per vertical pixel from yaw.
    pub shear: f64,
    /// Face ellipse semi-axes (x, y).
    pub a: f64,
    pub b: f64,
    /// Unsheared eye centers: [left, right] as seen in the image.
    pub eye_centers: [(f64, f64); 2],
    /// Eye ellipse semi-axes (x, y).
    pub eye_rx: f64,
    pub eye_ry: f64,
    /// Brow bar: center y, half-width, full thickness.
    pub brow_y: f64,
    pub brow_half_width: f64,
    pub brow_thickness: f64,
    /// Mouth arc: center y at s=±1 endpoints' chord, half-width, bow amplitude
    /// (signed, px), stroke thickness.
    pub mouth_y: f64,
    pub mouth_half_width: f64,
    pub mouth_bow: f64,
    pub mouth_thickness: f64,
    /// Glasses: lens half-extents and frame stroke thickness.
    pub lens_half_w: f64,
    pub lens_half_h: f64,
    pub frame_thickness: f64,
}

impl FaceGeometry {
    /// Geometry from identity proportions plus pose and expression.
    ///
    /// This signature exists so the landmark pipeline can mix identity from one
    /// face with pose/expression from another; [`FaceGeometry::from_factors`]
    /// is the common single-face case.
    pub fn from_parts(identity: &[f64; 8], yaw: f64, pitch: f64, curvature: f64) -> Self {
        let cx = 32.0 + 6.0 * yaw;
        let cy = 32.0 + 5.0 * pitch;
        let shear = 0.35 * yaw;
        let a = 48.0 * identity[ID_FACE_WIDTH];
        let b = 48.0 * identity[ID_FACE_HEIGHT];
        let eye_dx = 32.0 * identity[ID_EYE_SPACING];
        // 0.22·b keeps brows inside the ellipse vertically even for the
        // shortest face paired with the largest eyes.
        let eye_y = cy - 0.22 * b;
        let eye_rx = 64.0 * identity[ID_EYE_SIZE];
        let eye_ry = 0.65 * eye_rx;
        FaceGeometry {
            cx,
            cy,
            shear,
            a,
            b,
            eye_centers: [(cx - eye_dx, eye_y), (cx + eye_dx, eye_y)],
            eye_rx,
            eye_ry,
            brow_y: eye_y - 1.5 * eye_rx,
            brow_half_width: 1.35 * eye_rx,
            brow_thickness: 64.0 * identity[ID_BROW_THICKNESS],
            mouth_y: cy + 0.52 * b,
            mouth_half_width: 0.55 * a,
            mouth_bow: 3.2 * curvature,
            mouth_thickness: 1.3,
            lens_half_w: 1.55 * eye_rx,
            lens_half_h: 1.15 * eye_rx,
            frame_thickness: 0.9,
        }
    }

    pub fn from_factors(f: &FactorVector) -> Self {
        Self::from_parts(
            &f.identity,
            f.attributes[AT_YAW],
            f.attributes[AT_PITCH],
            f.attributes[AT_MOUTH_CURVATURE],
        )
    }

    /// Maps an unsheared point to image coordinates.
    pub fn sheared(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 + self.shear * (p.1 - self.cy), p.1)
    }

    /// Inverse of [`FaceGeometry::sheared`]: image x back to the unsheared frame.
    pub fn unshear_x(&self, x: f64, y: f64) -> f64 {
        x - self.shear * (y - self.cy)
    }

    /// Point on the face ellipse boundary at parameter angle `theta` (unsheared).
    pub fn face_boundary_point(&self, theta: f64) -> (f64, f64) {
        (self.cx + self.a * theta.cos(), self.cy + self.b * theta.sin())
    }

    /// Point on the mouth arc at parameter s ∈ [-1, 1] (unsheared).
    ///
    /// The arc is a parabola: endpoints sit `bow/2` above the chord through
    /// `mouth_y` and the middle `bow/2` below it (for positive bow), so the
    /// vertical extent is symmetric about `mouth_y` for every curvature.
    pub fn mouth_point(&self, s: f64) -> (f64, f64) {
        (
            self.cx + s * self.mouth_half_width,
            self.mouth_y + self.mouth_bow * (s * s - 0.5),
        )
    }

    /// Bridge bar of the glasses as (center, half-extents), unsheared, or None
    /// when the lenses touch or overlap.
    pub fn glasses_bridge(&self) -> Option<((f64, f64), (f64, f64))> {
        let inner_l = self.eye_centers[0].0 + self.lens_half_w;
        let inner_r = self.eye_centers[1].0 - self.lens_half_w;
        if inner_r <= inner_l {
            return None;
        }
        let y = self.eye_centers[0].1;
        Some((
            (0.5 * (inner_l + inner_r), y),
            (0.5 * (inner_r - inner_l), 0.5 * self.frame_thickness),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthfaces::factors::sample_factors;
    use crate::util::rng_for;

    #[test]
    fn neutral_pose_is_centered_and_unsheared() {
        let mut f = sample_factors(&mut rng_for(1, "geo", 0));
        f.attributes[AT_YAW] = 0.0;
        f.attributes[AT_PITCH] = 0.0;
        let g = FaceGeometry::from_factors(&f);
        assert_eq!((g.cx, g.cy), (32.0, 32.0));
        assert_eq!(g.shear, 0.0);
        let p = (10.0, 50.0);
        assert_eq!(g.sheared(p), p);
    }

    #[test]
    fn shear_round_trips() {
        let f = sample_factors(&mut rng_for(1, "geo", 1));
        let g = FaceGeometry::from_factors(&f);
        let p = (20.25, 47.5);
        let s = g.sheared(p);
        assert!((g.unshear_x(s.0, s.1) - p.0).abs() < 1e-12);
    }

    #[test]
    fn features_stay_inside_the_image_at_extremes() {
        // Worst case: widest/tallest face, extreme pose. Everything the renderer
        // draws must stay within the 64×64 canvas (with AA margin 1px).
        for (yaw, pitch) in [(0.5, 0.5), (-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5)] {
            let identity = [0.18, 0.70, 0.80, 0.42, 0.47, 0.26, 0.080, 0.050];
            let g = FaceGeometry::from_parts(&identity, yaw, pitch, 1.0);
            for i in 0..=64 {
                let theta = std::f64::consts::TAU * i as f64 / 64.0;
                let (x, y) = g.sheared(g.face_boundary_point(theta));
                assert!(x > 1.0 && x < 63.0, "boundary x {x} out of canvas");
                assert!(y > 1.0 && y < 63.0, "boundary y {y} out of canvas");
            }
            // Glasses reach furthest sideways of all features.
            for (ex, ey) in g.eye_centers {
                let (x, _) = g.sheared((ex - g.lens_half_w - g.frame_thickness, ey));
                assert!(x > 1.0);
                let (x, _) = g.sheared((ex + g.lens_half_w + g.frame_thickness, ey));
                assert!(x < 63.0);
            }
        }
    }

    #[test]
    fn mouth_arc_is_symmetric_and_bowed() {
        let f = sample_factors(&mut rng_for(1, "geo", 2));
        let g = FaceGeometry::from_factors(&f);
        let l = g.mouth_point(-1.0);
        let r = g.mouth_point(1.0);
        let m = g.mouth_point(0.0);
        assert!((l.1 - r.1).abs() < 1e-12);
        assert!(((l.0 + r.0) * 0.5 - g.cx).abs() < 1e-12);
        // Midpoint offset equals the negated endpoint offset around mouth_y.
        assert!(((m.1 - g.mouth_y) + (l.1 - g.mouth_y)).abs() < 1e-12);
    }

    #[test]
    fn ordering_of_vertical_features_is_stable() {
        // Brows above eyes above mouth for every valid identity/pose.
        for i in 0..200 {
            let f = sample_factors(&mut rng_for(2, "geo-ord", i));
            let g = FaceGeometry::from_factors(&f);
            assert!(g.brow_y < g.eye_centers[0].1);
            assert!(g.eye_centers[0].1 < g.mouth_y - g.mouth_bow.abs() - 1.0);
            assert!(g.eye_centers[0].0 < g.eye_centers[1].0);
        }
    }
}
