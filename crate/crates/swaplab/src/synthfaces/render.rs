//! Layered face renderer with analytic anti-aliasing, plus region masks.
//!
//! Layer order per pixel: background → face ellipse → eyes → brows → mouth →
//! glasses ink → multiplicative lighting. Every layer is composited with a
//! fractional coverage derived from a signed distance (1-pixel linear falloff),
//! so subpixel geometry changes move pixel values continuously instead of
//! flipping them. Base colors are chosen so the lighting product never leaves
//! [0, 1]: the final clamp is provably a no-op, which keeps the pixel model
//! exactly multiplicative.
//!
//! The region-mask functions answer "which pixels may a given factor group
//! touch"; they are supersets of the true support and depend only on geometry,
//! never on the factor being varied (the mouth mask sweeps curvature, the
//! glasses mask ignores the flag).

use super::factors::{
    FactorVector, AT_BG_BRIGHTNESS, AT_BG_HUE, AT_GLASSES_DARKNESS, AT_GLASSES_FLAG,
    AT_LIGHT_DIRECTION, AT_LIGHT_STRENGTH, AT_PITCH, AT_YAW, ID_EYE_HUE, ID_SKIN_HUE, ID_SKIN_SAT,
};
use super::geometry::{FaceGeometry, IMG_SIZE};
use crate::tensor::Tensor;
use crate::Result;

/// Number of pixels per channel.
pub const IMG_PIXELS: usize = IMG_SIZE * IMG_SIZE;

/// HSV → RGB, all components in [0, 1]; hue wraps.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h.floor() as usize).min(5);
    let f = h - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Coverage for a signed distance: 1 well inside, 0 well outside, linear
/// across the 1-pixel band around the boundary.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// Approximate signed distance (pixels) to an ellipse evaluated in the
/// unsheared frame; the gradient accounts for the shear of image x.
fn ellipse_distance(g: &FaceGeometry, xu: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let u = (xu - cx) / rx;
    let v = (y - cy) / ry;
    let f = u * u + v * v - 1.0;
    let gx = 2.0 * u / rx;
    let gy = -2.0 * u * g.shear / rx + 2.0 * v / ry;
    f / (gx * gx + gy * gy).sqrt().max(1e-9)
}

/// Signed distance to an axis-aligned rectangle given center and half-extents.
fn rect_distance(x: f64, y: f64, cx: f64, cy: f64, hw: f64, hh: f64) -> f64 {
    let dx = (x - cx).abs() - hw;
    let dy = (y - cy).abs() - hh;
    if dx > 0.0 && dy > 0.0 {
        (dx * dx + dy * dy).sqrt()
    } else {
        dx.max(dy)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Distance from an unsheared point to the mouth arc centerline (polyline of
/// 32 segments — well under the AA band at this arc curvature).
fn mouth_distance(g: &FaceGeometry, xu: f64, y: f64) -> f64 {
    let mut prev = g.mouth_point(-1.0);
    let mut best = f64::INFINITY;
    for i in 1..=32 {
        let s = -1.0 + i as f64 / 16.0;
        let next = g.mouth_point(s);
        best = best.min(segment_distance((xu, y), prev, next));
        prev = next;
    }
    best
}

/// Glasses ink at an unsheared point: (frame stroke coverage, lens interior
/// coverage). Pure geometry — the caller decides whether glasses are worn.
fn glasses_ink(g: &FaceGeometry, xu: f64, y: f64) -> (f64, f64) {
    let mut frame: f64 = 0.0;
    let mut lens: f64 = 0.0;
    for (ex, ey) in g.eye_centers {
        let d = rect_distance(xu, y, ex, ey, g.lens_half_w, g.lens_half_h);
        frame = frame.max(coverage(d.abs() - 0.5 * g.frame_thickness));
        lens = lens.max(coverage(d));
    }
    if let Some(((bx, by), (bhw, bhh))) = g.glasses_bridge() {
        frame = frame.max(coverage(rect_distance(xu, y, bx, by, bhw, bhh)));
    }
    (frame, lens)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    // Two-product form: exact at alpha 0 and 1, so a fully covering layer
    // erases the layers below to the last bit (region confinement depends on
    // this).
    for i in 0..3 {
        dst[i] = dst[i] * (1.0 - alpha) + src[i] * alpha;
    }
}

/// Renders a factor vector to a [3, 64, 64] image with values in [0, 1].
///
/// Pure and deterministic: equal inputs produce bit-identical tensors.
pub fn render(f: &FactorVector) -> Result<Tensor> {
    f.validate()?;
    let g = FaceGeometry::from_factors(f);
    let bg = hsv_to_rgb(f.attributes[AT_BG_HUE], 0.40, f.attributes[AT_BG_BRIGHTNESS]);
    let face_col = hsv_to_rgb(f.identity[ID_SKIN_HUE], f.identity[ID_SKIN_SAT], 0.62);
    let eye_col = hsv_to_rgb(f.identity[ID_EYE_HUE], 0.60, 0.50);
    let brow_col = [0.12; 3];
    let mouth_col = hsv_to_rgb(0.98, 0.55, 0.45);
    let ink_col = [0.10; 3];
    let lens_alpha = 0.15 + 0.55 * f.attributes[AT_GLASSES_DARKNESS];
    let glasses_on = f.attributes[AT_GLASSES_FLAG] == 1.0;
    let strength = f.attributes[AT_LIGHT_STRENGTH];
    let (ldx, ldy) = (
        f.attributes[AT_LIGHT_DIRECTION].cos(),
        f.attributes[AT_LIGHT_DIRECTION].sin(),
    );

    let mut img = Tensor::zeros(&[3, IMG_SIZE, IMG_SIZE]);
    for iy in 0..IMG_SIZE {
        let y = iy as f64 + 0.5;
        for ix in 0..IMG_SIZE {
            let x = ix as f64 + 0.5;
            let xu = g.unshear_x(x, y);

            let mut c = bg;
            blend(&mut c, face_col, coverage(ellipse_distance(&g, xu, y, g.cx, g.cy, g.a, g.b)));
            for (ex, ey) in g.eye_centers {
                let d = ellipse_distance(&g, xu, y, ex, ey, g.eye_rx, g.eye_ry);
                blend(&mut c, eye_col, coverage(d));
                let bd = rect_distance(xu, y, ex, g.brow_y, g.brow_half_width, 0.5 * g.brow_thickness);
                blend(&mut c, brow_col, coverage(bd));
            }
            blend(
                &mut c,
                mouth_col,
                coverage(mouth_distance(&g, xu, y) - 0.5 * g.mouth_thickness),
            );
            if glasses_on {
                let (frame, lens) = glasses_ink(&g, xu, y);
                blend(&mut c, ink_col, lens_alpha * lens);
                blend(&mut c, ink_col, frame);
            }

            // Lighting: 1 + strength · (unit position · light direction) / √2.
            // Base colors cap at 0.65 and |strength| ≤ 0.5, so c·l stays inside
            // (0, 1) and the clamp below never actually bites.
            let nx = (x - 32.0) / 32.0;
            let ny = (y - 32.0) / 32.0;
            let l = 1.0 + strength * (nx * ldx + ny * ldy) * std::f64::consts::FRAC_1_SQRT_2;
            let base = iy * IMG_SIZE + ix;
            for ch in 0..3 {
                img.data[ch * IMG_PIXELS + base] = (c[ch] * l).clamp(0.0, 1.0);
            }
        }
    }
    Ok(img)
}

/// Per-pixel iteration helper shared by the mask builders.
fn pixel_mask(mut f: impl FnMut(f64, f64) -> bool) -> Vec<bool> {
    let mut mask = vec![false; IMG_PIXELS];
    for iy in 0..IMG_SIZE {
        for ix in 0..IMG_SIZE {
            mask[iy * IMG_SIZE + ix] = f(ix as f64 + 0.5, iy as f64 + 0.5);
        }
    }
    mask
}

/// Pixels where the background can contribute: everything not fully covered by
/// the face ellipse. A superset of the true support (glasses ink may opaquely
/// cover a few off-face pixels), which is the safe direction for confinement
/// checks.
pub fn background_mask(f: &FactorVector) -> Vec<bool> {
    let g = FaceGeometry::from_factors(f);
    pixel_mask(|x, y| {
        coverage(ellipse_distance(&g, g.unshear_x(x, y), y, g.cx, g.cy, g.a, g.b)) < 1.0
    })
}

/// Pixels the glasses layer can touch, independent of whether glasses are worn:
/// the union of frame-stroke and lens-interior support.
pub fn glasses_mask(f: &FactorVector) -> Vec<bool> {
    let g = FaceGeometry::from_factors(f);
    pixel_mask(|x, y| {
        let (frame, lens) = glasses_ink(&g, g.unshear_x(x, y), y);
        frame > 0.0 || lens > 0.0
    })
}

/// Pixels the mouth stroke can touch for *any* curvature value, given the other
/// factors: a union over a curvature sweep with a dilation margin that covers
/// the arcs between sweep points.
pub fn mouth_mask(f: &FactorVector) -> Vec<bool> {
    let geos: Vec<FaceGeometry> = [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|&c| {
            FaceGeometry::from_parts(&f.identity, f.attributes[AT_YAW], f.attributes[AT_PITCH], c)
        })
        .collect();
    let reach = 0.5 * geos[0].mouth_thickness + 1.0;
    pixel_mask(|x, y| {
        let xu = geos[0].unshear_x(x, y);
        geos.iter().any(|g| mouth_distance(g, xu, y) <= reach)
    })
}
