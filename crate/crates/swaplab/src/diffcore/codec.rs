//! Image ↔ latent codec: a fixed space-to-depth transform plus affine
//! standardization.
//!
//! A 4×4 pixel block of each color channel becomes 16 latent channels at one
//! spatial site, and values are mapped from [0,1] to roughly [-2,2] via
//! (v − ½)/¼. Both constants are powers of two, so the codec is exactly
//! invertible up to one rounding of the subtraction — far below every
//! tolerance in the workspace. There is nothing learned here: the codec's job
//! is to give the denoiser a compact, standardized canvas, not to model
//! anything.

use crate::synthfaces::geometry::IMG_SIZE;
use crate::tensor::{Graph, Tensor, Var};

/// Space-to-depth block edge.
pub const BLOCK: usize = 4;
/// Latent channel count: 3 color channels × 4×4 block positions.
pub const LATENT_CHANNELS: usize = 3 * BLOCK * BLOCK;
/// Latent spatial edge: 64 / 4.
pub const LATENT_SIZE: usize = IMG_SIZE / BLOCK;

const MEAN: f64 = 0.5;
const SCALE: f64 = 0.25;

/// [3, 64, 64] image in [0,1] → [48, 16, 16] latent.
///
/// Channel layout: latent channel c·16 + by·4 + bx holds color channel c at
/// block offset (bx, by).
pub fn encode_image(img: &Tensor) -> Tensor {
    assert_eq!(img.shape, vec![3, IMG_SIZE, IMG_SIZE], "encode expects an image");
    let mut z = Tensor::zeros(&[LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE]);
    let img_plane = IMG_SIZE * IMG_SIZE;
    let lat_plane = LATENT_SIZE * LATENT_SIZE;
    for c in 0..3 {
        for by in 0..BLOCK {
            for bx in 0..BLOCK {
                let lc = c * BLOCK * BLOCK + by * BLOCK + bx;
                for y in 0..LATENT_SIZE {
                    for x in 0..LATENT_SIZE {
                        let v = img.data[c * img_plane + (BLOCK * y + by) * IMG_SIZE + BLOCK * x + bx];
                        z.data[lc * lat_plane + y * LATENT_SIZE + x] = (v - MEAN) / SCALE;
                    }
                }
            }
        }
    }
    z
}

/// [48, 16, 16] latent → [3, 64, 64] image. Unclamped: training losses must
/// see out-of-range excursions rather than a flat spot.
pub fn decode_latent(z: &Tensor) -> Tensor {
    assert_eq!(
        z.shape,
        vec![LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
        "decode expects a latent"
    );
    let mut img = Tensor::zeros(&[3, IMG_SIZE, IMG_SIZE]);
    let img_plane = IMG_SIZE * IMG_SIZE;
    let lat_plane = LATENT_SIZE * LATENT_SIZE;
    for c in 0..3 {
        for by in 0..BLOCK {
            for bx in 0..BLOCK {
                let lc = c * BLOCK * BLOCK + by * BLOCK + bx;
                for y in 0..LATENT_SIZE {
                    for x in 0..LATENT_SIZE {
                        let v = z.data[lc * lat_plane + y * LATENT_SIZE + x];
                        img.data[c * img_plane + (BLOCK * y + by) * IMG_SIZE + BLOCK * x + bx] =
                            v * SCALE + MEAN;
                    }
                }
            }
        }
    }
    img
}

/// [`decode_latent`] as a differentiable graph node: identical constants and
/// block layout, bit-for-bit, with an adjoint. Image-space losses on a decoded
/// prediction pull their gradients back into the latent through this.
pub fn decode_latent_graph(g: &mut Graph, z: Var) -> Var {
    assert_eq!(
        g.value(z).shape,
        vec![LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE],
        "decode expects a latent"
    );
    let img_plane = IMG_SIZE * IMG_SIZE;
    let lat_plane = LATENT_SIZE * LATENT_SIZE;
    let mut index = vec![0usize; 3 * img_plane];
    for c in 0..3 {
        for by in 0..BLOCK {
            for bx in 0..BLOCK {
                let lc = c * BLOCK * BLOCK + by * BLOCK + bx;
                for y in 0..LATENT_SIZE {
                    for x in 0..LATENT_SIZE {
                        index[c * img_plane + (BLOCK * y + by) * IMG_SIZE + BLOCK * x + bx] =
                            lc * lat_plane + y * LATENT_SIZE + x;
                    }
                }
            }
        }
    }
    let scaled = g.affine(z, SCALE, MEAN);
    g.gather(scaled, index, vec![3, IMG_SIZE, IMG_SIZE])
}

/// Clamps every entry into [0,1]; for display/IO after decoding.
pub fn clamp01(img: &Tensor) -> Tensor {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}
