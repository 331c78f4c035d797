//! Diffusion backbone: noise schedule, image↔latent codec, forward noising,
//! deterministic samplers, and loss bookkeeping.

pub mod codec;
pub mod losses;
pub mod sampler;
pub mod schedule;

pub use codec::{clamp01, decode_latent, encode_image, LATENT_CHANNELS, LATENT_SIZE};
pub use losses::{LossBreakdown, LossWeights};
pub use sampler::{k_step_swap, one_step_swap, Parameterization};
pub use schedule::NoiseSchedule;

use crate::tensor::Tensor;

/// Forward noising: √ᾱ·z₀ + √(1-ᾱ)·ε.
pub fn add_noise(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    assert_eq!(z0.shape, eps.shape, "noise shape mismatch");
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    let mut out = z0.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = sa * *o + sn * e;
    }
    out
}

/// Recovers the clean-latent estimate implied by a noise prediction:
/// (z_t − √(1-ᾱ)·ε̂) / √ᾱ, with the divisor floored away from zero.
pub fn predicted_x0(z_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Tensor {
    assert_eq!(z_t.shape, eps_hat.shape, "prediction shape mismatch");
    let sa = alpha_bar.sqrt().max(1e-8);
    let sn = (1.0 - alpha_bar).sqrt();
    let mut out = z_t.clone();
    for (o, e) in out.data.iter_mut().zip(&eps_hat.data) {
        *o = (*o - sn * e) / sa;
    }
    out
}

/// The inverse map: the noise implied by a clean-latent estimate,
/// (z_t − √ᾱ·x̂₀) / √(1-ᾱ), floored the same way.
pub fn implied_eps(z_t: &Tensor, x0_hat: &Tensor, alpha_bar: f64) -> Tensor {
    assert_eq!(z_t.shape, x0_hat.shape, "prediction shape mismatch");
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt().max(1e-8);
    let mut out = z_t.clone();
    for (o, x) in out.data.iter_mut().zip(&x0_hat.data) {
        *o = (*o - sa * x) / sn;
    }
    out
}

/// Standard-normal tensor draw.
pub fn sample_noise(shape: &[usize], rng: &mut rand_chacha::ChaCha12Rng) -> Tensor {
    use rand::Rng;
    let mut t = Tensor::zeros(shape);
    for v in t.data.iter_mut() {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn add_noise_matches_mean_and_variance() {
        // Monte-Carlo check of the marginal: for fixed z₀ and ε ~ N(0, I),
        // z_t has mean √ᾱ·z₀ and variance 1-ᾱ per entry.
        let ab = 0.37;
        let z0 = Tensor::new(vec![4], vec![1.5, -0.25, 0.0, 2.0]);
        let mut rng = rng_for(41, "mc-noise", 0);
        let n = 20_000;
        let mut mean = [0.0; 4];
        let mut m2 = [0.0; 4];
        for _ in 0..n {
            let eps = sample_noise(&[4], &mut rng);
            let zt = add_noise(&z0, &eps, ab);
            for i in 0..4 {
                mean[i] += zt.data[i];
                m2[i] += zt.data[i] * zt.data[i];
            }
        }
        for i in 0..4 {
            let m = mean[i] / n as f64;
            let var = m2[i] / n as f64 - m * m;
            assert!((m - ab.sqrt() * z0.data[i]).abs() < 0.02, "mean off: {m}");
            assert!((var - (1.0 - ab)).abs() < 0.02, "variance off: {var}");
        }
    }

    #[test]
    fn x0_and_eps_conversions_invert_each_other() {
        let mut rng = rng_for(41, "inv", 0);
        let z0 = sample_noise(&[8], &mut rng);
        let eps = sample_noise(&[8], &mut rng);
        for ab in [0.9999, 0.5, 4.035829765376e-5] {
            let zt = add_noise(&z0, &eps, ab);
            let x0 = predicted_x0(&zt, &eps, ab);
            for (a, b) in x0.data.iter().zip(&z0.data) {
                assert!((a - b).abs() < 1e-9, "x0 recovery failed at ᾱ={ab}");
            }
            let e = implied_eps(&zt, &z0, ab);
            for (a, b) in e.data.iter().zip(&eps.data) {
                assert!((a - b).abs() < 1e-9, "eps recovery failed at ᾱ={ab}");
            }
        }
    }

    #[test]
    fn noise_draws_are_standard_normal_ish() {
        let mut rng = rng_for(41, "norm", 0);
        let x = sample_noise(&[50_000], &mut rng);
        let n = x.data.len() as f64;
        let mean: f64 = x.data.iter().sum::<f64>() / n;
        let var: f64 = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }
}
