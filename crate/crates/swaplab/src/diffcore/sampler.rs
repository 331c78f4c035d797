//! Deterministic samplers: single-step generation and its k-step refinement.
//!
//! The swap generator is trained to produce its final answer in one model
//! call from the noisiest timestep. The k-step variant walks a fixed
//! descending timestep ladder without ever re-injecting noise (each hop keeps
//! the noise the model itself implied), so k = 1 degenerates to exactly the
//! single-step path and larger k only buys refinement.

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::{implied_eps, predicted_x0};
use crate::tensor::Tensor;
use crate::{Result, SwapLabError};

/// What the model's raw output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    /// Output is the clean-latent estimate x̂₀.
    PredictX0,
    /// Output is the noise estimate ε̂.
    PredictEps,
}

fn to_x0(raw: Tensor, z_t: &Tensor, param: Parameterization, alpha_bar: f64) -> Tensor {
    match param {
        Parameterization::PredictX0 => raw,
        Parameterization::PredictEps => predicted_x0(z_t, &raw, alpha_bar),
    }
}

/// The k-step timestep ladder: evenly spaced, starting at the last timestep.
/// For 1000 steps and k=4: [999, 749, 499, 249].
pub fn timestep_ladder(t_steps: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| ((k - i) * t_steps) / k - 1).collect()
}

/// Runs the model down a k-step ladder from `z_init` (a latent noised at the
/// final timestep) and returns the last clean-latent estimate.
///
/// `predict` is the bound model: raw output given (noisy latent, timestep).
pub fn k_step_swap(
    predict: &mut dyn FnMut(&Tensor, usize) -> Tensor,
    param: Parameterization,
    schedule: &NoiseSchedule,
    z_init: &Tensor,
    k: usize,
) -> Result<Tensor> {
    if k == 0 || k > schedule.len() {
        return Err(SwapLabError::InvalidSchedule(format!(
            "step count {k} outside 1..={}",
            schedule.len()
        )));
    }
    let ladder = timestep_ladder(schedule.len(), k);
    let mut z = z_init.clone();
    let mut x0 = None;
    for (i, &t) in ladder.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let raw = predict(&z, t);
        if raw.shape != z.shape {
            return Err(SwapLabError::Shape(format!(
                "model output shape {:?} != latent shape {:?}",
                raw.shape, z.shape
            )));
        }
        let x0_t = to_x0(raw, &z, param, ab);
        if let Some(&t_next) = ladder.get(i + 1) {
            // Deterministic hop: carry the model's own implied noise to the
            // next (less noisy) timestep. No fresh noise enters the chain.
            let eps = implied_eps(&z, &x0_t, ab);
            let ab_next = schedule.alpha_bar(t_next);
            z = super::add_noise(&x0_t, &eps, ab_next);
        }
        x0 = Some(x0_t);
    }
    Ok(x0.expect("k >= 1"))
}

/// Single-call generation from the noisiest timestep: the k=1 ladder.
pub fn one_step_swap(
    predict: &mut dyn FnMut(&Tensor, usize) -> Tensor,
    param: Parameterization,
    schedule: &NoiseSchedule,
    z_init: &Tensor,
) -> Result<Tensor> {
    k_step_swap(predict, param, schedule, z_init, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{add_noise, sample_noise};
    use crate::util::rng_for;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default_training()
    }

    #[test]
    fn ladder_is_evenly_spaced_and_starts_at_the_top() {
        assert_eq!(timestep_ladder(1000, 1), vec![999]);
        assert_eq!(timestep_ladder(1000, 4), vec![999, 749, 499, 249]);
        assert_eq!(timestep_ladder(8, 2), vec![7, 3]);
        assert_eq!(timestep_ladder(1, 1), vec![0]);
    }

    #[test]
    fn zero_noise_prediction_rescales_the_input() {
        // An untrained ε-model that outputs zeros makes the one-step sampler
        // return z_init / √ᾱ_last exactly.
        let s = schedule();
        let z = sample_noise(&[6], &mut rng_for(61, "zero", 0));
        let mut model = |_: &Tensor, _: usize| Tensor::zeros(&[6]);
        let out = one_step_swap(&mut model, Parameterization::PredictEps, &s, &z).unwrap();
        let sa = s.alpha_bar(s.last_t()).sqrt().max(1e-8);
        for (o, i) in out.data.iter().zip(&z.data) {
            assert_eq!(*o, i / sa);
        }
    }

    #[test]
    fn perfect_x0_model_is_recovered_for_any_k() {
        let s = schedule();
        let mut rng = rng_for(61, "perfect", 0);
        let z0 = sample_noise(&[10], &mut rng);
        let eps = sample_noise(&[10], &mut rng);
        let z_init = add_noise(&z0, &eps, s.alpha_bar(s.last_t()));
        for k in [1, 2, 4, 10] {
            let z0c = z0.clone();
            let mut model = move |_: &Tensor, _: usize| z0c.clone();
            let out = k_step_swap(&mut model, Parameterization::PredictX0, &s, &z_init, k).unwrap();
            for (o, t) in out.data.iter().zip(&z0.data) {
                assert!((o - t).abs() < 1e-12, "k={k} did not return the model's x0");
            }
        }
    }

    #[test]
    fn perfect_eps_model_recovers_the_clean_latent() {
        // A model that outputs the exact noise used in the forward process
        // inverts it: the sampler must hand back z₀ (to fp error amplified by
        // 1/√ᾱ at the noisiest step).
        let s = schedule();
        let mut rng = rng_for(61, "eps", 0);
        let z0 = sample_noise(&[10], &mut rng);
        let eps = sample_noise(&[10], &mut rng);
        let z_init = add_noise(&z0, &eps, s.alpha_bar(s.last_t()));
        let epsc = eps.clone();
        let mut model = move |_: &Tensor, _: usize| epsc.clone();
        let out = one_step_swap(&mut model, Parameterization::PredictEps, &s, &z_init).unwrap();
        for (o, t) in out.data.iter().zip(&z0.data) {
            assert!((o - t).abs() < 1e-9, "one-step inversion failed: {o} vs {t}");
        }
    }

    #[test]
    fn constant_eps_model_makes_every_k_agree() {
        // With a constant noise prediction, the deterministic hop keeps the
        // implied x̂₀ fixed, so every ladder depth lands on the same answer —
        // the no-re-noising property in observable form.
        let s = schedule();
        let mut rng = rng_for(61, "const", 0);
        let z_init = sample_noise(&[12], &mut rng);
        let eps_const = sample_noise(&[12], &mut rng);
        let reference = {
            let e = eps_const.clone();
            let mut model = move |_: &Tensor, _: usize| e.clone();
            one_step_swap(&mut model, Parameterization::PredictEps, &s, &z_init).unwrap()
        };
        for k in [2, 4, 8] {
            let e = eps_const.clone();
            let mut model = move |_: &Tensor, _: usize| e.clone();
            let out = k_step_swap(&mut model, Parameterization::PredictEps, &s, &z_init, k).unwrap();
            for (a, b) in out.data.iter().zip(&reference.data) {
                assert!((a - b).abs() < 1e-6, "k={k} drifted from one-step: {a} vs {b}");
            }
        }
    }

    #[test]
    fn k_one_is_bit_identical_to_one_step() {
        let s = schedule();
        let z_init = sample_noise(&[20], &mut rng_for(61, "k1", 0));
        let mut calls_a = Vec::new();
        let mut model_a = |z: &Tensor, t: usize| {
            calls_a.push(t);
            let mut out = z.clone();
            for v in out.data.iter_mut() {
                *v = v.tanh();
            }
            out
        };
        let a = one_step_swap(&mut model_a, Parameterization::PredictEps, &s, &z_init).unwrap();
        let mut calls_b = Vec::new();
        let mut model_b = |z: &Tensor, t: usize| {
            calls_b.push(t);
            let mut out = z.clone();
            for v in out.data.iter_mut() {
                *v = v.tanh();
            }
            out
        };
        let b = k_step_swap(&mut model_b, Parameterization::PredictEps, &s, &z_init, 1).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(calls_a, calls_b);
        assert_eq!(calls_a, vec![999]);
    }

    #[test]
    fn invalid_step_counts_are_rejected() {
        let s = schedule();
        let z = Tensor::zeros(&[4]);
        let mut model = |z: &Tensor, _: usize| z.clone();
        assert!(k_step_swap(&mut model, Parameterization::PredictX0, &s, &z, 0).is_err());
        assert!(k_step_swap(&mut model, Parameterization::PredictX0, &s, &z, 1001).is_err());
    }
}
