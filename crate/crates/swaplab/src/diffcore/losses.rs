//! Loss weighting and exact component accounting.
//!
//! The training objective is a weighted sum of three scalars — identity
//! similarity, diffusion noise error, and pixel reconstruction. The combiner
//! fixes the summation order so the logged components always reproduce the
//! optimized total bit-for-bit; "what moved the gradient" is never a guess.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Var};

/// Weights for the three loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub id: f64,
    pub dm: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    /// Reconstruction carries 10× weight; identity and noise error weigh 1.
    fn default() -> Self {
        LossWeights { id: 1.0, dm: 1.0, rec: 10.0 }
    }
}

/// Scalar values of one step's loss terms, pre-weighting, plus the weighted
/// total that was actually optimized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_dm: f64,
    pub l_rec: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted total exactly as [`combine_losses`] does.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        (w.id * self.l_id + w.dm * self.l_dm) + w.rec * self.l_rec
    }
}

/// total = (w_id·l_id + w_dm·l_dm) + w_rec·l_rec, in exactly that order.
pub fn combine_losses(g: &mut Graph, l_id: Var, l_dm: Var, l_rec: Var, w: &LossWeights) -> Var {
    let a = g.scale(l_id, w.id);
    let b = g.scale(l_dm, w.dm);
    let c = g.scale(l_rec, w.rec);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Reads the components and total off the graph.
pub fn breakdown(g: &Graph, l_id: Var, l_dm: Var, l_rec: Var, total: Var) -> LossBreakdown {
    LossBreakdown {
        l_id: g.value(l_id).item(),
        l_dm: g.value(l_dm).item(),
        l_rec: g.value(l_rec).item(),
        total: g.value(total).item(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn total_reproduces_from_components_bit_exactly() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let l_id = g.leaf(Tensor::scalar(0.731));
        let l_dm = g.leaf(Tensor::scalar(1.0e-4 / 3.0));
        let l_rec = g.leaf(Tensor::scalar(0.01937));
        let total = combine_losses(&mut g, l_id, l_dm, l_rec, &w);
        let b = breakdown(&g, l_id, l_dm, l_rec, total);
        assert_eq!(b.total, b.recombine(&w), "accounting identity violated");
        assert_eq!(b.l_id, 0.731);
    }

    #[test]
    fn gradients_carry_exactly_the_configured_weights() {
        let w = LossWeights { id: 2.0, dm: 0.5, rec: 10.0 };
        let mut g = Graph::new();
        let l_id = g.leaf(Tensor::scalar(0.3));
        let l_dm = g.leaf(Tensor::scalar(0.2));
        let l_rec = g.leaf(Tensor::scalar(0.1));
        let total = combine_losses(&mut g, l_id, l_dm, l_rec, &w);
        let grads = g.backward(total);
        assert_eq!(grads.get(l_id).unwrap().item(), 2.0);
        assert_eq!(grads.get(l_dm).unwrap().item(), 0.5);
        assert_eq!(grads.get(l_rec).unwrap().item(), 10.0);
    }

    #[test]
    fn default_weights_emphasize_reconstruction() {
        let w = LossWeights::default();
        assert_eq!((w.id, w.dm, w.rec), (1.0, 1.0, 10.0));
    }
}
