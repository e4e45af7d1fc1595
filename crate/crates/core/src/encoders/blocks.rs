//! Shared building blocks: linear layers, layer-norm parameters, and the
//! pre-norm transformer block used by both encoders (and, trainable, by the
//! prompter's transformer variant).

use crate::autodiff::{Parameter, Tensor};
use crate::rng::{normal_vec, Prng};

pub const LN_EPS: f64 = 1e-5;

pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

impl Linear {
    /// Weights ~ N(0, std), zero bias.
    pub fn init(name: &str, in_dim: usize, out_dim: usize, std: f64, rng: &mut Prng, trainable: bool) -> Self {
        Linear {
            w: Parameter::new(
                format!("{name}.w"),
                &[in_dim, out_dim],
                normal_vec(rng, in_dim * out_dim, std),
                trainable,
            ),
            b: Parameter::new(format!("{name}.b"), &[out_dim], vec![0.0; out_dim], trainable),
        }
    }

    /// All-zero weights and bias (identity-start heads).
    pub fn zeros(name: &str, in_dim: usize, out_dim: usize, trainable: bool) -> Self {
        Linear {
            w: Parameter::new(format!("{name}.w"), &[in_dim, out_dim], vec![0.0; in_dim * out_dim], trainable),
            b: Parameter::new(format!("{name}.b"), &[out_dim], vec![0.0; out_dim], trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w.leaf()).add_bias(&self.b.leaf())
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }
}

pub struct LayerNormParams {
    pub g: Parameter,
    pub b: Parameter,
}

impl LayerNormParams {
    pub fn init(name: &str, dim: usize, trainable: bool) -> Self {
        LayerNormParams {
            g: Parameter::new(format!("{name}.g"), &[dim], vec![1.0; dim], trainable),
            b: Parameter::new(format!("{name}.b"), &[dim], vec![0.0; dim], trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.g.leaf(), &self.b.leaf(), LN_EPS)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.g.clone(), self.b.clone()]
    }
}

/// Pre-norm block: x + attn(ln1(x)), then x + mlp(ln2(x)). GELU inside the
/// MLP, hidden width 2d. Permutation-equivariant over sequence positions.
pub struct TransformerBlock {
    pub heads: usize,
    pub ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn init(name: &str, d: usize, heads: usize, rng: &mut Prng, trainable: bool) -> Self {
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        // value/output paths start wide enough that token content reaches
        // the readout positions first-order; the desk-scale budget has no
        // room for a long warm-up out of a constant-embedding plateau
        let attn_std = 1.0 / (d as f64).sqrt();
        TransformerBlock {
            heads,
            ln1: LayerNormParams::init(&format!("{name}.ln1"), d, trainable),
            wq: Linear::init(&format!("{name}.wq"), d, d, attn_std, rng, trainable),
            wk: Linear::init(&format!("{name}.wk"), d, d, attn_std, rng, trainable),
            wv: Linear::init(&format!("{name}.wv"), d, d, attn_std, rng, trainable),
            wo: Linear::init(&format!("{name}.wo"), d, d, attn_std, rng, trainable),
            ln2: LayerNormParams::init(&format!("{name}.ln2"), d, trainable),
            fc1: Linear::init(&format!("{name}.fc1"), d, 2 * d, attn_std, rng, trainable),
            fc2: Linear::init(&format!("{name}.fc2"), 2 * d, d, attn_std, rng, trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let d = x.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let h = self.ln1.forward(x);
        let q = self.wq.forward(&h);
        let k = self.wk.forward(&h);
        let v = self.wv.forward(&h);
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = q.slice_cols(i * dh, dh);
            let kh = k.slice_cols(i * dh, dh);
            let vh = v.slice_cols(i * dh, dh);
            let att = qh.matmul(&kh.transpose()).scale(scale).softmax();
            heads.push(att.matmul(&vh));
        }
        let x = x.add(&self.wo.forward(&Tensor::concat_cols(&heads)));

        let h2 = self.ln2.forward(&x);
        let m = self.fc2.forward(&self.fc1.forward(&h2).gelu());
        x.add(&m)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.ln1.params();
        p.extend(self.wq.params());
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = seeded(0);
        let block = TransformerBlock::init("b", 8, 2, &mut rng, false);
        let x = Tensor::constant(&[3, 8], normal_vec(&mut rng, 24, 1.0));
        let y = block.forward(&x);
        let perm = [2usize, 0, 1];
        let xp = x.gather_rows(&perm);
        let yp = block.forward(&xp);
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = yp.data()[r * 8 + c];
                let b = y.data()[src * 8 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
