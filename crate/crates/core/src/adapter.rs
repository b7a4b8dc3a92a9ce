//! Attention adapter mapping frozen encoder features into the common space.
//!
//! A feature `f` (a row) is projected to `q = f·W_q`, `k = f·W_k`,
//! `u = f·W_v`. Each projection is split into `tokens` slices of width
//! `d / tokens`; single-head attention runs across those slices and the
//! attended values are added back onto `u`:
//!
//! ```text
//! v = normalize(u + softmax(Q Kᵀ / √d_k) U)
//! ```
//!
//! The same parameters adapt image features and (for alignment retention)
//! class text embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{check_tokens, token_attention_weights, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub tokens: usize,
}

impl AdapterParams {
    /// `W_v` near identity and `W_q`, `W_k` small, so a fresh adapter is
    /// close to the identity map.
    pub fn init(dim: usize, tokens: usize, rng: &mut impl Rng) -> Result<Self> {
        check_tokens(dim, tokens)?;
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let tiny = Normal::new(0.0, 1e-3).expect("valid std");
        let w_q = Tensor::from_fn(dim, dim, |_, _| small.sample(rng));
        let w_k = Tensor::from_fn(dim, dim, |_, _| small.sample(rng));
        let w_v = Tensor::from_fn(dim, dim, |r, c| f64::from(u8::from(r == c)) + tiny.sample(rng));
        Ok(AdapterParams { w_q, w_k, w_v, tokens })
    }

    pub fn dim(&self) -> usize {
        self.w_v.rows()
    }

    pub const NAMES: [&'static str; 3] = ["w_q", "w_k", "w_v"];

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        AdapterVars {
            w_q: tape.leaf(self.w_q.clone(), trainable),
            w_k: tape.leaf(self.w_k.clone(), trainable),
            w_v: tape.leaf(self.w_v.clone(), trainable),
            tokens: self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub tokens: usize,
}

impl AdapterVars {
    pub fn all(&self) -> [Var; 3] {
        [self.w_q, self.w_k, self.w_v]
    }
}

/// Adapts every row of `x`. With `use_attention` off the adapter is the
/// plain projector `normalize(f·W_v)`.
pub fn adapt_batch(tape: &mut Tape, x: Var, vars: &AdapterVars, use_attention: bool) -> Result<Var> {
    let u = tape.matmul(x, vars.w_v)?;
    let v = if use_attention {
        let q = tape.matmul(x, vars.w_q)?;
        let k = tape.matmul(x, vars.w_k)?;
        let attended = tape.token_attention(q, k, u, vars.tokens)?;
        tape.add(u, attended)?
    } else {
        u
    };
    tape.normalize_rows(v)
}

/// Adapts every row of a matrix without recording gradients.
pub fn adapt_rows(x: &Tensor, params: &AdapterParams, use_attention: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let v = adapt_batch(&mut tape, xv, &vars, use_attention)?;
    Ok(tape.value(v).clone())
}

pub fn adapt(f: &[f64], params: &AdapterParams, use_attention: bool) -> Result<Vec<f64>> {
    Ok(adapt_rows(&Tensor::row_vector(f.to_vec()), params, use_attention)?.into_data())
}

/// Runs class text embeddings through the image adapter (shared parameters).
pub fn adapt_text(e: &Tensor, params: &AdapterParams, use_attention: bool) -> Result<Tensor> {
    adapt_rows(e, params, use_attention)
}

/// The `tokens × tokens` attention matrix the adapter applies to `f`.
pub fn attention_map(f: &[f64], params: &AdapterParams) -> Result<Tensor> {
    let x = Tensor::row_vector(f.to_vec());
    let q = x.matmul(&params.w_q)?;
    let k = x.matmul(&params.w_k)?;
    let mut maps = token_attention_weights(&q, &k, params.tokens)?;
    Ok(maps.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(dim: usize, tokens: usize, seed: u64) -> AdapterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.5).unwrap();
        let mut m = || Tensor::from_fn(dim, dim, |_, _| n.sample(&mut rng));
        AdapterParams {
            w_q: m(),
            w_k: m(),
            w_v: m(),
            tokens,
        }
    }

    #[test]
    fn single_token_reduces_to_projector() {
        let p = random_params(6, 1, 1);
        let f = [0.3, -1.0, 0.2, 0.9, -0.4, 0.5];
        let with = adapt(&f, &p, true).unwrap();
        let without = adapt(&f, &p, false).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_scores_attend_uniformly() {
        let mut p = random_params(8, 4, 2);
        p.w_q = Tensor::zeros(8, 8);
        p.w_k = Tensor::zeros(8, 8);
        let f = [0.1, 0.7, -0.3, 0.2, 0.5, -0.8, 0.4, 0.6];
        let u = Tensor::row_vector(f.to_vec()).matmul(&p.w_v).unwrap();
        let u = u.data();
        let width = 2;
        let mean: Vec<f64> = (0..width)
            .map(|t| (0..4).map(|j| u[j * width + t]).sum::<f64>() / 4.0)
            .collect();
        let expected: Vec<f64> = (0..8).map(|i| u[i] + mean[i % width]).collect();
        let expected = crate::tensor::normalized(&expected).unwrap();
        let got = adapt(&f, &p, true).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        let map = attention_map(&f, &p).unwrap();
        assert!(map.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn text_rows_share_parameters_with_images() {
        let p = random_params(8, 2, 3);
        let rows = Tensor::from_fn(3, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin());
        let batch = adapt_text(&rows, &p, true).unwrap();
        for r in 0..3 {
            let single = adapt(rows.row(r), &p, true).unwrap();
            assert_eq!(batch.row(r), single.as_slice());
        }
    }

    #[test]
    fn zero_projector_is_degenerate() {
        let mut p = random_params(4, 2, 4);
        p.w_v = Tensor::zeros(4, 4);
        let e = Tensor::filled(2, 4, 1.0);
        assert!(matches!(adapt_text(&e, &p, false), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn indivisible_token_count_is_config_error() {
        let p = random_params(6, 4, 5);
        assert!(matches!(adapt(&[1.0; 6], &p, true), Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(AdapterParams::init(6, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn outputs_are_unit_norm_and_attention_rows_sum_to_one() {
        let p = random_params(16, 4, 6);
        let f: Vec<f64> = (0..16).map(|i| (i as f64 * 1.3).cos()).collect();
        let v = adapt(&f, &p, true).unwrap();
        assert!((crate::tensor::norm(&v) - 1.0).abs() < 1e-12);
        let map = attention_map(&f, &p).unwrap();
        for r in 0..4 {
            assert!((map.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
