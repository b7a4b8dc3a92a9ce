//! Finite-difference verification of every loss gradient with respect to
//! every adapter and prototype-branch parameter.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::AdapterParams;
use crate::error::Result;
use crate::io::ClassGraph;
use crate::model::{forward, loss_term, rng_for, LossContext, LossKind, ModelMode, ModelParams, SeenClasses};
use crate::prototype::{GraphContext, PrototypeMode, PrototypeParams};
use crate::tensor::{Tape, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Gradient entries below this magnitude are compared absolutely. At
/// `STEP = 1e-6` the central difference carries about `1e-9` of rounding
/// noise, which would dominate the relative error of entries near `1e-5`.
pub const SCALE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// A small random problem with every parameter group active.
pub struct Instance {
    pub params: ModelParams,
    pub graph: GraphContext,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub seen: SeenClasses,
    pub mode: ModelMode,
    pub scale: f64,
    pub margin: f64,
}

impl Instance {
    pub fn random(classes: usize, dim: usize, tokens: usize, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, 7);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let matrix = |rows: usize, cols: usize, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_fn(rows, cols, |_, _| std * normal.sample(rng))
        };

        // random recursive tree over class and ancestor nodes
        let ancestors = classes.div_ceil(2);
        let nodes = classes + ancestors;
        let edges: Vec<(usize, usize)> = (1..nodes).map(|i| (rng.random_range(0..i), i)).collect();
        let mut order: Vec<usize> = (0..nodes).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let class_nodes = order[..classes].to_vec();
        let node_init = matrix(nodes, dim, 1.0, &mut rng);
        let graph = ClassGraph::new(nodes, edges, class_nodes, node_init)?;

        let eye = Tensor::identity(dim);
        let near_identity = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut m = matrix(dim, dim, 0.3, rng);
            m.data_mut().iter_mut().zip(eye.data()).for_each(|(a, b)| *a += b);
            m
        };
        let adapter = AdapterParams {
            w_q: matrix(dim, dim, 0.5, &mut rng),
            w_k: matrix(dim, dim, 0.5, &mut rng),
            w_v: near_identity(&mut rng),
            tokens,
        };
        let prototype = PrototypeParams {
            gcn1: matrix(dim, dim, 0.3, &mut rng),
            gcn2: matrix(dim, dim, 0.3, &mut rng),
            residual_w: near_identity(&mut rng),
            residual_b: matrix(1, dim, 0.1, &mut rng),
        };

        let seen_count = (2 * classes).div_ceil(3).max(1);
        let seen_mask: Vec<bool> = (0..classes).map(|k| k < seen_count).collect();
        let labels = (0..batch).map(|_| rng.random_range(0..seen_count)).collect();
        Ok(Instance {
            params: ModelParams { adapter, prototype },
            graph: GraphContext::new(&graph)?,
            features: matrix(batch, dim, 1.0, &mut rng),
            labels,
            seen: SeenClasses::new(&seen_mask),
            mode: ModelMode {
                use_attention: true,
                prototype: PrototypeMode::default(),
            },
            scale: 30.0,
            margin: 0.1,
        })
    }

    fn evaluate(&self, kind: LossKind, params: &ModelParams, with_grad: bool) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let fwd = forward(
            &mut tape,
            params,
            &self.graph,
            self.mode,
            &self.features,
            with_grad,
            with_grad,
        )?;
        let cx = LossContext {
            seen: &self.seen,
            graph: &self.graph,
            adapter: &fwd.params.adapter,
            use_attention: self.mode.use_attention,
            scale: self.scale,
            margin: self.margin,
        };
        let loss = loss_term(&mut tape, kind, &fwd, &self.labels, &cx)?;
        let value = tape.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let tensors = fwd
            .params
            .all()
            .into_iter()
            .map(|v| grads.get_or_zeros(v, tape.value(v).shape()))
            .collect();
        Ok((value, tensors))
    }

    pub fn loss(&self, kind: LossKind, params: &ModelParams) -> Result<f64> {
        Ok(self.evaluate(kind, params, false)?.0)
    }

    /// Reverse-mode gradients, in [`ModelParams::names`] order.
    pub fn analytic(&self, kind: LossKind) -> Result<Vec<Tensor>> {
        Ok(self.evaluate(kind, &self.params, true)?.1)
    }

    /// Central finite differences, in [`ModelParams::names`] order.
    pub fn numeric(&self, kind: LossKind, h: f64) -> Result<Vec<Tensor>> {
        let mut params = self.params.clone();
        let mut out = Vec::new();
        for group in 0..ModelParams::names().len() {
            let shape = param_mut(&mut params, group).shape();
            let mut grad = Tensor::zeros(shape[0], shape[1]);
            for i in 0..grad.len() {
                let original = param_mut(&mut params, group).data()[i];
                param_mut(&mut params, group).data_mut()[i] = original + h;
                let plus = self.loss(kind, &params)?;
                param_mut(&mut params, group).data_mut()[i] = original - h;
                let minus = self.loss(kind, &params)?;
                param_mut(&mut params, group).data_mut()[i] = original;
                grad.data_mut()[i] = (plus - minus) / (2.0 * h);
            }
            out.push(grad);
        }
        Ok(out)
    }
}

fn param_mut(params: &mut ModelParams, index: usize) -> &mut Tensor {
    match index {
        0..=2 => params
            .adapter
            .tensors_mut()
            .into_iter()
            .nth(index)
            .expect("3 adapter tensors"),
        _ => params
            .prototype
            .tensors_mut()
            .into_iter()
            .nth(index - 3)
            .expect("4 prototype tensors"),
    }
}

/// Max relative error for one parameter group of one loss.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub loss: LossKind,
    pub param: String,
    pub max_rel_err: f64,
}

pub fn check(instance: &Instance, kind: LossKind) -> Result<Vec<GroupError>> {
    let analytic = instance.analytic(kind)?;
    let numeric = instance.numeric(kind, STEP)?;
    Ok(ModelParams::names()
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(param, (a, n))| GroupError {
            loss: kind,
            param,
            max_rel_err: a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max),
        })
        .collect())
}

/// The full suite: every loss on the `c = 6, d = 16, T = 4` instance.
pub fn run_suite(seed: u64) -> Result<Vec<GroupError>> {
    let instance = Instance::random(6, 16, 4, 8, seed)?;
    let mut all = Vec::new();
    for kind in LossKind::ALL {
        all.extend(check(&instance, kind)?);
    }
    Ok(all)
}
