//! Class-prototype branch: synonym pooling, graph normalization and the
//! two-layer GCN with a linear residual.
//!
//! For class node `k` with initial embedding `e_k`:
//!
//! ```text
//! H1  = relu(Â · E · Θ1)
//! H2  = Â · H1 · Θ2
//! p_k = normalize(H2[k] + e_k · W + b)
//! ```
//!
//! `Â` is the symmetric normalized adjacency with self-loops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::ClassGraph;
use crate::tensor::{Tape, Tensor, Var};

/// Averages each class's synonym embeddings and L2-normalizes the result.
pub fn pool_synonyms<S: AsRef<[f64]>>(groups: &[Vec<S>]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(groups.len());
    for (class, group) in groups.iter().enumerate() {
        let Some(first) = group.first() else {
            return Err(Error::Data(format!("class {class} has no synonym embeddings")));
        };
        let mut mean = vec![0.0; first.as_ref().len()];
        for s in group {
            let s = s.as_ref();
            if s.len() != mean.len() {
                return Err(Error::Data(format!(
                    "class {class}: synonym embeddings differ in length"
                )));
            }
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        let n = group.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        rows.push(
            crate::tensor::normalized(&mean)
                .map_err(|_| Error::Data(format!("class {class}: pooled synonym embedding has zero norm")))?,
        );
    }
    Tensor::from_rows(&rows)
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `A` the symmetric 0/1 adjacency.
pub fn normalize_adjacency(graph: &ClassGraph) -> Tensor {
    let n = graph.node_count();
    let mut a = Tensor::identity(n);
    for &(u, v) in graph.edges() {
        a.set(u, v, 1.0);
        a.set(v, u, 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                a.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    a
}

/// Which parts of the prototype branch are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrototypeMode {
    pub use_gcn: bool,
    pub use_residual: bool,
}

impl Default for PrototypeMode {
    fn default() -> Self {
        PrototypeMode {
            use_gcn: true,
            use_residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeParams {
    pub gcn1: Tensor,
    pub gcn2: Tensor,
    pub residual_w: Tensor,
    pub residual_b: Tensor,
}

impl PrototypeParams {
    /// Residual projector starts near identity and the second GCN layer
    /// near zero, so initial prototypes sit close to the class embeddings.
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let glorot = Normal::new(0.0, (2.0 / (dim + hidden) as f64).sqrt()).expect("valid std");
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let tiny = Normal::new(0.0, 1e-3).expect("valid std");
        let gcn1 = Tensor::from_fn(dim, hidden, |_, _| glorot.sample(rng));
        let gcn2 = Tensor::from_fn(hidden, dim, |_, _| small.sample(rng));
        let residual_w = Tensor::from_fn(dim, dim, |r, c| f64::from(u8::from(r == c)) + tiny.sample(rng));
        PrototypeParams {
            gcn1,
            gcn2,
            residual_w,
            residual_b: Tensor::zeros(1, dim),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.gcn1, &self.gcn2, &self.residual_w, &self.residual_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.gcn1,
            &mut self.gcn2,
            &mut self.residual_w,
            &mut self.residual_b,
        ]
    }

    pub const NAMES: [&'static str; 4] = ["gcn1", "gcn2", "residual_w", "residual_b"];

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> PrototypeVars {
        PrototypeVars {
            gcn1: tape.leaf(self.gcn1.clone(), trainable),
            gcn2: tape.leaf(self.gcn2.clone(), trainable),
            residual_w: tape.leaf(self.residual_w.clone(), trainable),
            residual_b: tape.leaf(self.residual_b.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PrototypeVars {
    pub gcn1: Var,
    pub gcn2: Var,
    pub residual_w: Var,
    pub residual_b: Var,
}

impl PrototypeVars {
    pub fn all(&self) -> [Var; 4] {
        [self.gcn1, self.gcn2, self.residual_w, self.residual_b]
    }
}

/// Graph quantities that stay fixed during training.
#[derive(Clone, Debug)]
pub struct GraphContext {
    /// Rows of `Â` belonging to class nodes, in class order.
    class_adjacency: Tensor,
    /// `Â · E` over all nodes.
    propagated: Tensor,
    class_embeddings: Tensor,
}

impl GraphContext {
    pub fn new(graph: &ClassGraph) -> Result<Self> {
        let adjacency = normalize_adjacency(graph);
        Ok(GraphContext {
            class_adjacency: adjacency.gather_rows(graph.class_nodes()),
            propagated: adjacency.matmul(graph.node_init())?,
            class_embeddings: graph.class_embeddings(),
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.class_embeddings.cols()
    }

    /// Pooled class embeddings `e_k`, one row per class.
    pub fn class_embeddings(&self) -> &Tensor {
        &self.class_embeddings
    }
}

/// Records the prototype forward pass; returns the `c × d` prototype matrix
/// with unit-norm rows.
pub fn forward_prototypes(
    tape: &mut Tape,
    ctx: &GraphContext,
    vars: &PrototypeVars,
    mode: PrototypeMode,
) -> Result<Var> {
    if !mode.use_gcn && !mode.use_residual {
        return Err(Error::Config("prototype branch has no active path".into()));
    }
    let e = tape.constant(ctx.class_embeddings.clone());
    let mut out = None;
    if mode.use_gcn {
        let propagated = tape.constant(ctx.propagated.clone());
        let pre = tape.matmul(propagated, vars.gcn1)?;
        let h1 = tape.relu(pre);
        let class_adj = tape.constant(ctx.class_adjacency.clone());
        let mixed = tape.matmul(class_adj, h1)?;
        out = Some(tape.matmul(mixed, vars.gcn2)?);
    }
    if mode.use_residual {
        let projected = tape.matmul(e, vars.residual_w)?;
        let projected = tape.add_row(projected, vars.residual_b)?;
        out = Some(match out {
            Some(h2) => tape.add(h2, projected)?,
            None => projected,
        });
    }
    tape.normalize_rows(out.expect("at least one path"))
}

/// Prototype matrix without recording gradients.
pub fn compute_prototypes(params: &PrototypeParams, ctx: &GraphContext, mode: PrototypeMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let p = forward_prototypes(&mut tape, ctx, &vars, mode)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn pooling_examples() {
        let single = pool_synonyms(&[vec![vec![3.0, 4.0]]]).unwrap();
        assert_eq!(single.data(), &[0.6, 0.8]);
        let twice = pool_synonyms(&[vec![vec![3.0, 4.0], vec![3.0, 4.0]]]).unwrap();
        assert_eq!(twice, single);
        let mixed = pool_synonyms(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]]]).unwrap();
        assert!((mixed.get(0, 0) - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((mixed.get(0, 1) - FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn empty_synonym_set_names_class() {
        let groups: Vec<Vec<Vec<f64>>> = vec![vec![vec![1.0]], vec![]];
        let err = pool_synonyms(&groups).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn adjacency_examples() {
        let single = ClassGraph::new(1, vec![], vec![0], Tensor::zeros(1, 1)).unwrap();
        assert_eq!(normalize_adjacency(&single).data(), &[1.0]);

        let pair = ClassGraph::new(2, vec![(0, 1)], vec![0, 1], Tensor::zeros(2, 1)).unwrap();
        for &v in normalize_adjacency(&pair).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }

        let path = ClassGraph::new(3, vec![(0, 1), (1, 2)], vec![0, 2], Tensor::zeros(3, 1)).unwrap();
        let a = normalize_adjacency(&path);
        assert_eq!(a, a.transpose());
        let row0: f64 = a.row(0).iter().sum();
        assert!(
            (row0 - 1.0).abs() > 1e-3,
            "symmetric normalization is not row-stochastic"
        );
    }

    #[test]
    fn identity_weights_on_singleton() {
        let g = ClassGraph::new(1, vec![], vec![0], Tensor::row_vector(vec![0.6, 0.8])).unwrap();
        let ctx = GraphContext::new(&g).unwrap();
        let params = PrototypeParams {
            gcn1: Tensor::identity(2),
            gcn2: Tensor::identity(2),
            residual_w: Tensor::identity(2),
            residual_b: Tensor::zeros(1, 2),
        };
        let p = compute_prototypes(&params, &ctx, PrototypeMode::default()).unwrap();
        assert!((p.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn projector_only_returns_class_embeddings() {
        let init = Tensor::new(3, 2, vec![0.6, 0.8, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let g = ClassGraph::new(3, vec![(0, 1), (1, 2)], vec![0, 2], init).unwrap();
        let ctx = GraphContext::new(&g).unwrap();
        let params = PrototypeParams {
            gcn1: Tensor::filled(2, 2, 7.0),
            gcn2: Tensor::filled(2, 2, -3.0),
            residual_w: Tensor::identity(2),
            residual_b: Tensor::zeros(1, 2),
        };
        let mode = PrototypeMode {
            use_gcn: false,
            use_residual: true,
        };
        let p = compute_prototypes(&params, &ctx, mode).unwrap();
        assert_eq!(p.row(0), &[0.6, 0.8]);
        assert_eq!(p.row(1), &[0.0, 1.0]);
    }
}
