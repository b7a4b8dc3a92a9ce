//! Straight-line scalar-loop references, written independently of the
//! tensor and tape code they check.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sreclip_core::adapter::{adapt, adapt_rows, AdapterParams};
use sreclip_core::io::ClassGraph;
use sreclip_core::losses::{align_loss, ce_loss, srs_loss};
use sreclip_core::prototype::{compute_prototypes, GraphContext, PrototypeMode, PrototypeParams};
use sreclip_core::{Tape, Tensor, Var};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    x.iter().map(|a| a / n).collect()
}

fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * m.get(i, j);
        }
    }
    out
}

pub fn ref_adapt(f: &[f64], a: &AdapterParams, use_attention: bool) -> Vec<f64> {
    let u = vec_mat(f, &a.w_v);
    if !use_attention {
        return unit(&u);
    }
    let q = vec_mat(f, &a.w_q);
    let k = vec_mat(f, &a.w_k);
    let t = a.tokens;
    let dk = f.len() / t;
    let mut out = u.clone();
    for i in 0..t {
        let mut scores = vec![0.0; t];
        for (j, s) in scores.iter_mut().enumerate() {
            for c in 0..dk {
                *s += q[i * dk + c] * k[j * dk + c];
            }
            *s /= (dk as f64).sqrt();
        }
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..t {
            for c in 0..dk {
                out[i * dk + c] += exps[j] / z * u[j * dk + c];
            }
        }
    }
    unit(&out)
}

pub fn ref_prototypes(g: &ClassGraph, p: &PrototypeParams, mode: PrototypeMode) -> Rows {
    let n = g.node_count();
    let mut adj = vec![vec![0.0; n]; n];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(a, b) in g.edges() {
        adj[a][b] = 1.0;
        adj[b][a] = 1.0;
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let norm = |i: usize, j: usize| adj[i][j] / (deg[i] * deg[j]).sqrt();
    let e = g.node_init();
    let d = e.cols();

    // H1 = relu(Â E Θ1) over all nodes
    let mut ae = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            for c in 0..d {
                ae[i][c] += norm(i, j) * e.get(j, c);
            }
        }
    }
    let h1: Rows = ae
        .iter()
        .map(|r| vec_mat(r, &p.gcn1).into_iter().map(|x| x.max(0.0)).collect())
        .collect();

    g.class_nodes()
        .iter()
        .map(|&node| {
            let mut out = vec![0.0; d];
            if mode.use_gcn {
                let mut mixed = vec![0.0; h1[0].len()];
                for j in 0..n {
                    for (c, m) in mixed.iter_mut().enumerate() {
                        *m += norm(node, j) * h1[j][c];
                    }
                }
                out = vec_mat(&mixed, &p.gcn2);
            }
            if mode.use_residual {
                let proj = vec_mat(e.row(node), &p.residual_w);
                for c in 0..d {
                    out[c] += proj[c] + p.residual_b.get(0, c);
                }
            }
            unit(&out)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn ref_ce(v: &Rows, p: &Rows, labels: &[usize], scale: f64) -> f64 {
    let mut total = 0.0;
    for (vi, &l) in v.iter().zip(labels) {
        let logits: Vec<f64> = p.iter().map(|pk| scale * dot(vi, pk)).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
        total += lse - logits[l];
    }
    total / v.len() as f64
}

pub fn ref_srs(v: &Rows, p: &Rows, pos: &[usize]) -> f64 {
    let mut total = 0.0;
    for (vi, &k) in v.iter().zip(pos) {
        for (j, pj) in p.iter().enumerate() {
            if j == k {
                total += (1.0 - dot(vi, pj)).powi(2);
            } else {
                total += (dot(vi, pj) - dot(&p[k], pj)).powi(2);
            }
        }
    }
    total / v.len() as f64
}

pub fn ref_align(text: &Tensor, a: &AdapterParams, use_attention: bool, p: &Rows, scale: f64) -> f64 {
    let adapted: Rows = (0..text.rows())
        .map(|k| ref_adapt(text.row(k), a, use_attention))
        .collect();
    let labels: Vec<usize> = (0..p.len()).collect();
    ref_ce(&adapted, p, &labels, scale)
}

/// Random graph, parameters and features for oracle comparisons.
pub struct Case {
    pub graph: ClassGraph,
    pub adapter: AdapterParams,
    pub prototype: PrototypeParams,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let tokens = [1, 2, 4][rng.random_range(0..3)];
    let d = tokens * rng.random_range(2..6);
    let c = rng.random_range(2..7);
    let extra = rng.random_range(0..4);
    let n = c + extra;
    let mut mat = |r: usize, k: usize, s: f64| Tensor::from_fn(r, k, |_, _| s * (rng.random::<f64>() * 2.0 - 1.0));
    let node_init = mat(n, d, 1.0);
    let adapter = AdapterParams {
        w_q: mat(d, d, 1.0),
        w_k: mat(d, d, 1.0),
        w_v: mat(d, d, 1.0),
        tokens,
    };
    let hidden = d + 3;
    let prototype = PrototypeParams {
        gcn1: mat(d, hidden, 1.0),
        gcn2: mat(hidden, d, 1.0),
        residual_w: mat(d, d, 1.0),
        residual_b: mat(1, d, 0.5),
    };
    let features = mat(7, d, 1.0);
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.reverse();
    let graph = ClassGraph::new(n, edges, nodes[..c].to_vec(), node_init).unwrap();
    let labels = (0..7).map(|_| rng.random_range(0..c)).collect();
    Case {
        graph,
        adapter,
        prototype,
        features,
        labels,
    }
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn tape_loss(v: &Tensor, p: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> sreclip_core::Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let (vv, pv) = (tape.constant(v.clone()), tape.constant(p.clone()));
    let loss = f(&mut tape, vv, pv).unwrap();
    tape.value(loss).item()
}

/// Largest disagreement between library and reference for each checked
/// operation on one random case, over every mode combination.
pub fn oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let case = random_case(seed);
    let ctx = GraphContext::new(&case.graph).unwrap();
    let mut worst = vec![
        ("forward_prototypes", 0.0f64),
        ("adapt", 0.0),
        ("ce_loss", 0.0),
        ("srs_loss", 0.0),
        ("align_loss", 0.0),
    ];
    let modes = [(true, true), (true, false), (false, true)];
    for (use_gcn, use_residual) in modes {
        let mode = PrototypeMode { use_gcn, use_residual };
        let p = compute_prototypes(&case.prototype, &ctx, mode).unwrap();
        let p_ref = ref_prototypes(&case.graph, &case.prototype, mode);
        worst[0].1 = worst[0].1.max(max_abs_diff(&rows(&p), &p_ref));

        for use_attention in [true, false] {
            let mut v = Vec::new();
            for r in 0..case.features.rows() {
                let f = case.features.row(r);
                v.push(adapt(f, &case.adapter, use_attention).unwrap());
                let r = ref_adapt(f, &case.adapter, use_attention);
                worst[1].1 = worst[1].1.max(max_abs_diff(&vec![v.last().unwrap().clone()], &vec![r]));
            }
            let vt = Tensor::from_rows(&v).unwrap();
            let labels = case.labels.clone();
            let ce = tape_loss(&vt, &p, |t, v, p| ce_loss(t, v, p, &labels, 30.0));
            worst[2].1 = worst[2].1.max((ce - ref_ce(&v, &p_ref, &labels, 30.0)).abs());
            let srs = tape_loss(&vt, &p, |t, v, p| srs_loss(t, v, p, &labels));
            worst[3].1 = worst[3].1.max((srs - ref_srs(&v, &p_ref, &labels)).abs());

            let text = case.graph.class_embeddings();
            let adapted = adapt_rows(&text, &case.adapter, use_attention).unwrap();
            let align = tape_loss(&adapted, &p, |t, a, p| align_loss(t, a, p, 30.0));
            worst[4].1 = worst[4]
                .1
                .max((align - ref_align(&text, &case.adapter, use_attention, &p_ref, 30.0)).abs());
        }
    }
    worst
}
