//! Seeded synthetic benchmark standing in for real encoder exports.
//!
//! Class means are generated down a random balanced binary tree: each child
//! direction is its parent's direction plus an isotropic perturbation,
//! re-projected onto the unit sphere, so siblings in the relation graph are
//! also close in feature space. The tree is the class graph. Text
//! embeddings are noisy copies of the means; source images are means plus
//! Gaussian noise; target images apply a fixed rotation of the whole space
//! (every vector turns by `shift_angle`) before adding noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{Benchmark, ClassGraph, DatasetBundle, SynonymTable};
use crate::model::{rng_for, streams};
use crate::prototype::pool_synonyms;
use crate::tensor::{dot, normalized, Tensor};

/// Perturbation norm added to a parent direction per tree level.
const LEVEL_SPREAD: f64 = 0.1;
/// Norm of the noise separating a synonym embedding from its class mean.
const TEXT_NOISE: f64 = 0.2;
const MAX_SYNONYMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub c_seen: usize,
    pub c_unseen: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Rotation angle (radians) between source and target domains.
    pub shift_angle: f64,
    /// Expected norm of the per-image Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            c_seen: 40,
            c_unseen: 10,
            dim: 64,
            per_class: 50,
            shift_angle: 0.3,
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

fn gaussian(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        if let Ok(v) = normalized(&gaussian(dim, 1.0, rng)) {
            return v;
        }
    }
}

/// A rotation turning every vector by the same angle: the space is split
/// into orthogonal planes (from a random orthonormal basis) and each plane
/// is rotated by `angle`.
struct PlaneRotation {
    basis: Vec<Vec<f64>>,
    cos_m1: f64,
    sin: f64,
}

impl PlaneRotation {
    fn new(dim: usize, angle: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while basis.len() < dim {
            let mut v = gaussian(dim, 1.0, rng);
            for b in &basis {
                let proj = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
            if let Ok(u) = normalized(&v) {
                basis.push(u);
            }
        }
        PlaneRotation {
            basis,
            cos_m1: angle.cos() - 1.0,
            sin: angle.sin(),
        }
    }

    /// Leaves `x` bit-identical when the angle is zero.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for pair in self.basis.chunks_exact(2) {
            let (e1, e2) = (&pair[0], &pair[1]);
            let (a, b) = (dot(x, e1), dot(x, e2));
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.cos_m1 * (a * e1[i] + b * e2[i]) + self.sin * (a * e2[i] - b * e1[i]);
            }
        }
        out
    }
}

/// Balanced binary tree over `leaves`; internal nodes get ids from `next`.
/// Returns the subtree root.
fn build_tree(leaves: &[usize], next: &mut usize, children: &mut Vec<Vec<usize>>) -> usize {
    if leaves.len() == 1 {
        return leaves[0];
    }
    let mid = leaves.len() / 2;
    let left = build_tree(&leaves[..mid], next, children);
    let right = build_tree(&leaves[mid..], next, children);
    let id = *next;
    *next += 1;
    children[id] = vec![left, right];
    id
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Benchmark> {
    if spec.dim < 4 || spec.c_seen < 2 || spec.c_unseen < 1 || spec.per_class < 1 {
        return Err(Error::Config(format!(
            "synthetic benchmark needs dim >= 4, c_seen >= 2, c_unseen >= 1, per_class >= 1; got {spec:?}"
        )));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite() && spec.shift_angle.is_finite()) {
        return Err(Error::Config("noise_sigma must be >= 0 and shift_angle finite".into()));
    }
    let (c, d) = (spec.c_seen + spec.c_unseen, spec.dim);
    let mut rng = rng_for(spec.seed, streams::SYNTH);

    let mut leaves: Vec<usize> = (0..c).collect();
    leaves.shuffle(&mut rng);
    let node_count = 2 * c - 1;
    let mut children = vec![Vec::new(); node_count];
    let mut next = c;
    let root = build_tree(&leaves, &mut next, &mut children);
    let edges: Vec<(usize, usize)> = children
        .iter()
        .enumerate()
        .flat_map(|(parent, kids)| kids.iter().map(move |&k| (parent, k)))
        .collect();

    // directions, top-down from the root
    let mut direction = vec![Vec::new(); node_count];
    direction[root] = random_unit(d, &mut rng);
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        for &child in &children[node] {
            let step = gaussian(d, LEVEL_SPREAD / (d as f64).sqrt(), &mut rng);
            let raw: Vec<f64> = direction[node].iter().zip(&step).map(|(a, b)| a + b).collect();
            direction[child] = normalized(&raw)?;
            stack.push(child);
        }
    }
    let means: Vec<Vec<f64>> = direction[..c].to_vec();

    let mut synonym_groups = Vec::with_capacity(c);
    for mean in &means {
        let count = rng.random_range(1..=MAX_SYNONYMS);
        let group: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let noise = gaussian(d, TEXT_NOISE / (d as f64).sqrt(), &mut rng);
                mean.iter().zip(&noise).map(|(m, n)| m + n).collect()
            })
            .collect();
        synonym_groups.push(group);
    }
    let pooled = pool_synonyms(&synonym_groups)?;

    // ancestors: normalized mean of their children's embeddings, bottom-up
    let mut node_init = vec![Vec::new(); node_count];
    for (k, row) in node_init.iter_mut().take(c).enumerate() {
        *row = pooled.row(k).to_vec();
    }
    for node in c..node_count {
        let kids = &children[node];
        let sum: Vec<f64> = (0..d).map(|i| kids.iter().map(|&k| node_init[k][i]).sum()).collect();
        node_init[node] = normalized(&sum)?;
    }
    let graph = ClassGraph::new(node_count, edges, (0..c).collect(), Tensor::from_rows(&node_init)?)?;

    let rotation = PlaneRotation::new(d, spec.shift_angle, &mut rng);
    let noise_scale = spec.noise_sigma / (d as f64).sqrt();
    let sample = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let noise = gaussian(d, noise_scale, rng);
        center.iter().zip(&noise).map(|(m, n)| m + n).collect()
    };

    let mut source_rows = Vec::with_capacity(spec.c_seen * spec.per_class);
    let mut source_labels = Vec::with_capacity(spec.c_seen * spec.per_class);
    for (k, mean) in means.iter().enumerate().take(spec.c_seen) {
        for _ in 0..spec.per_class {
            source_rows.push(sample(mean, &mut rng));
            source_labels.push(k);
        }
    }
    let mut target_rows = Vec::with_capacity(c * spec.per_class);
    let mut target_labels = Vec::with_capacity(c * spec.per_class);
    for (k, mean) in means.iter().enumerate() {
        let shifted = rotation.apply(mean);
        for _ in 0..spec.per_class {
            target_rows.push(sample(&shifted, &mut rng));
            target_labels.push(k);
        }
    }

    let seen_mask = (0..c).map(|k| k < spec.c_seen).collect();
    let bundle = DatasetBundle::new(
        Tensor::from_rows(&source_rows)?,
        source_labels,
        Tensor::from_rows(&target_rows)?,
        target_labels,
        seen_mask,
    )?;
    Ok(Benchmark {
        bundle,
        graph,
        synonyms: Some(SynonymTable::from_groups(&synonym_groups)?),
    })
}
