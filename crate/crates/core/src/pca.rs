//! Principal component projection for exporting 2-D views of embeddings.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension {
            op: "symmetric_eigen",
            left: a.shape(),
            right: [n, n],
        });
    }
    let mut m = a.clone();
    let mut vecs = Tensor::identity(n);
    let scale: f64 = m
        .data()
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                // columns of `vecs` accumulate the rotations
                for k in 0..n {
                    let (vkp, vkq) = (vecs.get(k, p), vecs.get(k, q));
                    vecs.set(k, p, c * vkp - s * vkq);
                    vecs.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Tensor::from_fn(n, n, |r, c| vecs.get(c, order[r]));
    Ok((values, vectors))
}

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k × d`, unit rows, by decreasing variance.
    pub components: Tensor,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &Tensor, k: usize) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n == 0 || k > d {
            return Err(Error::Data(format!("cannot fit {k} components to a {n}x{d} matrix")));
        }
        let mean: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64)
            .collect();
        let centered = Tensor::from_fn(n, d, |r, c| x.get(r, c) - mean[c]);
        let denom = (n.max(2) - 1) as f64;
        let mut cov = centered.transpose().matmul(&centered)?;
        cov.data_mut().iter_mut().for_each(|v| *v /= denom);
        let (values, vectors) = symmetric_eigen(&cov)?;
        let mut components = Tensor::from_fn(k, d, |r, c| vectors.get(r, c));
        // sign convention: largest-magnitude coordinate positive
        for r in 0..k {
            let row = components.row(r);
            let pivot = row
                .iter()
                .copied()
                .fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
            if pivot < 0.0 {
                components.row_mut(r).iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok(Pca {
            mean,
            components,
            variances: values[..k].to_vec(),
        })
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let centered = Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) - self.mean[c]);
        centered.matmul_t(&self.components)
    }

    pub fn reconstruct(&self, coords: &Tensor) -> Result<Tensor> {
        let mut out = coords.matmul(&self.components)?;
        for r in 0..out.rows() {
            for (v, m) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }
}
