//! Training objectives.
//!
//! All inputs are unit-norm rows, so `v · pᵀ` is the cosine similarity.
//! Every batch reduction is a mean.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Source,
    Target,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Source => "source",
            Phase::Target => "target",
        })
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}

fn cross_entropy(tape: &mut Tape, v: Var, p: Var, labels: &[usize], scale: f64) -> Result<Var> {
    check_labels(labels, tape.value(p).rows())?;
    let sims = tape.matmul_t(v, p)?;
    let logits = tape.scale(sims, scale);
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(log_probs, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// Mean of `-log softmax(scale · v Pᵀ)[label]`.
pub fn ce_loss(tape: &mut Tape, v: Var, p: Var, labels: &[usize], scale: f64) -> Result<Var> {
    cross_entropy(tape, v, p, labels, scale)
}

/// Mean over samples and negatives of `max(0, margin - R(v, p_label) + R(v, p_neg))`.
pub fn ranking_loss(tape: &mut Tape, v: Var, p: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let classes = tape.value(p).rows();
    check_labels(labels, classes)?;
    let batch = labels.len();
    if classes < 2 || batch == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let sims = tape.matmul_t(v, p)?;
    let pos = tape.pick_per_row(sims, labels)?;
    let gap = tape.sub_col(sims, pos)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    let mask = tape.constant(Tensor::from_fn(
        batch,
        classes,
        |r, c| {
            if c == labels[r] {
                0.0
            } else {
                1.0
            }
        },
    ));
    let negatives = tape.mul(hinge, mask)?;
    let total = tape.sum(negatives);
    Ok(tape.scale(total, 1.0 / (batch * (classes - 1)) as f64))
}

/// Mutual-information objective: `-H(mean_i q_i) + mean_i H(q_i)` with
/// `q_i = softmax(scale · v_i Pᵀ)`.
pub fn info_loss(tape: &mut Tape, v: Var, p: Var, scale: f64) -> Result<Var> {
    let batch = tape.value(v).rows() as f64;
    let sims = tape.matmul_t(v, p)?;
    let logits = tape.scale(sims, scale);
    let probs = tape.softmax_rows(logits);
    let log_probs = tape.log_softmax_rows(logits);
    let plogp = tape.mul(probs, log_probs)?;
    let sum_plogp = tape.sum(plogp);
    let conditional = tape.scale(sum_plogp, -1.0 / batch);
    let marginal = tape.mean_rows(probs);
    let mlogm = tape.xlogx(marginal);
    let neg_marginal_entropy = tape.sum(mlogm);
    tape.add(neg_marginal_entropy, conditional)
}

/// Semantic relation structure loss, averaged over the batch:
/// `Σ_neg [R(v, p_neg) - R(p_pos, p_neg)]² + [1 - R(v, p_pos)]²`.
///
/// Computed as `Σ_j (R(v, p_j) - R(p_pos, p_j))²` over all classes `j`,
/// which is the same sum because prototypes have unit norm; this form is
/// exactly zero when `v = p_pos`.
pub fn srs_loss(tape: &mut Tape, v: Var, p: Var, pos: &[usize]) -> Result<Var> {
    let classes = tape.value(p).rows();
    check_labels(pos, classes)?;
    if pos.len() != tape.value(v).rows() {
        return Err(Error::Dimension {
            op: "srs_loss",
            left: tape.value(v).shape(),
            right: [pos.len(), 1],
        });
    }
    let sims = tape.matmul_t(v, p)?;
    let relations = tape.matmul_t(p, p)?;
    let targets = tape.gather_rows(relations, pos)?;
    let diff = tape.sub(sims, targets)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / pos.len() as f64))
}

/// Adapted text embedding `k` must classify as class `k`.
pub fn align_loss(tape: &mut Tape, adapted_text: Var, p: Var, scale: f64) -> Result<Var> {
    let (rows, classes) = (tape.value(adapted_text).rows(), tape.value(p).rows());
    if rows != classes {
        return Err(Error::Dimension {
            op: "align_loss",
            left: tape.value(adapted_text).shape(),
            right: tape.value(p).shape(),
        });
    }
    let labels: Vec<usize> = (0..classes).collect();
    cross_entropy(tape, adapted_text, p, &labels, scale)
}

/// Row-wise argmax of `v Pᵀ`, lowest index on ties.
pub fn pseudo_labels(sims: &Tensor) -> Vec<usize> {
    (0..sims.rows()).map(|r| argmax(sims.row(r))).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Which optional terms are enabled in the current phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermToggles {
    pub srs: bool,
    pub align: bool,
}

/// Per-term coefficients of the phase objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub ranking: f64,
    pub info: f64,
    pub srs: f64,
    pub align: f64,
}

impl LossWeights {
    /// source: `ce + ranking + β·align + γ·srs`; target: `info + β·align + γ·srs`.
    pub fn for_phase(phase: Phase, beta: f64, gamma: f64, toggles: TermToggles) -> Self {
        let (supervised, info) = match phase {
            Phase::Source => (1.0, 0.0),
            Phase::Target => (0.0, 1.0),
        };
        LossWeights {
            ce: supervised,
            ranking: supervised,
            info,
            srs: if toggles.srs { gamma } else { 0.0 },
            align: if toggles.align { beta } else { 0.0 },
        }
    }
}

/// Component values of one step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub ranking: f64,
    pub info: f64,
    pub srs: f64,
    pub align: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub phase: Phase,
    pub ce: f64,
    pub ranking: f64,
    pub info: f64,
    pub srs: f64,
    pub align: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} phase={} ce={} ranking={} info={} srs={} align={} total={}",
            self.phase, self.ce, self.ranking, self.info, self.srs, self.align, self.total
        )
    }
}

/// Weighted total for the phase. Disabled terms contribute exactly zero.
pub fn compose(phase: Phase, parts: LossParts, beta: f64, gamma: f64, toggles: TermToggles) -> LossBreakdown {
    let w = LossWeights::for_phase(phase, beta, gamma, toggles);
    let term = |weight: f64, value: f64| if weight == 0.0 { 0.0 } else { weight * value };
    let total = term(w.ce, parts.ce)
        + term(w.ranking, parts.ranking)
        + term(w.info, parts.info)
        + term(w.align, parts.align)
        + term(w.srs, parts.srs);
    let keep = |weight: f64, value: f64| if weight == 0.0 { 0.0 } else { value };
    LossBreakdown {
        phase,
        ce: keep(w.ce, parts.ce),
        ranking: keep(w.ranking, parts.ranking),
        info: keep(w.info, parts.info),
        srs: keep(w.srs, parts.srs),
        align: keep(w.align, parts.align),
        total,
    }
}
