//! Nearest-prototype inference, seen/unseen accuracy and the H-score.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, EmbeddingMatrix};
use crate::losses::argmax;
use crate::model::Model;
use crate::pca::Pca;
use crate::tensor::{cosine, normalized, Tensor};

/// Harmonic mean of seen and unseen accuracy; 0 when both are 0.
pub fn h_score(seen: f64, unseen: f64) -> f64 {
    if seen + unseen > 0.0 {
        2.0 * seen * unseen / (seen + unseen)
    } else {
        0.0
    }
}

/// Index of the most cosine-similar prototype; lowest index wins ties.
pub fn classify(v: &[f64], prototypes: &Tensor) -> Result<usize> {
    let sims = (0..prototypes.rows())
        .map(|k| cosine(v, prototypes.row(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(&sims))
}

/// Classifies every row of `features` against `prototypes`.
pub fn classify_all(features: &Tensor, prototypes: &Tensor) -> Result<Vec<usize>> {
    let unit = |t: &Tensor| -> Result<Tensor> {
        let rows = (0..t.rows())
            .map(|r| normalized(t.row(r)))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(0, t.cols()));
        }
        Tensor::from_rows(&rows)
    };
    let sims = unit(features)?.matmul_t(&unit(prototypes)?)?;
    Ok((0..sims.rows()).map(|r| argmax(sims.row(r))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub h_score: f64,
    /// Percent correct per true class; `None` for classes with no samples.
    pub per_class_acc: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Micro accuracy within the seen and unseen groups.
    pub fn from_predictions(predictions: &[usize], labels: &[usize], seen_mask: &[bool]) -> Result<Self> {
        let classes = seen_mask.len();
        if predictions.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if l >= classes {
                return Err(Error::Label { label: l, classes });
            }
            if p >= classes {
                return Err(Error::Label { label: p, classes });
            }
            confusion[l][p] += 1;
        }
        let mut correct = [0usize; 2];
        let mut total = [0usize; 2];
        let per_class_acc = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                let group = usize::from(seen_mask[k]);
                correct[group] += row[k];
                total[group] += n;
                (n > 0).then(|| 100.0 * row[k] as f64 / n as f64)
            })
            .collect();
        let pct = |g: usize| {
            if total[g] == 0 {
                0.0
            } else {
                100.0 * correct[g] as f64 / total[g] as f64
            }
        };
        let (seen_acc, unseen_acc) = (pct(1), pct(0));
        Ok(EvalReport {
            seen_acc,
            unseen_acc,
            h_score: h_score(seen_acc, unseen_acc),
            per_class_acc,
            confusion,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seen_acc={:.4}", self.seen_acc)?;
        writeln!(f, "unseen_acc={:.4}", self.unseen_acc)?;
        writeln!(f, "h_score={:.4}", self.h_score)?;
        let per_class: Vec<String> = self
            .per_class_acc
            .iter()
            .map(|a| a.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}")))
            .collect();
        writeln!(f, "per_class_acc={}", per_class.join(","))?;
        let rows: Vec<String> = self
            .confusion
            .iter()
            .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            .collect();
        writeln!(f, "confusion={}", rows.join(";"))
    }
}

/// Classifies adapted target features against the model's prototypes over
/// all classes.
pub fn evaluate(features: &Tensor, labels: &[usize], seen_mask: &[bool], model: &Model) -> Result<EvalReport> {
    let predictions = classify_all(&model.embed(features)?, &model.prototypes()?)?;
    EvalReport::from_predictions(&predictions, labels, seen_mask)
}

/// Raw features against normalized class embeddings, no trained parts.
pub fn zero_shot_baseline(
    features: &Tensor,
    class_embeddings: &Tensor,
    labels: &[usize],
    seen_mask: &[bool],
) -> Result<EvalReport> {
    let predictions = classify_all(features, class_embeddings)?;
    EvalReport::from_predictions(&predictions, labels, seen_mask)
}

pub const EXPORT_FEATURES: &str = "features.emb";
pub const EXPORT_PROJECTION: &str = "projection.txt";

/// Writes adapted features as `EMB1` and, when asked, the top-2 principal
/// component projection as `x y label` lines (label `-1` when unknown).
pub fn export_features(
    model: &Model,
    features: &Tensor,
    labels: Option<&[usize]>,
    out_dir: &Path,
    project_to_2d: bool,
) -> Result<Tensor> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let adapted = model.embed(features)?;
    io::save_embeddings(&out_dir.join(EXPORT_FEATURES), &EmbeddingMatrix::from_tensor(&adapted)?)?;
    if project_to_2d {
        let coords = Pca::fit(&adapted, 2)?.project(&adapted)?;
        let mut text = String::new();
        for r in 0..coords.rows() {
            let label = labels.map_or_else(|| "-1".to_owned(), |l| l[r].to_string());
            text.push_str(&format!("{} {} {label}\n", coords.get(r, 0), coords.get(r, 1)));
        }
        io::write_text(&out_dir.join(EXPORT_PROJECTION), &text)?;
    }
    Ok(adapted)
}
