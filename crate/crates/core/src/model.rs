//! Full model: adapter plus prototype branch, and the shared forward pass
//! used by training, evaluation and gradient checking.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapt_batch, adapt_rows, AdapterParams, AdapterVars};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, EmbeddingMatrix};
use crate::losses::{align_loss, ce_loss, info_loss, ranking_loss, srs_loss};
use crate::prototype::{
    compute_prototypes, forward_prototypes, GraphContext, PrototypeMode, PrototypeParams, PrototypeVars,
};
use crate::tensor::{Tape, Tensor, Var};

/// RNG stream ids; every stream derives from the single run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const SOURCE_BATCHES: u64 = 1;
    pub const TARGET_BATCHES: u64 = 2;
    pub const SYNTH: u64 = 3;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub adapter: AdapterParams,
    pub prototype: PrototypeParams,
}

impl ModelParams {
    pub fn init(dim: usize, config: &RunConfig) -> Result<Self> {
        let hidden = if config.hidden_dim == 0 { dim } else { config.hidden_dim };
        let mut rng = rng_for(config.seed, streams::INIT);
        let adapter = AdapterParams::init(dim, config.tokens, &mut rng)?;
        let prototype = PrototypeParams::init(dim, hidden, &mut rng);
        Ok(ModelParams { adapter, prototype })
    }

    pub fn names() -> Vec<String> {
        AdapterParams::NAMES
            .iter()
            .map(|n| format!("adapter.{n}"))
            .chain(PrototypeParams::NAMES.iter().map(|n| format!("prototype.{n}")))
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.adapter
            .tensors()
            .into_iter()
            .chain(self.prototype.tensors())
            .collect()
    }

    fn from_tensors(mut t: Vec<Tensor>, tokens: usize) -> Self {
        let residual_b = t.pop().expect("7 tensors");
        let residual_w = t.pop().expect("7 tensors");
        let gcn2 = t.pop().expect("7 tensors");
        let gcn1 = t.pop().expect("7 tensors");
        let w_v = t.pop().expect("7 tensors");
        let w_k = t.pop().expect("7 tensors");
        let w_q = t.pop().expect("7 tensors");
        ModelParams {
            adapter: AdapterParams { w_q, w_k, w_v, tokens },
            prototype: PrototypeParams {
                gcn1,
                gcn2,
                residual_w,
                residual_b,
            },
        }
    }

    pub fn register(&self, tape: &mut Tape, train_adapter: bool, train_prototype: bool) -> ParamVars {
        ParamVars {
            adapter: self.adapter.register(tape, train_adapter),
            prototype: self.prototype.register(tape, train_prototype),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub adapter: AdapterVars,
    pub prototype: PrototypeVars,
}

impl ParamVars {
    /// In the same order as [`ModelParams::names`].
    pub fn all(&self) -> Vec<Var> {
        self.adapter.all().into_iter().chain(self.prototype.all()).collect()
    }
}

/// Architecture switches (the ablation rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelMode {
    pub use_attention: bool,
    pub prototype: PrototypeMode,
}

impl ModelMode {
    pub fn from_config(config: &RunConfig) -> Self {
        ModelMode {
            use_attention: config.use_attention_adapter,
            prototype: PrototypeMode {
                use_gcn: config.use_gcn,
                use_residual: config.use_residual_projector,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub params: ModelParams,
    pub graph: GraphContext,
    pub mode: ModelMode,
}

impl Model {
    pub fn prototypes(&self) -> Result<Tensor> {
        compute_prototypes(&self.params.prototype, &self.graph, self.mode.prototype)
    }

    /// Adapted, unit-norm embeddings of the given features.
    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        if features.rows() == 0 {
            return Ok(Tensor::zeros(0, features.cols()));
        }
        adapt_rows(features, &self.params.adapter, self.mode.use_attention)
    }
}

/// Recorded forward pass for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub params: ParamVars,
    /// Adapted batch, `b × d`.
    pub v: Var,
    /// All prototypes, `c × d`.
    pub p: Var,
}

pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    graph: &GraphContext,
    mode: ModelMode,
    features: &Tensor,
    train_adapter: bool,
    train_prototype: bool,
) -> Result<Forward> {
    let vars = params.register(tape, train_adapter, train_prototype);
    let x = tape.constant(features.clone());
    let v = adapt_batch(tape, x, &vars.adapter, mode.use_attention)?;
    let p = forward_prototypes(tape, graph, &vars.prototype, mode.prototype)?;
    Ok(Forward { params: vars, v, p })
}

/// Supervised losses run over the seen-class prototypes only.
pub struct SeenClasses {
    classes: Vec<usize>,
    local: Vec<Option<usize>>,
}

impl SeenClasses {
    pub fn new(seen_mask: &[bool]) -> Self {
        let classes: Vec<usize> = (0..seen_mask.len()).filter(|&k| seen_mask[k]).collect();
        let mut local = vec![None; seen_mask.len()];
        for (i, &k) in classes.iter().enumerate() {
            local[k] = Some(i);
        }
        SeenClasses { classes, local }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Maps global class labels to positions among the seen classes.
    pub fn localize(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                self.local
                    .get(l)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Data(format!("label {l} is not a seen class")))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Ranking,
    Info,
    Srs,
    Align,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::Ranking,
        LossKind::Info,
        LossKind::Srs,
        LossKind::Align,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Ranking => "ranking",
            LossKind::Info => "info",
            LossKind::Srs => "srs",
            LossKind::Align => "align",
        }
    }
}

/// Everything a single loss term needs besides the forward pass.
pub struct LossContext<'a> {
    pub seen: &'a SeenClasses,
    pub graph: &'a GraphContext,
    pub adapter: &'a AdapterVars,
    pub use_attention: bool,
    pub scale: f64,
    pub margin: f64,
}

/// Records one loss term. `labels` are global class indices: ground truth
/// for supervised terms, and the positive class for srs.
pub fn loss_term(
    tape: &mut Tape,
    kind: LossKind,
    fwd: &Forward,
    labels: &[usize],
    cx: &LossContext<'_>,
) -> Result<Var> {
    match kind {
        LossKind::Ce | LossKind::Ranking => {
            let p_seen = tape.gather_rows(fwd.p, cx.seen.classes())?;
            let local = cx.seen.localize(labels)?;
            if kind == LossKind::Ce {
                ce_loss(tape, fwd.v, p_seen, &local, cx.scale)
            } else {
                ranking_loss(tape, fwd.v, p_seen, &local, cx.margin)
            }
        }
        LossKind::Info => info_loss(tape, fwd.v, fwd.p, cx.scale),
        LossKind::Srs => srs_loss(tape, fwd.v, fwd.p, labels),
        LossKind::Align => {
            let text = tape.constant(cx.graph.class_embeddings().clone());
            let adapted = adapt_batch(tape, text, cx.adapter, cx.use_attention)?;
            align_loss(tape, adapted, fwd.p, cx.scale)
        }
    }
}

const CHECKPOINT_PARAMS: &str = "params.emb";
const CHECKPOINT_NAMES: &str = "params.names";
const CHECKPOINT_CONFIG: &str = "config.txt";

/// Writes parameters (concatenated `EMB1` records), the names sidecar and
/// the config snapshot into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = params
        .tensors()
        .into_iter()
        .map(EmbeddingMatrix::from_tensor)
        .collect::<Result<Vec<_>>>()?;
    io::save_embedding_records(&dir.join(CHECKPOINT_PARAMS), &records)?;
    let mut names = ModelParams::names().join("\n");
    names.push('\n');
    io::write_text(&dir.join(CHECKPOINT_NAMES), &names)?;
    io::write_text(&dir.join(CHECKPOINT_CONFIG), &config.to_string())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, RunConfig)> {
    let config = RunConfig::load(&dir.join(CHECKPOINT_CONFIG))?;
    let names_path = dir.join(CHECKPOINT_NAMES);
    let names: Vec<String> = io::read_text(&names_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_owned())
        .collect();
    let records = io::load_embedding_records(&dir.join(CHECKPOINT_PARAMS))?;
    let expected = ModelParams::names();
    if names != expected || records.len() != expected.len() {
        return Err(Error::Format {
            path: names_path,
            msg: format!(
                "expected parameters {expected:?}, found {names:?} with {} records",
                records.len()
            ),
        });
    }
    let params = ModelParams::from_tensors(records.iter().map(EmbeddingMatrix::to_tensor).collect(), config.tokens);
    let dim = params.adapter.dim();
    let square = |t: &Tensor| t.shape() == [dim, dim];
    if !square(&params.adapter.w_q) || !square(&params.adapter.w_k) || !square(&params.prototype.residual_w) {
        return Err(Error::Data("checkpoint parameter shapes are inconsistent".into()));
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let config = RunConfig {
            tokens: 4,
            ..RunConfig::default()
        };
        let params = ModelParams::init(8, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &config).unwrap();
        let (loaded, cfg) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg, config);
        for (a, b) in params.tensors().iter().zip(loaded.tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn seen_class_mapping() {
        let seen = SeenClasses::new(&[false, true, true, false]);
        assert_eq!(seen.classes(), &[1, 2]);
        assert_eq!(seen.localize(&[2, 1]).unwrap(), vec![1, 0]);
        assert!(seen.localize(&[0]).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let config = RunConfig::default();
        assert_eq!(
            ModelParams::init(16, &config).unwrap(),
            ModelParams::init(16, &config).unwrap()
        );
    }
}
