//! Two-phase training: source warm-up, then joint epochs that run a full
//! source pass followed by a full target pass.
//!
//! Source steps update the adapter and the prototype branch. Target steps
//! register the prototype parameters as constants, so they receive no
//! gradient and their optimizer state is never touched.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::TrainingData;
use crate::losses::{compose, pseudo_labels, LossBreakdown, LossParts, LossWeights, Phase, TermToggles};
use crate::model::{forward, loss_term, rng_for, streams, LossContext, LossKind, ModelMode, ModelParams, SeenClasses};
use crate::prototype::GraphContext;
use crate::tensor::{Gradients, Tape, Tensor, Var};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam first/second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoment {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u32,
}

impl AdamMoment {
    pub fn new(shape: [usize; 2]) -> Self {
        AdamMoment {
            m: Tensor::zeros(shape[0], shape[1]),
            v: Tensor::zeros(shape[0], shape[1]),
            t: 0,
        }
    }
}

/// One Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, lr: f64, moment: &mut AdamMoment) {
    moment.t += 1;
    let t = i32::try_from(moment.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (m, v) = (moment.m.data_mut(), moment.v.data_mut());
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Updates each parameter from its gradient. Any non-finite gradient aborts
/// before anything is modified.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    moments: &mut [AdamMoment],
    names: &[String],
    step: usize,
) -> Result<()> {
    for (g, name) in grads.iter().zip(names) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                step,
                param: name.clone(),
            });
        }
    }
    for ((p, g), m) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        adam_step(p, g, lr, m);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    /// Moments in [`ModelParams::names`] order.
    pub moments: Vec<AdamMoment>,
    pub epoch: usize,
    pub step: usize,
    pub log: Vec<String>,
    source_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let moments = params.tensors().iter().map(|t| AdamMoment::new(t.shape())).collect();
        TrainState {
            params,
            moments,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            source_rng: rng_for(seed, streams::SOURCE_BATCHES),
            target_rng: rng_for(seed, streams::TARGET_BATCHES),
        }
    }
}

/// Read-only context shared by every step of a run.
pub struct Trainer<'a> {
    config: &'a RunConfig,
    graph: &'a GraphContext,
    data: TrainingData<'a>,
    seen: SeenClasses,
    mode: ModelMode,
    names: Vec<String>,
}

const ADAPTER_PARAMS: usize = 3;

impl<'a> Trainer<'a> {
    pub fn new(config: &'a RunConfig, graph: &'a GraphContext, data: TrainingData<'a>) -> Result<Self> {
        config.validate()?;
        if data.seen_mask.len() != graph.class_count() {
            return Err(Error::Data(format!(
                "{} classes in the seen mask, {} in the class graph",
                data.seen_mask.len(),
                graph.class_count()
            )));
        }
        if data.source_features.cols() != graph.dim() {
            return Err(Error::Dimension {
                op: "trainer",
                left: data.source_features.shape(),
                right: [graph.class_count(), graph.dim()],
            });
        }
        Ok(Trainer {
            config,
            graph,
            data,
            seen: SeenClasses::new(data.seen_mask),
            mode: ModelMode::from_config(config),
            names: ModelParams::names(),
        })
    }

    fn toggles(&self, phase: Phase) -> TermToggles {
        match phase {
            Phase::Source => TermToggles {
                srs: self.config.srs_on_source,
                align: self.config.align_on_source,
            },
            Phase::Target => TermToggles {
                srs: self.config.srs_on_target,
                align: self.config.align_on_target,
            },
        }
    }

    /// Builds the phase objective for a batch and returns the loss breakdown
    /// together with the gradients and parameter handles.
    fn objective(
        &self,
        params: &ModelParams,
        phase: Phase,
        features: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<(LossBreakdown, Tape, Gradients, Vec<Var>)> {
        let train_prototype = phase == Phase::Source;
        let mut tape = Tape::new();
        let fwd = forward(
            &mut tape,
            params,
            self.graph,
            self.mode,
            features,
            true,
            train_prototype,
        )?;
        let cx = LossContext {
            seen: &self.seen,
            graph: self.graph,
            adapter: &fwd.params.adapter,
            use_attention: self.mode.use_attention,
            scale: self.config.temperature,
            margin: self.config.margin,
        };
        let toggles = self.toggles(phase);
        let weights = LossWeights::for_phase(phase, self.config.beta, self.config.gamma, toggles);

        let positives = match (phase, labels) {
            (Phase::Source, Some(l)) => l.to_vec(),
            (Phase::Source, None) => return Err(Error::Data("source step without labels".into())),
            // pseudo-labels from the current parameters, never cached
            (Phase::Target, _) => pseudo_labels(&tape.value(fwd.v).matmul_t(tape.value(fwd.p))?),
        };

        let mut parts = LossParts::default();
        let mut total: Option<Var> = None;
        let mut add_term = |tape: &mut Tape, kind: LossKind, weight: f64, slot: &mut f64| -> Result<()> {
            if weight == 0.0 {
                return Ok(());
            }
            let term = loss_term(tape, kind, &fwd, &positives, &cx)?;
            *slot = tape.value(term).item();
            let weighted = if weight == 1.0 { term } else { tape.scale(term, weight) };
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
            Ok(())
        };
        add_term(&mut tape, LossKind::Ce, weights.ce, &mut parts.ce)?;
        add_term(&mut tape, LossKind::Ranking, weights.ranking, &mut parts.ranking)?;
        add_term(&mut tape, LossKind::Info, weights.info, &mut parts.info)?;
        add_term(&mut tape, LossKind::Align, weights.align, &mut parts.align)?;
        add_term(&mut tape, LossKind::Srs, weights.srs, &mut parts.srs)?;

        let breakdown = compose(phase, parts, self.config.beta, self.config.gamma, toggles);
        let total = total.expect("every phase has a base term");
        let grads = tape.backward(total)?;
        Ok((breakdown, tape, grads, fwd.params.all()))
    }

    /// One optimization step on a batch; returns its loss breakdown.
    pub fn step(
        &self,
        state: &mut TrainState,
        phase: Phase,
        features: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<LossBreakdown> {
        let (breakdown, tape, grads, vars) = self.objective(&state.params, phase, features, labels)?;
        state.step += 1;
        let step = state.step;
        if !breakdown.total.is_finite() {
            return Err(Error::Data(format!("non-finite loss at step {step}")));
        }

        let grad_tensors: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
            .collect();
        let (adapter_moments, prototype_moments) = state.moments.split_at_mut(ADAPTER_PARAMS);
        let mut adapter = state.params.adapter.tensors_mut();
        optimizer_step(
            &mut adapter,
            &grad_tensors[..ADAPTER_PARAMS],
            self.config.lr_adapter,
            adapter_moments,
            &self.names[..ADAPTER_PARAMS],
            step,
        )?;
        if phase == Phase::Source {
            let mut prototype = state.params.prototype.tensors_mut();
            optimizer_step(
                &mut prototype,
                &grad_tensors[ADAPTER_PARAMS..],
                self.config.lr_prototype,
                prototype_moments,
                &self.names[ADAPTER_PARAMS..],
                step,
            )?;
        }
        state.log.push(breakdown.log_line(step));
        Ok(breakdown)
    }

    fn batches(&self, rows: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn source_pass(&self, state: &mut TrainState) -> Result<()> {
        let batches = self.batches(self.data.source_features.rows(), &mut state.source_rng);
        for idx in batches {
            let features = self.data.source_features.gather_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| self.data.source_labels[i]).collect();
            self.step(state, Phase::Source, &features, Some(&labels))?;
        }
        Ok(())
    }

    pub fn target_pass(&self, state: &mut TrainState) -> Result<()> {
        let batches = self.batches(self.data.target_features.rows(), &mut state.target_rng);
        for idx in batches {
            let features = self.data.target_features.gather_rows(&idx);
            self.step(state, Phase::Target, &features, None)?;
        }
        Ok(())
    }

    /// `warmup_epochs` source-only epochs.
    pub fn warmup(&self, state: &mut TrainState) -> Result<()> {
        if self.data.source_features.rows() == 0 {
            return Err(Error::Data("empty source set".into()));
        }
        for _ in 0..self.config.warmup_epochs {
            self.source_pass(state)?;
            state.epoch += 1;
        }
        Ok(())
    }

    /// `joint_epochs` epochs of a source pass followed by a target pass.
    pub fn joint_train(&self, state: &mut TrainState) -> Result<()> {
        let empty_target = self.data.target_features.rows() == 0;
        if empty_target && !self.config.allow_empty_target {
            return Err(Error::Data("empty target set".into()));
        }
        for _ in 0..self.config.joint_epochs {
            self.source_pass(state)?;
            if !empty_target {
                self.target_pass(state)?;
            }
            state.epoch += 1;
        }
        Ok(())
    }

    /// Mean supervised cross-entropy over the whole source set.
    pub fn source_ce(&self, params: &ModelParams) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = forward(
            &mut tape,
            params,
            self.graph,
            self.mode,
            self.data.source_features,
            false,
            false,
        )?;
        let cx = LossContext {
            seen: &self.seen,
            graph: self.graph,
            adapter: &fwd.params.adapter,
            use_attention: self.mode.use_attention,
            scale: self.config.temperature,
            margin: self.config.margin,
        };
        let ce = loss_term(&mut tape, LossKind::Ce, &fwd, self.data.source_labels, &cx)?;
        Ok(tape.value(ce).item())
    }
}

/// Fresh parameters, warm-up, then joint training.
pub fn train(config: &RunConfig, graph: &GraphContext, data: TrainingData<'_>) -> Result<TrainState> {
    let trainer = Trainer::new(config, graph, data)?;
    let params = ModelParams::init(graph.dim(), config)?;
    let mut state = TrainState::new(params, config.seed);
    trainer.warmup(&mut state)?;
    trainer.joint_train(&mut state)?;
    Ok(state)
}
