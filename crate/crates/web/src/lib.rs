//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every exported call returns a JSON string; the page parses it and draws
//! on a canvas. The plain-Rust functions underneath are what the native
//! tests exercise.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use sreclip_core::eval::classify_all;
use sreclip_core::io::Benchmark;
use sreclip_core::pca::Pca;
use sreclip_core::prototype::GraphContext;
use sreclip_core::{
    evaluate, synth_generate, zero_shot_baseline, EvalReport, Model, ModelMode, ModelParams, Result, RunConfig,
    SynthSpec, Tensor, TrainState, Trainer,
};

fn to_js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

fn report_json(r: &EvalReport) -> Value {
    json!({ "seen": r.seen_acc, "unseen": r.unseen_acc, "h": r.h_score })
}

/// 2-D principal-component scatter of `features`, with labels and
/// predicted classes.
fn scatter(features: &Tensor, labels: &[usize], predicted: &[usize], seen_mask: &[bool]) -> Result<Value> {
    let coords = Pca::fit(features, 2)?.project(features)?;
    let points: Vec<Value> = (0..coords.rows())
        .map(|r| {
            json!([
                coords.get(r, 0),
                coords.get(r, 1),
                labels[r],
                predicted[r],
                seen_mask[labels[r]],
            ])
        })
        .collect();
    Ok(json!(points))
}

/// Demo-sized benchmark spec: small enough to train in a page.
pub fn demo_spec(shift_angle: f64, noise_sigma: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        c_seen: 16,
        c_unseen: 4,
        dim: 32,
        per_class: 25,
        shift_angle,
        noise_sigma,
        seed,
    }
}

/// One benchmark plus an in-progress training run.
#[wasm_bindgen]
pub struct Session {
    bench: Benchmark,
    graph: GraphContext,
    config: RunConfig,
    state: TrainState,
}

impl Session {
    pub fn create(spec: &SynthSpec, config: RunConfig) -> Result<Session> {
        config.validate()?;
        let bench = synth_generate(spec)?;
        let graph = GraphContext::new(&bench.graph)?;
        let state = TrainState::new(ModelParams::init(spec.dim, &config)?, config.seed);
        Ok(Session {
            bench,
            graph,
            config,
            state,
        })
    }

    fn model(&self) -> Model {
        Model {
            params: self.state.params.clone(),
            graph: self.graph.clone(),
            mode: ModelMode::from_config(&self.config),
        }
    }

    /// Raw target features against the class text embeddings.
    pub fn explore(&self) -> Result<Value> {
        let b = &self.bench.bundle;
        let text = self.bench.graph.class_embeddings();
        let report = zero_shot_baseline(&b.target_features, &text, &b.target_eval_labels, &b.seen_mask)?;
        let predicted = classify_all(&b.target_features, &text)?;
        Ok(json!({
            "classes": b.class_count(),
            "seen_classes": b.seen_mask.iter().filter(|&&s| s).count(),
            "source_samples": b.source_features.rows(),
            "target_samples": b.target_features.rows(),
            "zero_shot": report_json(&report),
            "points": scatter(&b.target_features, &b.target_eval_labels, &predicted, &b.seen_mask)?,
        }))
    }

    /// Runs one epoch: source-only during warm-up, then source and target.
    pub fn train_epoch(&mut self) -> Result<Value> {
        let trainer = Trainer::new(&self.config, &self.graph, self.bench.bundle.training_view())?;
        let warmup = self.state.epoch < self.config.warmup_epochs;
        trainer.source_pass(&mut self.state)?;
        if !warmup {
            trainer.target_pass(&mut self.state)?;
        }
        self.state.epoch += 1;
        let b = &self.bench.bundle;
        let report = evaluate(&b.target_features, &b.target_eval_labels, &b.seen_mask, &self.model())?;
        Ok(json!({
            "epoch": self.state.epoch,
            "phase": if warmup { "warm-up" } else { "joint" },
            "report": report_json(&report),
            "last": self.state.log.last(),
        }))
    }

    /// Adapted target features under the current parameters.
    pub fn adapted_scatter(&self) -> Result<Value> {
        let b = &self.bench.bundle;
        let model = self.model();
        let adapted = model.embed(&b.target_features)?;
        let predicted = classify_all(&adapted, &model.prototypes()?)?;
        scatter(&adapted, &b.target_eval_labels, &predicted, &b.seen_mask)
    }
}

#[wasm_bindgen]
impl Session {
    /// `overrides` is newline- or comma-separated `key=value` config text.
    #[wasm_bindgen(constructor)]
    pub fn new(
        shift_angle: f64,
        noise_sigma: f64,
        seed: u32,
        overrides: &str,
    ) -> std::result::Result<Session, JsError> {
        let mut config = RunConfig {
            batch_size: 32,
            seed: u64::from(seed),
            ..RunConfig::default()
        };
        for item in overrides.split([',', '\n']).map(str::trim).filter(|s| !s.is_empty()) {
            config.apply_override(item).map_err(|e| JsError::new(&e.to_string()))?;
        }
        Session::create(&demo_spec(shift_angle, noise_sigma, u64::from(seed)), config)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(js_name = explore)]
    pub fn explore_js(&self) -> std::result::Result<String, JsError> {
        to_js(self.explore())
    }

    #[wasm_bindgen(js_name = trainEpoch)]
    pub fn train_epoch_js(&mut self) -> std::result::Result<String, JsError> {
        to_js(self.train_epoch())
    }

    #[wasm_bindgen(js_name = adaptedScatter)]
    pub fn adapted_scatter_js(&self) -> std::result::Result<String, JsError> {
        to_js(self.adapted_scatter())
    }

    #[wasm_bindgen(getter)]
    pub fn epoch(&self) -> usize {
        self.state.epoch
    }
}

/// Harmonic mean of seen and unseen accuracy, in percent.
#[wasm_bindgen(js_name = hScore)]
pub fn h_score(seen: f64, unseen: f64) -> f64 {
    sreclip_core::h_score(seen, unseen)
}
