use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sreclip_core::eval::export_features;
use sreclip_core::io::{load_benchmark, save_benchmark, write_text};
use sreclip_core::model::{load_checkpoint, save_checkpoint};
use sreclip_core::prototype::GraphContext;
use sreclip_core::{
    evaluate, gradcheck, synth_generate, zero_shot_baseline, Error, Model, ModelMode, RunConfig, SynthSpec,
};

#[derive(Parser)]
#[command(
    name = "sreclip",
    version,
    about = "Embedding-space domain-adaptive zero-shot training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set beta=0.5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            config.apply_override(o)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        c_seen: usize,
        #[arg(long, default_value_t = 10)]
        c_unseen: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 0.3)]
        shift_angle: f64,
        #[arg(long, default_value_t = 0.15)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Warm up and jointly train, then evaluate on the target set
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint, or the zero-shot baseline when none is given
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write adapted target (or source) features and a 2-D PCA projection
    ExportFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source: bool,
        #[arg(long)]
        no_projection: bool,
    },
    /// Print the resolved run configuration
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn load_model(checkpoint: &Path, data: &sreclip_core::Benchmark) -> Result<Model, Error> {
    let (params, config) = load_checkpoint(checkpoint)?;
    Ok(Model {
        params,
        graph: GraphContext::new(&data.graph)?,
        mode: ModelMode::from_config(&config),
    })
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::SynthGen {
            out,
            c_seen,
            c_unseen,
            dim,
            per_class,
            shift_angle,
            noise_sigma,
            seed,
        } => {
            let spec = SynthSpec {
                c_seen,
                c_unseen,
                dim,
                per_class,
                shift_angle,
                noise_sigma,
                seed,
            };
            save_benchmark(&out, &synth_generate(&spec)?)?;
            println!("wrote {}", out.display());
        }
        Command::Train { data, out, config } => {
            let config = config.resolve()?;
            let bench = load_benchmark(&data)?;
            let graph = GraphContext::new(&bench.graph)?;
            let state = sreclip_core::train(&config, &graph, bench.bundle.training_view())?;
            let model = Model {
                params: state.params.clone(),
                graph,
                mode: ModelMode::from_config(&config),
            };
            let b = &bench.bundle;
            let report = evaluate(&b.target_features, &b.target_eval_labels, &b.seen_mask, &model)?;
            save_checkpoint(&out, &state.params, &config)?;
            let mut log = state.log.join("\n");
            if !log.is_empty() {
                log.push('\n');
            }
            log.push_str(&report.to_string());
            write_text(&out.join("metrics.log"), &log)?;
            write_text(&out.join("eval.txt"), &report.to_string())?;
            print!("{report}");
        }
        Command::Eval { data, checkpoint } => {
            let bench = load_benchmark(&data)?;
            let b = &bench.bundle;
            let report = match checkpoint {
                Some(dir) => evaluate(
                    &b.target_features,
                    &b.target_eval_labels,
                    &b.seen_mask,
                    &load_model(&dir, &bench)?,
                )?,
                None => zero_shot_baseline(
                    &b.target_features,
                    &bench.graph.class_embeddings(),
                    &b.target_eval_labels,
                    &b.seen_mask,
                )?,
            };
            print!("{report}");
        }
        Command::GradCheck { seed } => {
            let groups = gradcheck::run_suite(seed)?;
            for g in &groups {
                println!(
                    "loss={} param={} max_rel_err={:.3e}",
                    g.loss.name(),
                    g.param,
                    g.max_rel_err
                );
            }
            let worst = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
            println!("max_rel_err={worst:.3e}");
            if worst > gradcheck::TOLERANCE {
                return Err(Failure::Check(format!(
                    "max relative error {worst:.3e} exceeds {:.0e}",
                    gradcheck::TOLERANCE
                )));
            }
        }
        Command::ExportFeatures {
            data,
            checkpoint,
            out,
            source,
            no_projection,
        } => {
            let bench = load_benchmark(&data)?;
            let model = load_model(&checkpoint, &bench)?;
            let b = &bench.bundle;
            let (features, labels) = if source {
                (&b.source_features, &b.source_labels)
            } else {
                (&b.target_features, &b.target_eval_labels)
            };
            export_features(&model, features, Some(labels), &out, !no_projection)?;
            println!("wrote {}", out.display());
        }
        Command::ShowConfig { config } => print!("{}", config.resolve()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (kind, msg) = match failure {
                Failure::Core(e) => (e.kind(), e.to_string()),
                Failure::Check(msg) => ("grad_check", msg),
            };
            println!("error kind={kind} msg={msg:?}");
            ExitCode::FAILURE
        }
    }
}
