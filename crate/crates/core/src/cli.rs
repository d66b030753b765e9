//! The `latent-align` command line: train, eval, gen-synth, align and
//! gradcheck over one JSON run configuration.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::PoolingMode;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{GradCheckConfig, RunConfig};
use crate::crossmodal::FusionMode;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::{EmbeddingSource, Model, ModelSettings};
use crate::objectives::sample_wrong_candidate;
use crate::params::Session;
use crate::synth::{generate_synthetic, SynthConfig};
use crate::training::{evaluate, hasty_baseline, train_epochs, EpochRecord, EvalReport, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "latent-align",
    version,
    about = "Train and inspect latent-alignment cloze models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write history.csv, final.ckpt and config.echo.json.
    Train(TrainArgs),
    /// Report accuracy and p@2 of a checkpoint (or the hasty baseline).
    Eval(EvalArgs),
    /// Write a synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Print the similarity matrix and alignment of one example.
    Align(AlignArgs),
    /// Finite-difference check of the configured model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted keys take the defaults listed below.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.fusion=lxmert`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs even if the schedule has more.
    #[arg(long, value_name = "N")]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (not needed with `--baseline hasty`).
    #[arg(long, value_name = "CKPT", required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Pooling used at inference [default: the checkpoint's training pooling, else constrained].
    #[arg(long, value_parser = parse_pooling)]
    pub pooling: Option<PoolingMode>,
    /// Report a baseline instead of the model.
    #[arg(long, value_parser = ["hasty"])]
    pub baseline: Option<String>,
    /// Also print one JSON line per example.
    #[arg(long)]
    pub per_example: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AlignArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Example id.
    #[arg(long, value_name = "ID")]
    pub example: String,
    #[arg(long, value_parser = parse_pooling, default_value = "constrained")]
    pub pooling: PoolingMode,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Test fixture: add a loss term whose gradient is deliberately wrong.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn parse_pooling(s: &str) -> std::result::Result<PoolingMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn command_with_defaults() -> clap::Command {
    let defaults = format!(
        "Default configuration (every key can be given with --set):\n{}",
        RunConfig::default().to_json()
    );
    let mut cmd = Cli::command();
    for name in ["train", "gen-synth", "gradcheck"] {
        cmd = cmd.mut_subcommand(name, |sub| sub.after_long_help(defaults.clone()));
    }
    cmd
}

/// Parses `args` (program name first) and runs the command, reporting
/// failures on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command_with_defaults()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!("\n  caused by: {s}"));
                }
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

/// Runs one command. `Ok(false)` is a clean run whose verdict is
/// negative (a failed gradient check).
pub fn run(command: Command, out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Train(a) => cmd_train(&a, out).map(|_| true),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| true),
        Command::GenSynth(a) => cmd_gen_synth(&a, out).map(|_| true),
        Command::Align(a) => cmd_align(&a, out).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set (use --set {key}=PATH)")))
}

/// `epoch,mean_loss,lr` with shortest round-trip numbers.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut csv = String::from("epoch,mean_loss,lr\n");
    for r in history {
        csv.push_str(&format!("{},{:?},{:?}\n", r.epoch, r.mean_loss, r.lr));
    }
    csv
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<Option<EvalReport>> {
    let config = args.config.load()?;
    let train_data = load_dataset(required(&config.train_data, "train_data")?)?;
    let test_data = config.test_data.as_deref().map(load_dataset).transpose()?;

    let (mut model, mut state) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let state = ckpt
                .state
                .ok_or_else(|| Error::Checkpoint(format!("{} holds no training state to resume", path.display())))?;
            if ckpt.model.settings() != &config.model {
                return Err(Error::Config(format!(
                    "model settings differ from those stored in {}",
                    path.display()
                )));
            }
            (ckpt.model, state)
        }
        None => {
            let model = Model::for_dataset(config.model.clone(), &train_data, config.seed)?;
            let state = TrainState::new(model.params(), config.seed);
            (model, state)
        }
    };

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let options = config.train_options();
    let records = train_epochs(
        &mut model,
        &train_data,
        &options,
        &mut state,
        args.max_epochs.unwrap_or(usize::MAX),
    )?;
    for r in &records {
        writeln!(
            out,
            "epoch {:>3}  lr {:<5}  mean loss {:.6}",
            r.epoch, r.lr, r.mean_loss
        )?;
    }

    let echo = serde_json::to_value(&config)?;
    write_file(&args.out.join("history.csv"), &history_csv(&state.history))?;
    write_file(&args.out.join("config.echo.json"), &config.to_json())?;
    save_checkpoint(args.out.join("final.ckpt"), &model, Some(&state), Some(&echo))?;

    let report = match &test_data {
        Some(test) => {
            let report = evaluate(&model, test, config.pooling)?;
            writeln!(out, "test {}", report.summary())?;
            Some(report)
        }
        None => None,
    };
    writeln!(out, "wrote {}", args.out.display())?;
    Ok(report)
}

fn pooling_from_echo(echo: Option<&serde_json::Value>) -> Option<PoolingMode> {
    serde_json::from_value(echo?.get("pooling")?.clone()).ok()
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let data = load_dataset(&args.data)?;
    let report = match (&args.baseline, &args.checkpoint) {
        (Some(_), _) => hasty_baseline(&data),
        (None, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            let pooling = args
                .pooling
                .or_else(|| pooling_from_echo(ckpt.config.as_ref()))
                .unwrap_or_default();
            evaluate(&ckpt.model, &data, pooling)?
        }
        (None, None) => return Err(Error::InvalidArgument("--checkpoint is required".into())),
    };
    writeln!(out, "{}", report.summary())?;
    if args.per_example {
        for r in &report.records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
    }
    Ok(report)
}

pub fn cmd_gen_synth(args: &GenSynthArgs, out: &mut dyn Write) -> Result<Dataset> {
    let config = args.config.load()?;
    let data = generate_synthetic(&config.synth_config())?;
    data.save(&args.out)?;
    writeln!(
        out,
        "wrote {} {} examples to {}",
        data.len(),
        data.split,
        args.out.display()
    )?;
    Ok(data)
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:>8.4}")).collect::<Vec<_>>().join(" ")
}

fn fmt_indices(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn cmd_align(args: &AlignArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    ckpt.model.check_dataset(&data)?;
    let ex = data
        .find(&args.example)
        .ok_or_else(|| Error::InvalidArgument(format!("no example `{}` in {}", args.example, args.data.display())))?;
    let inf = ckpt.model.infer(ex, args.pooling)?;
    let s = &inf.matrix;
    let steps: Vec<String> = (0..s.num_steps())
        .map(|j| format!("{:>8}", format!("step{j}")))
        .collect();
    writeln!(out, "example {}  pooling {}", ex.id, args.pooling)?;
    writeln!(out, "S:      {}", steps.join(" "))?;
    for c in 0..4 {
        writeln!(out, "cand{c}  {}", fmt_row(s.row(c)))?;
    }
    let a = &inf.alignment;
    writeln!(out, "assignments: {}", fmt_indices(&a.assignments))?;
    writeln!(
        out,
        "m: {}",
        a.selected
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    )?;
    writeln!(out, "pick_order: {}", fmt_indices(&a.pick_order))?;
    writeln!(out, "predicted: {}", inf.prediction.predicted)?;
    writeln!(out, "gold: {}", ex.answer)?;
    Ok(())
}

/// Settings for the gradient probe: the configured fusion and layer
/// layout with every width replaced by `probe.model_dim`.
pub fn probe_settings(settings: &ModelSettings, probe: &GradCheckConfig) -> ModelSettings {
    let d = probe.model_dim;
    ModelSettings {
        embed_dim: d,
        hidden_dim: d,
        question_hidden_dim: d,
        mlp_hidden: vec![d; settings.mlp_hidden.len()],
        image_hidden_dim: d,
        attention_dim: d,
        init_scale: probe.init_scale,
        embedding_source: EmbeddingSource::Trainable,
        ..settings.clone()
    }
}

/// Result of [`check_model_gradients`].
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub report: GradCheckReport,
    /// Seed of the probe that was finally checked.
    pub seed: u64,
    /// Seeds passed over, each with the reason.
    pub skipped: Vec<(u64, String)>,
}

/// Grad-checks the full model loss on a small seeded synthetic example.
/// It moves on to the next seed while a hinge input or a pooling decision
/// lies within `2·epsilon` of its switching point, or while the loss is
/// flat zero.
pub fn check_model_gradients(config: &RunConfig, inject_fault: bool) -> Result<ModelCheck> {
    let probe = &config.gradcheck;
    let settings = probe_settings(&config.model, probe);
    let eps = probe.epsilon;
    let mut skipped = Vec::new();
    for attempt in 0..=probe.max_reseeds as u64 {
        let seed = config.seed.wrapping_add(attempt);
        let data = generate_synthetic(&SynthConfig {
            num_examples: 1,
            min_steps: probe.num_steps,
            max_steps: probe.num_steps,
            vocab_size: probe.vocab_size,
            tokens_per_step: probe.tokens_per_step,
            subset_size: probe.tokens_per_step,
            with_images: settings.fusion != FusionMode::None,
            feature_dim: probe.feature_dim,
            seed,
            ..SynthConfig::default()
        })?;
        let model = Model::for_dataset(settings.clone(), &data, seed)?;
        let ex = &data.examples[0];
        let wrong = sample_wrong_candidate(ex.answer, &mut ChaCha8Rng::seed_from_u64(seed));
        let objective = &config.objective;
        let loss = |g: &mut Graph, vars: &[Var]| {
            let mut s = Session::new(g, vars);
            let fwd = model.forward(&mut s, ex, config.pooling)?;
            let margin = fwd.alignment.decision_margin;
            let loss = model.loss(s.graph, &fwd, ex.answer, objective, wrong)?;
            g.note_kink(margin);
            if !inject_fault {
                return Ok(loss);
            }
            // Adds sum(e * e) over the embedding table while backpropagating
            // through only one factor, so the analytic gradient is half the
            // true one.
            let table = vars[0];
            let frozen = g.constant(g.value(table).clone());
            let square = g.mul(table, frozen)?;
            let extra = g.sum(square)?;
            g.add(loss, extra)
        };
        let mut probe_graph = Graph::new();
        let vars = model.params().bind(&mut probe_graph);
        let root = loss(&mut probe_graph, &vars)?;
        if probe_graph.value(root).item() == 0.0 {
            skipped.push((seed, "loss is exactly zero, so every gradient vanishes".to_string()));
            continue;
        }
        let mut tensors = model.param_tensors();
        let report = grad_check(loss, &mut tensors, eps)?;
        if report.kink_distance < 2.0 * eps {
            skipped.push((
                seed,
                format!("switching point {:.1e} away (< 2·epsilon)", report.kink_distance),
            ));
            continue;
        }
        return Ok(ModelCheck { report, seed, skipped });
    }
    Err(Error::InvalidArgument(format!(
        "no usable probe among seeds {} to {}: {}",
        config.seed,
        config.seed.wrapping_add(probe.max_reseeds as u64),
        skipped
            .iter()
            .map(|(s, why)| format!("seed {s}: {why}"))
            .collect::<Vec<_>>()
            .join("; ")
    )))
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let config = args.config.load()?;
    let check = check_model_gradients(&config, args.inject_fault)?;
    for (seed, why) in &check.skipped {
        writeln!(out, "seed {seed} skipped: {why}")?;
    }
    let r = &check.report;
    let pass = r.max_relative_error < config.gradcheck.tolerance;
    writeln!(
        out,
        "fusion {} objective {} seed {}: {} entries, max relative error {:.1e} ({})",
        config.model.fusion,
        config.objective.kind,
        check.seed,
        r.entries_checked,
        r.max_relative_error,
        if pass { "pass" } else { "FAIL" }
    )?;
    Ok(pass)
}
