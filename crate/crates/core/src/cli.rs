//! Command-line front end. Every file written here is a pure function of
//! the resolved config, seed and input checkpoint; progress goes to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, ParameterStore};
use crate::baselines::{write_ga_history, Baseline1Params, Baseline2Params};
use crate::config::RunConfig;
use crate::evaluate::{report_table, run_evaluation, tune_baselines, write_report, EvalContext, EvalReport, Method, PhiEval};
use crate::simulator::{simulate_indexed, write_field};
use crate::trainer::{restore_checkpoint, train, FieldSource, TrainOptions, TrainSetup};
use crate::verification::{run_suite, FAMILIES, TOLERANCE};

/// Gradient-check instances per family.
pub const GRADCHECK_PER_FAMILY: usize = 25;

#[derive(Debug, Parser)]
#[command(name = "allocnet", version, about = "Budgeted observing-time allocation with graph networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write simulated fields as CSV plus metadata.
    Simulate(Common),
    /// Train both networks jointly; --checkpoint resumes a run.
    Train(Common),
    /// Compare the trained policy against the baselines.
    Evaluate(EvalArgs),
    /// GA-tune Baseline 1 and Baseline 2 against a trained inference network.
    Baseline(Common),
    /// Finite-difference verification of the autodiff engine.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration (defaults when omitted).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Config override, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Test-field φ: a number, or "prior" to sample φ per field.
    #[arg(long, value_name = "PHI|prior")]
    pub phi: Option<PhiEval>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => {
                fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))?;
                Ok(p)
            }
            None => bail!("missing required flag --out DIR"),
        }
    }

    fn checkpoint(&self, subcommand: &str) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .with_context(|| format!("{subcommand} needs a trained model: missing required flag --checkpoint PATH"))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => simulate(&c),
        Command::Train(c) => train_cmd(&c),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Baseline(c) => baseline_cmd(&c),
        Command::Gradcheck(c) => gradcheck(&c),
    }
}

fn simulate(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let out = c.out()?;
    let s = &cfg.simulate;
    for i in 0..s.n_fields as u64 {
        let field = simulate_indexed(&cfg.simulator, cfg.seed, &s.label, i, s.phi.fixed())?;
        write_field(out, &format!("field_{i:04}"), &field, &cfg.simulator)?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("wrote {} fields to {}", s.n_fields, out.display());
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let out = c.out()?;
    let setup = cfg.train_setup();
    let resume = match &c.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::read(p).with_context(|| format!("cannot read checkpoint {}", p.display()))?;
            let (saved, state) = restore_checkpoint(&ckpt)?;
            check_resumable(&saved, &setup)?;
            Some(state)
        }
        None => None,
    };
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let outcome = train(
        &setup,
        resume,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
            progress_every: Some(setup.train.checkpoint_every),
        },
    )?;
    let tail = &outcome.records[outcome.records.len().saturating_sub(500)..];
    let mean = |f: fn(&crate::trainer::TrainRecord) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "trained to step {}{}: loss_phi {:.5} sum_r {:.2} (last {} steps), tau {:.4e}",
        outcome.state.step,
        if outcome.state.stopped_early { " (early stop)" } else { "" },
        mean(|r| r.loss_phi),
        mean(|r| r.sum_r),
        tail.len(),
        outcome.state.tau,
    );
    if let Some(p) = outcome.final_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

/// Only the step budget and early-stop switch may change on resume.
fn check_resumable(saved: &TrainSetup, requested: &TrainSetup) -> Result<()> {
    let mut a = saved.clone();
    a.train.steps = requested.train.steps;
    a.train.early_stop = requested.train.early_stop;
    a.train.checkpoint_every = requested.train.checkpoint_every;
    if &a != requested {
        bail!("incompatible checkpoint: it was trained with a different configuration (only train.steps, train.early_stop and train.checkpoint_every may change on resume)");
    }
    Ok(())
}

fn load_trained(path: &Path) -> Result<(TrainSetup, ParameterStore)> {
    let ckpt = Checkpoint::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let (setup, state) = restore_checkpoint(&ckpt).with_context(|| format!("incompatible checkpoint {}", path.display()))?;
    Ok((setup, state.store))
}

/// Tuned or configured baseline parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub baseline1: Baseline1Params,
    pub baseline2: Baseline2Params,
}

/// Networks, simulator and noise come from the checkpoint; the seed and
/// evaluation settings from `cfg`.
fn context<'a>(setup: &'a TrainSetup, store: &'a ParameterStore, cfg: &RunConfig) -> EvalContext<'a> {
    EvalContext {
        store,
        model: &setup.model,
        source: FieldSource::of(setup, cfg.seed),
        budget: setup.train.budget,
        grid: cfg.evaluate.time_grid,
    }
}

/// Uses configured baseline parameters where given and GA-tunes the rest,
/// writing the GA histories under `out`.
fn baselines(ctx: &EvalContext, cfg: &RunConfig, out: &Path) -> Result<BaselineParams> {
    if let (Some(b1), Some(b2)) = (cfg.baseline1, cfg.baseline2) {
        return Ok(BaselineParams {
            baseline1: b1,
            baseline2: b2,
        });
    }
    eprintln!("tuning baselines: {} generations of {}", cfg.evaluate.ga.generations, cfg.evaluate.ga.population);
    let tuned = tune_baselines(ctx, &cfg.evaluate)?;
    write_ga_history(&out.join("ga_baseline1.csv"), &tuned.ga1.history)?;
    write_ga_history(&out.join("ga_baseline2.csv"), &tuned.ga2.history)?;
    Ok(BaselineParams {
        baseline1: cfg.baseline1.unwrap_or(tuned.baseline1),
        baseline2: cfg.baseline2.unwrap_or(tuned.baseline2),
    })
}

/// Full evaluation of a trained model; also used by the acceptance tests.
pub fn evaluate_trained(setup: &TrainSetup, store: &ParameterStore, cfg: &RunConfig, out: &Path) -> Result<(EvalReport, BaselineParams)> {
    fs::create_dir_all(out)?;
    let ctx = context(setup, store, cfg);
    let params = baselines(&ctx, cfg, out)?;
    fs::write(out.join("baselines.toml"), toml::to_string(&params)?)?;
    let methods = [
        Method::Gnn1,
        Method::Baseline1(params.baseline1),
        Method::Baseline2(params.baseline2),
        Method::Zero,
    ];
    let report = run_evaluation(&ctx, &methods, &cfg.evaluate)?;
    write_report(out, &report)?;
    Ok((report, params))
}

fn evaluate_cmd(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    let path = c.checkpoint("evaluate")?;
    let mut cfg = c.load()?;
    if let Some(phi) = a.phi {
        cfg.evaluate.phi = phi;
    }
    let out = c.out()?;
    let (setup, store) = load_trained(path)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let (report, _) = evaluate_trained(&setup, &store, &cfg, out)?;
    print!("{}", report_table(&report));
    Ok(())
}

fn baseline_cmd(c: &Common) -> Result<()> {
    let path = c.checkpoint("baseline")?;
    let mut cfg = c.load()?;
    let out = c.out()?;
    let (setup, store) = load_trained(path)?;
    cfg.baseline1 = None;
    cfg.baseline2 = None;
    let params = baselines(&context(&setup, &store, &cfg), &cfg, out)?;
    let text = toml::to_string(&params)?;
    fs::write(out.join("baselines.toml"), &text)?;
    print!("{text}");
    Ok(())
}

fn gradcheck(c: &Common) -> Result<()> {
    let seed = match c.seed {
        Some(s) => s,
        None => c.load()?.seed,
    };
    let report = run_suite(seed, GRADCHECK_PER_FAMILY)?;
    for family in FAMILIES {
        let (n, max) = report
            .instances
            .iter()
            .filter(|r| r.family == family)
            .fold((0, 0.0f64), |(n, m), r| (n + 1, m.max(r.rel_error)));
        println!("{family:<16} {n:>3} instances  max relative error {max:.3e}");
    }
    println!("max relative error {:.3e} over {} instances (tolerance {TOLERANCE:e})", report.max_error(), report.instances.len());
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}
