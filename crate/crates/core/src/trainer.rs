//! Joint training of the allocation and inference networks with the
//! escalating budget penalty τ.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{optimizer_step, AutodiffError, Checkpoint, CheckpointError, OptimizerConfig, ParameterStore, Tape, Tensor, Var};
use crate::graph::GraphError;
use crate::models::{self, FieldGraph, GnnHyperparams, GNN2};
use crate::rng::substream;
use crate::simulator::{apply_posterior_noise_with, apply_prior_noise, posterior_noise_draws, FieldSample, NoiseModel, PosteriorDraws};
use crate::simulator::{simulate_indexed, SimError, SimulatorConfig};

pub const CHECKPOINT_FORMAT: &str = "allocnet-train";
/// Window length for the moving-average early stop.
pub const LOSS_WINDOW: u64 = 500;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {}: {}", .0.step, serde_json::to_string(.0).unwrap_or_default())]
    NonFinite(Box<TrainRecord>),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total observing budget H per field, minutes.
    pub budget: f64,
    /// Feasibility tolerance η in minutes; `None` means 10⁻³·H.
    pub tolerance: Option<f64>,
    /// ℓ₁ sparsity weight α.
    pub sparsity: f64,
    /// Constant τ instead of the escalating schedule.
    pub fixed_tau: Option<f64>,
    pub steps: u64,
    /// Fields averaged per step.
    pub batch_size: usize,
    /// Initial steps during which only the inference network is updated.
    pub warmup_steps: u64,
    pub early_stop: bool,
    pub checkpoint_every: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 10_000.0,
            tolerance: None,
            sparsity: 0.0,
            fixed_tau: None,
            steps: 5_000,
            batch_size: 1,
            warmup_steps: 0,
            early_stop: false,
            checkpoint_every: 500,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(1e-3 * self.budget)
    }

    /// δτ = 0.1·H⁻².
    pub fn tau_increment(&self) -> f64 {
        0.1 / (self.budget * self.budget)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return bad("budget must be positive");
        }
        if !(self.tolerance() > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.sparsity >= 0.0) {
            return bad("sparsity weight must be >= 0");
        }
        if let Some(t) = self.fixed_tau {
            if !(t >= 0.0 && t.is_finite()) {
                return bad("fixed tau must be >= 0");
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint interval must be >= 1");
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub seed: u64,
    pub simulator: SimulatorConfig,
    pub noise: NoiseModel,
    pub model: GnnHyperparams,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.simulator.validate()?;
        self.noise.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

/// One logged step. With a batch, every field is the batch mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub loss_phi: f64,
    pub loss_budget: f64,
    pub loss_l1: f64,
    pub sum_r: f64,
    pub tau: f64,
    pub phi: f64,
    pub phi_hat: f64,
}

/// Tape nodes of the combined loss and its unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub phi: Var,
    pub budget: Var,
    pub l1: Var,
}

/// `L = (φ̂ − φ)² + τ(Σr − H)² + α·Σ|r|`.
pub fn combined_loss(
    tape: &mut Tape,
    phi_hat: Var,
    phi: f64,
    allocations: Var,
    budget: f64,
    tau: f64,
    sparsity: f64,
) -> Result<LossTerms, AutodiffError> {
    let err = tape.add_scalar(phi_hat, -phi);
    let sq = tape.square(err);
    let loss_phi = tape.sum(sq);
    let total_r = tape.sum(allocations);
    let gap = tape.add_scalar(total_r, -budget);
    let loss_budget = tape.square(gap);
    let abs_r = tape.abs(allocations);
    let loss_l1 = tape.sum(abs_r);
    let weighted_budget = tape.scale(loss_budget, tau);
    let weighted_l1 = tape.scale(loss_l1, sparsity);
    let total = tape.add(loss_phi, weighted_budget)?;
    let total = tape.add(total, weighted_l1)?;
    Ok(LossTerms {
        total,
        phi: loss_phi,
        budget: loss_budget,
        l1: loss_l1,
    })
}

/// `τ + δτ` when `|Σr − H| > η`, otherwise `τ`.
pub fn tau_update(tau: f64, sum_r: f64, budget: f64, tolerance: f64, increment: f64) -> f64 {
    if (sum_r - budget).abs() > tolerance {
        tau + increment
    } else {
        tau
    }
}

/// Mutable training state; everything needed to resume bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParameterStore,
    pub tau: f64,
    /// Steps completed so far.
    pub step: u64,
    pub window_sum: f64,
    pub window_len: u64,
    pub previous_window_mean: Option<f64>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn init(setup: &TrainSetup) -> Result<Self, TrainError> {
        let store = models::init_params(
            &setup.model,
            &mut substream(setup.seed, "init/gnn1", 0),
            &mut substream(setup.seed, "init/gnn2", 0),
        )?;
        Ok(Self {
            store,
            tau: setup.train.fixed_tau.unwrap_or(0.0),
            step: 0,
            window_sum: 0.0,
            window_len: 0,
            previous_window_mean: None,
            stopped_early: false,
        })
    }
}

/// Inputs of one field with fixed noise draws, ready to be put on a tape.
#[derive(Clone, Debug)]
pub struct PreparedField {
    pub phi: f64,
    pub field: FieldSample,
    pub graph: FieldGraph,
    pub prior: Vec<[f64; 4]>,
    pub draws: PosteriorDraws,
}

/// Where fields and their noise come from.
#[derive(Clone, Copy, Debug)]
pub struct FieldSource<'a> {
    pub seed: u64,
    pub simulator: &'a SimulatorConfig,
    pub noise: &'a NoiseModel,
    pub model: &'a GnnHyperparams,
}

impl<'a> FieldSource<'a> {
    pub fn of(setup: &'a TrainSetup, seed: u64) -> Self {
        Self {
            seed,
            simulator: &setup.simulator,
            noise: &setup.noise,
            model: &setup.model,
        }
    }

    /// The `index`-th field of stream `label`: simulation, prior noise and
    /// posterior draws each come from their own substream.
    pub fn prepare(&self, label: &str, index: u64, fixed_phi: Option<f64>) -> Result<PreparedField, TrainError> {
        let field = simulate_indexed(self.simulator, self.seed, label, index, fixed_phi)?;
        let prior = apply_prior_noise(&field, self.noise, &mut substream(self.seed, &format!("{label}/prior"), index));
        let draws = posterior_noise_draws(field.len(), &mut substream(self.seed, &format!("{label}/posterior"), index));
        let graph = FieldGraph::build(&field.positions(), self.model)?;
        Ok(PreparedField {
            phi: field.phi,
            field,
            graph,
            prior,
            draws,
        })
    }
}

/// Values of the loss pipeline on one field.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub terms: LossTerms,
    pub allocations: Var,
    pub phi_hat: Var,
}

/// Records prior state → allocation → smooth posterior → φ̂ → loss.
pub fn forward_field(
    tape: &mut Tape,
    prepared: &PreparedField,
    store: &ParameterStore,
    model: &GnnHyperparams,
    noise: &NoiseModel,
    train: &TrainConfig,
    tau: f64,
) -> Result<ForwardOutput, TrainError> {
    let x_prior = tape.constant(models::mass_distance_inputs(&prepared.prior));
    let allocations = models::gnn1_forward(tape, &prepared.graph, x_prior, model, store)?;
    let mut x_post = apply_posterior_noise_with(tape, &prepared.field, allocations, noise, &prepared.draws)?;
    if model.allocation_feature {
        x_post = tape.concat_cols(&[x_post, allocations])?;
    }
    let phi_hat = models::gnn2_forward(tape, &prepared.graph, x_post, model, store)?;
    let terms = combined_loss(tape, phi_hat, prepared.phi, allocations, train.budget, tau, train.sparsity)?;
    Ok(ForwardOutput {
        terms,
        allocations,
        phi_hat,
    })
}

/// One parameter update from `batch_size` fresh fields, then the τ update.
pub fn train_step(setup: &TrainSetup, state: &mut TrainState) -> Result<TrainRecord, TrainError> {
    let cfg = &setup.train;
    let b = cfg.batch_size as u64;
    let mut tape = Tape::new();
    let mut totals = Vec::with_capacity(cfg.batch_size);
    let mut sums = [0.0f64; 6];
    for j in 0..b {
        let prepared = FieldSource::of(setup, setup.seed).prepare("train", state.step * b + j, None)?;
        let out = forward_field(&mut tape, &prepared, &state.store, &setup.model, &setup.noise, cfg, state.tau)?;
        totals.push(out.terms.total);
        let v = |x: Var| tape.value(x).item();
        let vals = [
            v(out.terms.phi),
            v(out.terms.budget),
            v(out.terms.l1),
            tape.value(out.allocations).sum(),
            prepared.phi,
            v(out.phi_hat),
        ];
        for (s, x) in sums.iter_mut().zip(vals) {
            *s += x;
        }
    }
    let mut loss = totals[0];
    for &t in &totals[1..] {
        loss = tape.add(loss, t)?;
    }
    if b > 1 {
        loss = tape.scale(loss, 1.0 / b as f64);
    }
    let mean = sums.map(|s| if b > 1 { s / b as f64 } else { s });
    let record = TrainRecord {
        step: state.step,
        loss: tape.value(loss).item(),
        loss_phi: mean[0],
        loss_budget: mean[1],
        loss_l1: mean[2],
        sum_r: mean[3],
        tau: state.tau,
        phi: mean[4],
        phi_hat: mean[5],
    };
    if !record.loss.is_finite() {
        return Err(TrainError::NonFinite(Box::new(record)));
    }

    let warming_up = state.step < cfg.warmup_steps;
    let mut grads = tape.backward(loss)?.into_params();
    if warming_up {
        grads.retain(|name, _| name.starts_with(&format!("{GNN2}/")));
    }
    optimizer_step(&mut state.store, &grads, &cfg.optimizer)?;

    if cfg.fixed_tau.is_none() && !warming_up {
        state.tau = tau_update(state.tau, record.sum_r, cfg.budget, cfg.tolerance(), cfg.tau_increment());
    }
    state.step += 1;
    state.window_sum += record.loss;
    state.window_len += 1;
    if state.window_len == LOSS_WINDOW {
        let mean = state.window_sum / LOSS_WINDOW as f64;
        if let Some(prev) = state.previous_window_mean {
            if cfg.early_stop && (prev - mean) < 1e-4 * prev.abs() {
                state.stopped_early = true;
            }
        }
        state.previous_window_mean = Some(mean);
        state.window_sum = 0.0;
        state.window_len = 0;
    }
    Ok(record)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    setup: TrainSetup,
    step: u64,
    window_len: u64,
    previous_window_mean: Option<f64>,
    stopped_early: bool,
}

/// Serializes the state. τ and the window sum travel as tensors so they
/// round-trip bit-exactly.
pub fn state_checkpoint(setup: &TrainSetup, state: &TrainState) -> Checkpoint {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        setup: setup.clone(),
        step: state.step,
        window_len: state.window_len,
        previous_window_mean: state.previous_window_mean,
        stopped_early: state.stopped_early,
    };
    let mut ckpt = Checkpoint {
        metadata: serde_json::to_string(&meta).expect("serializable metadata"),
        ..Checkpoint::default()
    };
    ckpt.put_store(&state.store);
    ckpt.tensors.insert("train/tau".into(), Tensor::scalar(state.tau));
    ckpt.tensors.insert("train/window_sum".into(), Tensor::scalar(state.window_sum));
    if let Some(p) = state.previous_window_mean {
        ckpt.tensors.insert("train/previous_window_mean".into(), Tensor::scalar(p));
    }
    ckpt
}

/// Restores the setup and state written by [`state_checkpoint`].
pub fn restore_checkpoint(ckpt: &Checkpoint) -> Result<(TrainSetup, TrainState), TrainError> {
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata).map_err(|e| TrainError::Metadata(e.to_string()))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Metadata(format!("unknown format {:?}", meta.format)));
    }
    let scalar = |name: &str| {
        ckpt.tensors
            .get(name)
            .map(|t| t.item())
            .ok_or_else(|| TrainError::Metadata(format!("missing tensor {name}")))
    };
    let state = TrainState {
        store: ckpt.take_store()?,
        tau: scalar("train/tau")?,
        step: meta.step,
        window_sum: scalar("train/window_sum")?,
        window_len: meta.window_len,
        previous_window_mean: meta
            .previous_window_mean
            .map(|_| scalar("train/previous_window_mean"))
            .transpose()?,
        stopped_early: meta.stopped_early,
    };
    Ok((meta.setup, state))
}

/// Loads the trained parameters and model hyperparameters from a checkpoint.
pub fn load_model(path: &Path) -> Result<(TrainSetup, ParameterStore), TrainError> {
    let (setup, state) = restore_checkpoint(&Checkpoint::read(path)?)?;
    Ok((setup, state.store))
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.agnn"))
}

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for the JSONL log and checkpoints; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Print a progress line to stderr every this many steps.
    pub progress_every: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<TrainRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Runs until `steps` are complete (or the early stop fires), starting from
/// `resume` if given. Resuming appends to an existing log.
pub fn train(setup: &TrainSetup, resume: Option<TrainState>, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    setup.validate()?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(setup)?,
    };
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(LOG_FILE);
            let file = if state.step == 0 {
                File::create(path)?
            } else {
                OpenOptions::new().append(true).create(true).open(path)?
            };
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut last_written = None;
    while state.step < setup.train.steps && !state.stopped_early {
        let record = match train_step(setup, &mut state) {
            Ok(r) => r,
            Err(e) => {
                if let (Some(w), TrainError::NonFinite(r)) = (log.as_mut(), &e) {
                    writeln!(w, "{}", serde_json::to_string(r).expect("record"))?;
                    w.flush()?;
                }
                return Err(e);
            }
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("record"))?;
        }
        if let Some(every) = opts.progress_every {
            if state.step % every == 0 {
                eprintln!(
                    "step {:>6}  loss {:.5e}  phi {:.3} phi_hat {:.3}  sum_r {:.1}  tau {:.3e}",
                    record.step, record.loss, record.phi, record.phi_hat, record.sum_r, record.tau
                );
            }
        }
        records.push(record);
        if state.step % setup.train.checkpoint_every == 0 {
            if let Some(dir) = &opts.out_dir {
                let p = checkpoint_path(dir, state.step);
                state_checkpoint(setup, &state).write(&p)?;
                last_written = Some((state.step, p));
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    let final_checkpoint = match &opts.out_dir {
        Some(dir) => match last_written {
            Some((s, p)) if s == state.step => Some(p),
            _ => {
                let p = checkpoint_path(dir, state.step);
                state_checkpoint(setup, &state).write(&p)?;
                Some(p)
            }
        },
        None => None,
    };
    Ok(TrainOutcome {
        state,
        records,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OptimizerKind;

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            seed: 3,
            simulator: SimulatorConfig {
                mean_count: 30.0,
                mean_cluster_size: 5.0,
                min_count: Some(10),
                max_count: Some(60),
                ..SimulatorConfig::default()
            },
            noise: NoiseModel::default(),
            model: GnnHyperparams {
                n_v: 6,
                n_e: 6,
                n_u: 6,
                k: 4,
                hidden_layers: 1,
                hidden_width: 10,
                pool_reference_nodes: 30.0,
                ..GnnHyperparams::default()
            },
            train: TrainConfig {
                budget: 150.0,
                steps: 6,
                checkpoint_every: 3,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn loss_arithmetic() {
        let mut tape = Tape::new();
        let phi_hat = tape.constant(Tensor::from_rows(&[vec![0.4]]).unwrap());
        let r = tape.constant(Tensor::column(&[1.0, 3.0, 8.0]));
        let t = combined_loss(&mut tape, phi_hat, 0.3, r, 10.0, 0.05, 0.0).unwrap();
        assert!((tape.value(t.total).item() - 0.21).abs() < 1e-12);
        let r = tape.constant(Tensor::column(&[4.0, 6.0]));
        let phi_hat = tape.constant(Tensor::from_rows(&[vec![0.3]]).unwrap());
        let t = combined_loss(&mut tape, phi_hat, 0.3, r, 10.0, 7.0, 0.0).unwrap();
        assert_eq!(tape.value(t.total).item(), 0.0);
    }

    #[test]
    fn sparsity_gradient_adds_alpha() {
        let mut tape = Tape::new();
        let phi_hat = tape.constant(Tensor::from_rows(&[vec![0.3]]).unwrap());
        let r = tape.input(Tensor::column(&[2.0, 5.0]));
        let t = combined_loss(&mut tape, phi_hat, 0.3, r, 7.0, 1.0, 0.25).unwrap();
        let g = tape.backward(t.total).unwrap();
        assert_eq!(g.wrt(r).unwrap().data(), &[0.25, 0.25]);
    }

    #[test]
    fn tau_schedule() {
        let h = 100.0;
        let inc = 0.1 / (h * h);
        assert_eq!(tau_update(0.2, h, h, 0.1, inc), 0.2);
        assert_eq!(tau_update(0.2, h + 0.2, h, 0.1, inc), 0.2 + 0.1 / (h * h));
        let mut tau = 0.0;
        for _ in 0..7 {
            tau = tau_update(tau, 2.0 * h, h, 0.1, inc);
        }
        assert!((tau - 7.0 * inc).abs() < 1e-18);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut setup = tiny_setup();
        setup.train.optimizer = OptimizerConfig::plain(0.0);
        let mut state = TrainState::init(&setup).unwrap();
        let before = state.store.clone();
        let rec = train_step(&setup, &mut state).unwrap();
        assert_eq!(rec.step, 0);
        for (name, t) in before.iter() {
            assert_eq!(t, state.store.get(name).unwrap());
        }
    }

    #[test]
    fn same_seed_same_records() {
        let setup = tiny_setup();
        let a = train(&setup, None, &TrainOptions::default()).unwrap();
        let b = train(&setup, None, &TrainOptions::default()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 6);
    }

    #[test]
    fn fixed_tau_is_constant() {
        let mut setup = tiny_setup();
        setup.train.fixed_tau = Some(0.01);
        let out = train(&setup, None, &TrainOptions::default()).unwrap();
        assert!(out.records.iter().all(|r| r.tau == 0.01));
    }

    #[test]
    fn warmup_freezes_allocation_network() {
        let mut setup = tiny_setup();
        setup.train.warmup_steps = 3;
        setup.train.steps = 3;
        let init = TrainState::init(&setup).unwrap();
        let out = train(&setup, None, &TrainOptions::default()).unwrap();
        for (name, t) in init.store.iter() {
            if name.starts_with("gnn1/") {
                assert_eq!(t, out.state.store.get(name).unwrap(), "{name}");
            }
        }
        assert!(out.records.iter().all(|r| r.tau == 0.0));
    }

    #[test]
    fn batch_mean_decomposes() {
        let mut setup = tiny_setup();
        setup.train.batch_size = 3;
        setup.train.steps = 2;
        setup.train.fixed_tau = Some(1e-3);
        let out = train(&setup, None, &TrainOptions::default()).unwrap();
        for r in &out.records {
            let recomposed = r.loss_phi + r.tau * r.loss_budget;
            assert!((r.loss - recomposed).abs() <= 1e-12 * r.loss.abs().max(1.0));
        }
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut setup = tiny_setup();
        setup.train.steps = 0;
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            progress_every: None,
        };
        let out = train(&setup, None, &opts).unwrap();
        assert!(out.records.is_empty());
        let files: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".agnn"))
            .collect();
        assert_eq!(files, vec!["checkpoint-000000.agnn".to_string()]);
        let (_, restored) = restore_checkpoint(&Checkpoint::read(&checkpoint_path(dir.path(), 0)).unwrap()).unwrap();
        assert_eq!(restored, TrainState::init(&setup).unwrap());
    }

    #[test]
    fn optimizer_kind_round_trips_through_checkpoint() {
        let mut setup = tiny_setup();
        setup.train.optimizer.kind = OptimizerKind::PlainGradient;
        let state = TrainState::init(&setup).unwrap();
        let (s2, st2) = restore_checkpoint(&state_checkpoint(&setup, &state)).unwrap();
        assert_eq!(s2, setup);
        assert_eq!(st2, state);
    }
}
