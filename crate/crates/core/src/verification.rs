//! Randomized gradient-check suite: tape gradients against central finite
//! differences for MLPs, GN blocks, the smooth posterior noise and the full
//! training loss on a 10-galaxy field.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::autodiff::{
    finite_difference_grad, kaiming_init, mlp_forward, relative_error, AutodiffError, MlpSpec, ParameterStore, Tape, Tensor, Var,
};
use crate::graph::{build_knn_graph, gn_block, GnBlockSpec, GraphState, Pooling};
use crate::models::{init_params, FieldGraph, GnnHyperparams};
use crate::rng::{child_seed, substream, RngStream};
use crate::simulator::{apply_posterior_noise_with, apply_prior_noise, posterior_noise_draws, FieldSample, Galaxy, NoiseModel};
use crate::trainer::{forward_field, PreparedField, TrainConfig};

pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;
/// Parameter coordinates sampled per instance.
const MAX_COORDS: usize = 120;

pub const FAMILIES: [&str; 4] = ["mlp", "gn_block", "posterior_noise", "end_to_end"];

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub family: &'static str,
    pub index: usize,
    pub coords: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SuiteReport {
    pub instances: Vec<InstanceResult>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.instances.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.instances.is_empty() && self.instances.iter().all(|r| r.rel_error <= TOLERANCE)
    }
}

type Build<'a> = dyn Fn(&mut Tape, &ParameterStore, Var) -> Result<Var, AutodiffError> + 'a;

fn eval(build: &Build, store: &ParameterStore, input: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    build(&mut tape, store, x).map_or(f64::NAN, |l| tape.value(l).item())
}

/// Relative error over every input coordinate plus a random subset of
/// parameter coordinates.
fn check(store: &ParameterStore, input: &Tensor, build: &Build, rng: &mut RngStream) -> Result<(usize, f64), AutodiffError> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let loss = build(&mut tape, store, x)?;
    let grads = tape.backward(loss)?;

    let mut analytic = match grads.wrt(x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; input.numel()],
    };
    let mut numeric = finite_difference_grad(|xi| eval(build, store, xi), input, STEP)?
        .into_data();

    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    let picked: Vec<&(String, usize)> = if coords.len() > MAX_COORDS {
        sample(rng, coords.len(), MAX_COORDS).into_iter().map(|i| &coords[i]).collect()
    } else {
        coords.iter().collect()
    };
    let values = Tensor::row(&picked.iter().map(|(n, i)| store.get(n).unwrap().data()[*i]).collect::<Vec<_>>());
    let mut probe = store.clone();
    let fd = finite_difference_grad(
        |v| {
            for ((n, i), &val) in picked.iter().zip(v.data()) {
                probe.get_mut(n).unwrap().data_mut()[*i] = val;
            }
            eval(build, &probe, input)
        },
        &values,
        STEP,
    )?;
    let param_grads = grads.params();
    for ((n, i), g) in picked.iter().zip(fd.data()) {
        analytic.push(param_grads.get(n).map_or(0.0, |t| t.data()[*i]));
        numeric.push(*g);
    }
    Ok((analytic.len(), relative_error(&analytic, &numeric)))
}

fn random_tensor(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
}

/// Zero biases put ReLUs exactly on their kink whenever a whole layer is
/// inactive, where the one-sided derivatives disagree.
fn randomize_biases(store: &mut ParameterStore, rng: &mut RngStream) -> Result<(), AutodiffError> {
    let names: Vec<String> = store.names().filter(|n| n.ends_with("/b")).cloned().collect();
    for n in names {
        let b = random_tensor(rng, store.get(&n)?.shape(), 0.3);
        *store.get_mut(&n)? = b;
    }
    Ok(())
}

fn mlp_instance(rng: &mut RngStream) -> Result<(usize, f64), AutodiffError> {
    let spec = MlpSpec::new(rng.random_range(1..5), rng.random_range(1..4), rng.random_range(0..3), rng.random_range(2..7));
    let mut store = ParameterStore::new();
    kaiming_init(&mut store, "m", &spec, rng)?;
    randomize_biases(&mut store, rng)?;
    let rows = rng.random_range(1..5);
    let input = random_tensor(rng, &[rows, spec.input_dim], 1.0);
    let weights = random_tensor(rng, &[input.rows(), spec.output_dim], 1.0);
    let build = move |tape: &mut Tape, store: &ParameterStore, x: Var| {
        let y = mlp_forward(tape, x, store, "m", &spec)?;
        let c = tape.constant(weights.clone());
        let p = tape.mul(y, c)?;
        Ok(tape.sum(p))
    };
    check(&store, &input, &build, rng)
}

fn gn_instance(rng: &mut RngStream) -> Result<(usize, f64), AutodiffError> {
    let n = rng.random_range(3..9);
    let k = rng.random_range(1..4);
    let positions: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let topo = build_knn_graph(&positions, k).map_err(|e| AutodiffError::InvalidSpec(e.to_string()))?;
    let spec = GnBlockSpec {
        n_v: rng.random_range(1..4),
        n_e: rng.random_range(1..4),
        n_u: rng.random_range(1..4),
        hidden_layers: rng.random_range(0..2),
        hidden_width: rng.random_range(2..6),
    };
    let mut store = ParameterStore::new();
    spec.init(&mut store, "blk", rng)?;
    randomize_biases(&mut store, rng)?;
    let pooling = if rng.random::<bool>() { Pooling::sum() } else { Pooling::scaled(k, n as f64) };
    let e = topo.num_edges();
    let edges = random_tensor(rng, &[e, spec.n_e], 1.0);
    let global = random_tensor(rng, &[1, spec.n_u], 1.0);
    let nodes = random_tensor(rng, &[n, spec.n_v], 1.0);
    let weights = [
        random_tensor(rng, &[n, spec.n_v], 1.0),
        random_tensor(rng, &[e, spec.n_e], 1.0),
        random_tensor(rng, &[1, spec.n_u], 1.0),
    ];
    let build = move |tape: &mut Tape, store: &ParameterStore, x: Var| {
        let state = GraphState {
            nodes: x,
            edges: tape.constant(edges.clone()),
            global: tape.constant(global.clone()),
        };
        let out = gn_block(tape, state, &topo, store, "blk", &spec, &pooling).map_err(|e| AutodiffError::InvalidSpec(e.to_string()))?;
        let mut total = None;
        for (v, w) in [out.nodes, out.edges, out.global].into_iter().zip(&weights) {
            let c = tape.constant(w.clone());
            let p = tape.mul(v, c)?;
            let s = tape.sum(p);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        Ok(total.expect("three terms"))
    };
    check(&store, &nodes, &build, rng)
}

fn small_field(rng: &mut RngStream, n: usize) -> FieldSample {
    FieldSample {
        phi: 0.3,
        galaxies: (0..n)
            .map(|_| Galaxy {
                x1: rng.random(),
                x2: rng.random(),
                d: rng.random(),
                log_m: rng.random(),
            })
            .collect(),
        origin: None,
    }
}

fn posterior_instance(rng: &mut RngStream) -> Result<(usize, f64), AutodiffError> {
    let noise = NoiseModel::default();
    let n = rng.random_range(3..9);
    let field = small_field(rng, n);
    let draws = posterior_noise_draws(field.len(), rng);
    // Allocations within a few smoothing widths of each galaxy's threshold.
    let alloc: Vec<f64> = field
        .galaxies
        .iter()
        .map(|g| (noise.r_min(g.d, g.log_m) + noise.smooth_width * (6.0 * rng.random::<f64>() - 3.0)).max(0.5))
        .collect();
    let input = Tensor::column(&alloc);
    let truth: Vec<f64> = field.galaxies.iter().flat_map(|g| [g.d, g.log_m]).collect();
    let truth = Tensor::new(vec![field.len(), 2], truth).unwrap();
    let build = move |tape: &mut Tape, _: &ParameterStore, r: Var| {
        let post = apply_posterior_noise_with(tape, &field, r, &noise, &draws).map_err(|e| AutodiffError::InvalidSpec(e.to_string()))?;
        let t = tape.constant(truth.clone());
        let diff = tape.sub(post, t)?;
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.0 / (2 * field.len()) as f64))
    };
    check(&ParameterStore::new(), &input, &build, rng)
}

fn end_to_end_instance(rng: &mut RngStream, index: u64) -> Result<(usize, f64), AutodiffError> {
    let model = GnnHyperparams {
        n_v: 3,
        n_e: 3,
        n_u: 3,
        k: 3,
        hidden_layers: 1,
        hidden_width: 4,
        pool_reference_nodes: 10.0,
        allocation_feature: index % 4 == 3,
        ..GnnHyperparams::default()
    };
    let train = TrainConfig {
        budget: 100.0,
        sparsity: if index.is_multiple_of(2) { 0.0 } else { 1e-3 },
        ..TrainConfig::default()
    };
    let noise = NoiseModel::default();
    let spec_err = |e: String| AutodiffError::InvalidSpec(e);
    let mut field = small_field(rng, 10);
    field.phi = 0.1 + 0.4 * rng.random::<f64>();
    let mut rng2 = child(rng);
    let mut store = init_params(&model, rng, &mut rng2).map_err(|e| spec_err(e.to_string()))?;
    randomize_biases(&mut store, rng)?;
    let prepared = PreparedField {
        phi: field.phi,
        graph: FieldGraph::build(&field.positions(), &model).map_err(|e| spec_err(e.to_string()))?,
        prior: apply_prior_noise(&field, &noise, rng),
        draws: posterior_noise_draws(field.len(), rng),
        field,
    };
    let tau = 1e-4 * rng.random::<f64>();
    let build = move |tape: &mut Tape, store: &ParameterStore, _: Var| {
        let out = forward_field(tape, &prepared, store, &model, &noise, &train, tau).map_err(|e| spec_err(e.to_string()))?;
        Ok(out.terms.total)
    };
    // Parameters only: the loss has no differentiable input of its own.
    check(&store, &Tensor::zeros(&[0]), &build, rng)
}

fn child(rng: &mut RngStream) -> RngStream {
    RngStream::seed_from_u64(child_seed(rng))
}

/// Runs `per_family` instances of each family (at least 100 in total with
/// the default of 25).
pub fn run_suite(seed: u64, per_family: usize) -> Result<SuiteReport, AutodiffError> {
    let mut report = SuiteReport::default();
    for family in FAMILIES {
        for i in 0..per_family {
            let mut rng = substream(seed, &format!("gradcheck/{family}"), i as u64);
            let (coords, rel_error) = match family {
                "mlp" => mlp_instance(&mut rng)?,
                "gn_block" => gn_instance(&mut rng)?,
                "posterior_noise" => posterior_instance(&mut rng)?,
                _ => end_to_end_instance(&mut rng, i as u64)?,
            };
            report.instances.push(InstanceResult {
                family,
                index: i,
                coords,
                rel_error,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let r = run_suite(11, 3).unwrap();
        assert_eq!(r.instances.len(), 12);
        assert!(r.passed(), "max error {}", r.max_error());
    }

    #[test]
    fn broken_gradient_is_detected() {
        // A loss whose tape gradient is deliberately wrong by a factor of two.
        let input = Tensor::column(&[0.3, -0.7]);
        let build = |tape: &mut Tape, _: &ParameterStore, x: Var| {
            let sq = tape.square(x);
            let s = tape.sum(sq);
            let v = tape.value(s).item();
            let c = tape.constant(Tensor::scalar(v));
            let half = tape.scale(s, 0.5);
            let half_const = tape.scale(c, 0.5);
            tape.add(half, half_const)
        };
        let (_, err) = check(&ParameterStore::new(), &input, &build, &mut substream(1, "x", 0)).unwrap();
        assert!(err > 0.1);
    }
}
