//! The allocation network (set → per-galaxy minutes) and the inference
//! network (set → φ̂). Both are encoder → three GN blocks → decoder stacks
//! over the kNN graph of angular positions and share no parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kaiming_init, mlp_forward, MlpSpec, ParameterStore, Tape, Tensor, Var};
use crate::graph::{build_knn_graph, message_passing, GnBlockSpec, GraphError, GraphState, GraphTopology, Pooling, NUM_BLOCKS};
use crate::rng::RngStream;

pub const GNN1: &str = "gnn1";
pub const GNN2: &str = "gnn2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnHyperparams {
    pub n_v: usize,
    pub n_e: usize,
    pub n_u: usize,
    /// Neighbours per node in the kNN graph.
    pub k: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub r_low: f64,
    pub r_high: f64,
    /// Length unit for the relative-position edge inputs.
    pub edge_scale: f64,
    /// Divide aggregations by their expected contributor counts (`k` edges
    /// per node, `pool_reference_nodes` nodes per field). Off = raw sums.
    pub scaled_pooling: bool,
    pub pool_reference_nodes: f64,
    /// Append the allocation as a third node input of the inference network.
    pub allocation_feature: bool,
}

impl Default for GnnHyperparams {
    fn default() -> Self {
        Self {
            n_v: 64,
            n_e: 64,
            n_u: 64,
            k: 8,
            hidden_layers: 2,
            hidden_width: 128,
            r_low: 0.0,
            r_high: 60.0,
            edge_scale: 0.05,
            scaled_pooling: true,
            pool_reference_nodes: 200.0,
            allocation_feature: false,
        }
    }
}

impl GnnHyperparams {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::Autodiff(crate::autodiff::AutodiffError::InvalidSpec(m.into())));
        if self.n_v == 0 || self.n_e == 0 || self.n_u == 0 {
            return bad("latent sizes must be >= 1");
        }
        if self.k == 0 {
            return Err(GraphError::ZeroNeighbors);
        }
        if !(self.r_high > self.r_low) {
            return bad("r_high must exceed r_low");
        }
        if !(self.edge_scale > 0.0) {
            return bad("edge_scale must be positive");
        }
        if self.pool_reference_nodes <= 0.0 {
            return bad("pool_reference_nodes must be positive");
        }
        Ok(())
    }

    pub fn block_spec(&self) -> GnBlockSpec {
        GnBlockSpec {
            n_v: self.n_v,
            n_e: self.n_e,
            n_u: self.n_u,
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
        }
    }

    fn mlp(&self, input: usize, output: usize) -> MlpSpec {
        MlpSpec::new(input, output, self.hidden_layers, self.hidden_width)
    }

    pub fn pooling(&self) -> Pooling {
        if self.scaled_pooling {
            Pooling::scaled(self.k, self.pool_reference_nodes)
        } else {
            Pooling::sum()
        }
    }

    fn gnn2_node_inputs(&self) -> usize {
        if self.allocation_feature {
            3
        } else {
            2
        }
    }
}

fn block_names(net: &str) -> Vec<String> {
    (0..NUM_BLOCKS).map(|b| format!("{net}/block{b}")).collect()
}

/// Kaiming-initialized parameters for both networks under the `gnn1/` and
/// `gnn2/` prefixes.
pub fn init_params(hyper: &GnnHyperparams, rng1: &mut RngStream, rng2: &mut RngStream) -> Result<ParameterStore, GraphError> {
    hyper.validate()?;
    let mut store = ParameterStore::new();
    for (net, rng) in [(GNN1, rng1), (GNN2, rng2)] {
        let node_in = if net == GNN1 { 2 } else { hyper.gnn2_node_inputs() };
        kaiming_init(&mut store, &format!("{net}/node_enc"), &hyper.mlp(node_in, hyper.n_v), rng)?;
        kaiming_init(&mut store, &format!("{net}/edge_enc"), &hyper.mlp(2, hyper.n_e), rng)?;
        for b in block_names(net) {
            hyper.block_spec().init(&mut store, &b, rng)?;
        }
        if net == GNN1 {
            kaiming_init(&mut store, &format!("{net}/node_dec"), &hyper.mlp(hyper.n_v, 1), rng)?;
        } else {
            kaiming_init(&mut store, &format!("{net}/global_dec"), &hyper.mlp(hyper.n_u, 1), rng)?;
        }
    }
    Ok(store)
}

/// Topology and relative-position edge features of one field. Positions are
/// measured exactly, so the same graph serves both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGraph {
    pub topology: GraphTopology,
    /// `[E × 2]`: sender position minus receiver position, in units of
    /// `edge_scale`.
    pub edge_features: Tensor,
}

impl FieldGraph {
    pub fn build(positions: &[[f64; 2]], hyper: &GnnHyperparams) -> Result<Self, GraphError> {
        let topology = build_knn_graph(positions, hyper.k)?;
        Ok(Self::from_topology(topology, positions, hyper.edge_scale))
    }

    pub fn from_topology(topology: GraphTopology, positions: &[[f64; 2]], edge_scale: f64) -> Self {
        let mut data = Vec::with_capacity(2 * topology.num_edges());
        for (&s, &r) in topology.senders.iter().zip(topology.receivers.iter()) {
            data.push((positions[s][0] - positions[r][0]) / edge_scale);
            data.push((positions[s][1] - positions[r][1]) / edge_scale);
        }
        let edge_features = Tensor::new(vec![topology.num_edges(), 2], data).expect("2 columns per edge");
        Self {
            topology,
            edge_features,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes
    }
}

fn encode_and_pass(
    tape: &mut Tape,
    net: &str,
    graph: &FieldGraph,
    node_inputs: Var,
    hyper: &GnnHyperparams,
    store: &ParameterStore,
) -> Result<GraphState, GraphError> {
    let n = tape.value(node_inputs).rows();
    if n != graph.num_nodes() {
        return Err(GraphError::NodeCount {
            state: n,
            topology: graph.num_nodes(),
        });
    }
    let node_in_dim = tape.value(node_inputs).cols();
    let nodes = mlp_forward(tape, node_inputs, store, &format!("{net}/node_enc"), &hyper.mlp(node_in_dim, hyper.n_v))?;
    let edge_in = tape.constant(graph.edge_features.clone());
    let edges = mlp_forward(tape, edge_in, store, &format!("{net}/edge_enc"), &hyper.mlp(2, hyper.n_e))?;
    let global = tape.constant(Tensor::zeros(&[1, hyper.n_u]));
    let state = GraphState { nodes, edges, global };
    message_passing(
        tape,
        state,
        &graph.topology,
        store,
        &block_names(net),
        &hyper.block_spec(),
        &hyper.pooling(),
    )
}

/// Per-galaxy allocations `[N × 1]` in `(r_low, r_high)` minutes from the
/// prior-state node inputs `(d′, log_m′)`, shape `[N × 2]`.
pub fn gnn1_forward(
    tape: &mut Tape,
    graph: &FieldGraph,
    node_inputs: Var,
    hyper: &GnnHyperparams,
    store: &ParameterStore,
) -> Result<Var, GraphError> {
    let state = encode_and_pass(tape, GNN1, graph, node_inputs, hyper, store)?;
    let raw = mlp_forward(tape, state.nodes, store, &format!("{GNN1}/node_dec"), &hyper.mlp(hyper.n_v, 1))?;
    let s = tape.sigmoid(raw);
    let r = tape.scale(s, hyper.r_high - hyper.r_low);
    Ok(if hyper.r_low != 0.0 { tape.add_scalar(r, hyper.r_low) } else { r })
}

/// Scalar φ̂ (shape `[1 × 1]`) from posterior-state node inputs
/// `(d″, log_m″)` (plus the allocation when enabled).
pub fn gnn2_forward(
    tape: &mut Tape,
    graph: &FieldGraph,
    node_inputs: Var,
    hyper: &GnnHyperparams,
    store: &ParameterStore,
) -> Result<Var, GraphError> {
    let state = encode_and_pass(tape, GNN2, graph, node_inputs, hyper, store)?;
    Ok(mlp_forward(tape, state.global, store, &format!("{GNN2}/global_dec"), &hyper.mlp(hyper.n_u, 1))?)
}

/// `[N × 2]` constant of the `(d, log_m)` columns of feature rows.
pub fn mass_distance_inputs(features: &[[f64; 4]]) -> Tensor {
    let data = features.iter().flat_map(|v| [v[2], v[3]]).collect();
    Tensor::new(vec![features.len(), 2], data).expect("2 columns")
}

/// Allocations for known prior-state features, without gradients.
pub fn allocate(
    graph: &FieldGraph,
    prior_features: &[[f64; 4]],
    hyper: &GnnHyperparams,
    store: &ParameterStore,
) -> Result<Vec<f64>, GraphError> {
    let mut tape = Tape::new();
    let x = tape.constant(mass_distance_inputs(prior_features));
    let r = gnn1_forward(&mut tape, graph, x, hyper, store)?;
    Ok(tape.value(r).data().to_vec())
}

/// φ̂ for known posterior-state features, without gradients.
pub fn infer_phi(
    graph: &FieldGraph,
    posterior_features: &[[f64; 4]],
    allocations: &[f64],
    hyper: &GnnHyperparams,
    store: &ParameterStore,
) -> Result<f64, GraphError> {
    let mut tape = Tape::new();
    let mut x = mass_distance_inputs(posterior_features);
    if hyper.allocation_feature {
        let data = posterior_features
            .iter()
            .zip(allocations)
            .flat_map(|(v, &r)| [v[2], v[3], r])
            .collect();
        x = Tensor::new(vec![posterior_features.len(), 3], data)?;
    }
    let x = tape.constant(x);
    let phi = gnn2_forward(&mut tape, graph, x, hyper, store)?;
    Ok(tape.value(phi).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn small() -> GnnHyperparams {
        GnnHyperparams {
            n_v: 6,
            n_e: 5,
            n_u: 4,
            k: 3,
            hidden_layers: 1,
            hidden_width: 8,
            pool_reference_nodes: 10.0,
            ..GnnHyperparams::default()
        }
    }

    fn positions(n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|i| [((i * 7) % 11) as f64 / 11.0, ((i * 3) % 5) as f64 / 5.0 + i as f64 * 1e-3]).collect()
    }

    fn features(n: usize) -> Vec<[f64; 4]> {
        positions(n)
            .into_iter()
            .enumerate()
            .map(|(i, p)| [p[0], p[1], (i as f64 * 0.37).fract(), (i as f64 * 0.61).fract()])
            .collect()
    }

    #[test]
    fn allocation_shape_and_range() {
        let h = small();
        let store = init_params(&h, &mut substream(1, "a", 0), &mut substream(1, "b", 0)).unwrap();
        let f = features(9);
        let g = FieldGraph::build(&positions(9), &h).unwrap();
        let r = allocate(&g, &f, &h, &store).unwrap();
        assert_eq!(r.len(), 9);
        assert!(r.iter().all(|&x| x > 0.0 && x < 60.0));
    }

    #[test]
    fn zero_decoder_allocates_half_the_cap() {
        let h = small();
        let mut store = init_params(&h, &mut substream(1, "a", 0), &mut substream(1, "b", 0)).unwrap();
        let names: Vec<String> = store.names().filter(|n| n.starts_with("gnn1/node_dec")).cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = FieldGraph::build(&positions(7), &h).unwrap();
        let r = allocate(&g, &features(7), &h, &store).unwrap();
        assert!(r.iter().all(|&x| x == 30.0));
    }

    #[test]
    fn networks_do_not_share_parameters() {
        let h = small();
        let store = init_params(&h, &mut substream(1, "a", 0), &mut substream(1, "b", 0)).unwrap();
        assert!(store.names().all(|n| n.starts_with("gnn1/") || n.starts_with("gnn2/")));
        let mut perturbed = store.clone();
        let gnn2: Vec<String> = store.names().filter(|n| n.starts_with("gnn2/")).cloned().collect();
        for n in &gnn2 {
            perturbed.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let g = FieldGraph::build(&positions(8), &h).unwrap();
        let f = features(8);
        assert_eq!(allocate(&g, &f, &h, &store).unwrap(), allocate(&g, &f, &h, &perturbed).unwrap());
        let r = vec![1.0; 8];
        assert_ne!(
            infer_phi(&g, &f, &r, &h, &store).unwrap(),
            infer_phi(&g, &f, &r, &h, &perturbed).unwrap()
        );
    }

    #[test]
    fn inference_output_is_scalar_for_any_size() {
        let h = small();
        let store = init_params(&h, &mut substream(2, "a", 0), &mut substream(2, "b", 0)).unwrap();
        for n in [2, 5, 30] {
            let g = FieldGraph::build(&positions(n), &h).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(mass_distance_inputs(&features(n)));
            let phi = gnn2_forward(&mut tape, &g, x, &h, &store).unwrap();
            assert_eq!(tape.value(phi).numel(), 1);
        }
    }

    #[test]
    fn allocation_feature_widens_inference_input() {
        let h = GnnHyperparams {
            allocation_feature: true,
            ..small()
        };
        let store = init_params(&h, &mut substream(2, "a", 0), &mut substream(2, "b", 0)).unwrap();
        assert_eq!(store.get("gnn2/node_enc/l0/w").unwrap().shape()[0], 3);
        assert_eq!(store.get("gnn1/node_enc/l0/w").unwrap().shape()[0], 2);
        let g = FieldGraph::build(&positions(6), &h).unwrap();
        assert!(infer_phi(&g, &features(6), &[5.0; 6], &h, &store).unwrap().is_finite());
    }
}
