//! k-nearest-neighbour topology and the full graph-network block
//! (edge update, node update, global update; sum aggregation).

use std::sync::Arc;

use crate::autodiff::{kaiming_init, mlp_forward, AutodiffError, MlpSpec, ParameterStore, Tape, Var};
use crate::rng::RngStream;

/// Message-passing rounds per network.
pub const NUM_BLOCKS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("neighbour count must be >= 1")]
    ZeroNeighbors,
    #[error("expected {expected} message-passing blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
    #[error("block parameters {0:?} used twice")]
    SharedBlock(String),
    #[error("state has {state} nodes but topology has {topology}")]
    NodeCount { state: usize, topology: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Directed edges as parallel sender/receiver arrays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphTopology {
    pub num_nodes: usize,
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
}

impl GraphTopology {
    pub fn new(num_nodes: usize, senders: Vec<usize>, receivers: Vec<usize>) -> Self {
        assert_eq!(senders.len(), receivers.len());
        Self {
            num_nodes,
            senders: senders.into(),
            receivers: receivers.into(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn is_valid(&self) -> bool {
        self.senders
            .iter()
            .zip(self.receivers.iter())
            .all(|(&s, &r)| s < self.num_nodes && r < self.num_nodes && s != r)
    }

    /// Relabels nodes: node `i` becomes `perm[i]`. Edge order is kept.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            num_nodes: self.num_nodes,
            senders: self.senders.iter().map(|&s| perm[s]).collect(),
            receivers: self.receivers.iter().map(|&r| perm[r]).collect(),
        }
    }
}

/// Each node receives one edge from each of its `k` nearest neighbours
/// (planar Euclidean distance; ties go to the lower index). `k` is clamped
/// to `N − 1`.
pub fn build_knn_graph(positions: &[[f64; 2]], k: usize) -> Result<GraphTopology, GraphError> {
    let n = positions.len();
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    if k == 0 {
        return Err(GraphError::ZeroNeighbors);
    }
    let k = k.min(n - 1);
    let mut senders = Vec::with_capacity(n * k);
    let mut receivers = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, p) in positions.iter().enumerate() {
        cand.clear();
        cand.extend(positions.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, q)| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            (dx * dx + dy * dy, j)
        }));
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_dist);
        for &(_, j) in &cand {
            senders.push(j);
            receivers.push(i);
        }
    }
    Ok(GraphTopology::new(n, senders, receivers))
}

/// Latent sizes and MLP shape shared by the three update functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GnBlockSpec {
    pub n_v: usize,
    pub n_e: usize,
    pub n_u: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl GnBlockSpec {
    /// `2n_v + n_e + n_u → n_e`
    pub fn edge_mlp(&self) -> MlpSpec {
        MlpSpec::new(2 * self.n_v + self.n_e + self.n_u, self.n_e, self.hidden_layers, self.hidden_width)
    }

    /// `n_v + n_e + n_u → n_v`
    pub fn node_mlp(&self) -> MlpSpec {
        MlpSpec::new(self.n_v + self.n_e + self.n_u, self.n_v, self.hidden_layers, self.hidden_width)
    }

    /// `n_v + n_e + n_u → n_u`
    pub fn global_mlp(&self) -> MlpSpec {
        MlpSpec::new(self.n_v + self.n_e + self.n_u, self.n_u, self.hidden_layers, self.hidden_width)
    }

    pub fn init(&self, store: &mut ParameterStore, prefix: &str, rng: &mut RngStream) -> Result<(), AutodiffError> {
        kaiming_init(store, &format!("{prefix}/edge"), &self.edge_mlp(), rng)?;
        kaiming_init(store, &format!("{prefix}/node"), &self.node_mlp(), rng)?;
        kaiming_init(store, &format!("{prefix}/global"), &self.global_mlp(), rng)
    }
}

/// Constant factors applied to the sum aggregations.
///
/// All ones gives plain sum-pools. Any constant keeps aggregation linear in
/// its inputs; it only changes the numerical scale seen by the next MLP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pooling {
    pub edges_to_node: f64,
    pub nodes_to_global: f64,
    pub edges_to_global: f64,
}

impl Pooling {
    pub fn sum() -> Self {
        Self {
            edges_to_node: 1.0,
            nodes_to_global: 1.0,
            edges_to_global: 1.0,
        }
    }

    /// Sums divided by the expected number of contributors.
    pub fn scaled(k: usize, reference_nodes: f64) -> Self {
        let k = k.max(1) as f64;
        Self {
            edges_to_node: 1.0 / k,
            nodes_to_global: 1.0 / reference_nodes,
            edges_to_global: 1.0 / (k * reference_nodes),
        }
    }
}

/// Node `[N × n_v]`, edge `[E × n_e]` and global `[1 × n_u]` features on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub nodes: Var,
    pub edges: Var,
    pub global: Var,
}

fn scaled(tape: &mut Tape, v: Var, c: f64) -> Var {
    if c == 1.0 {
        v
    } else {
        tape.scale(v, c)
    }
}

/// One full GN block: edges, then nodes, then the global vector.
pub fn gn_block(
    tape: &mut Tape,
    state: GraphState,
    topo: &GraphTopology,
    store: &ParameterStore,
    prefix: &str,
    spec: &GnBlockSpec,
    pooling: &Pooling,
) -> Result<GraphState, GraphError> {
    let n = tape.value(state.nodes).rows();
    if n != topo.num_nodes {
        return Err(GraphError::NodeCount {
            state: n,
            topology: topo.num_nodes,
        });
    }
    let e = topo.num_edges();

    let v_recv = tape.gather_rows(state.nodes, topo.receivers.clone())?;
    let v_send = tape.gather_rows(state.nodes, topo.senders.clone())?;
    let u_edges = tape.repeat_rows(state.global, e)?;
    let edge_in = tape.concat_cols(&[v_recv, v_send, state.edges, u_edges])?;
    let edges = mlp_forward(tape, edge_in, store, &format!("{prefix}/edge"), &spec.edge_mlp())?;

    let incoming = tape.scatter_add_rows(edges, topo.receivers.clone(), n)?;
    let incoming = scaled(tape, incoming, pooling.edges_to_node);
    let u_nodes = tape.repeat_rows(state.global, n)?;
    let node_in = tape.concat_cols(&[state.nodes, incoming, u_nodes])?;
    let nodes = mlp_forward(tape, node_in, store, &format!("{prefix}/node"), &spec.node_mlp())?;

    let node_sum = tape.sum_rows(nodes)?;
    let node_sum = scaled(tape, node_sum, pooling.nodes_to_global);
    let edge_sum = tape.sum_rows(edges)?;
    let edge_sum = scaled(tape, edge_sum, pooling.edges_to_global);
    let global_in = tape.concat_cols(&[node_sum, edge_sum, state.global])?;
    let global = mlp_forward(tape, global_in, store, &format!("{prefix}/global"), &spec.global_mlp())?;

    Ok(GraphState { nodes, edges, global })
}

/// Applies the blocks in order without weight sharing.
pub fn message_passing(
    tape: &mut Tape,
    mut state: GraphState,
    topo: &GraphTopology,
    store: &ParameterStore,
    blocks: &[String],
    spec: &GnBlockSpec,
    pooling: &Pooling,
) -> Result<GraphState, GraphError> {
    if blocks.len() != NUM_BLOCKS {
        return Err(GraphError::BlockCount {
            expected: NUM_BLOCKS,
            got: blocks.len(),
        });
    }
    for (i, b) in blocks.iter().enumerate() {
        if blocks[..i].contains(b) {
            return Err(GraphError::SharedBlock(b.clone()));
        }
    }
    for b in blocks {
        state = gn_block(tape, state, topo, store, b, spec, pooling)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::substream;

    fn line(xs: &[f64]) -> Vec<[f64; 2]> {
        xs.iter().map(|&x| [x, 0.0]).collect()
    }

    #[test]
    fn knn_on_a_line() {
        let g = build_knn_graph(&line(&[0.0, 1.0, 3.0]), 1).unwrap();
        let edges: Vec<(usize, usize)> = g.senders.iter().copied().zip(g.receivers.iter().copied()).collect();
        assert_eq!(edges, vec![(1, 0), (0, 1), (1, 2)]);
    }

    #[test]
    fn knn_saturates_to_complete_graph() {
        let g = build_knn_graph(&line(&[0.0, 1.0, 3.0, 7.0]), 10).unwrap();
        assert_eq!(g.num_edges(), 12);
        assert!(g.is_valid());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        // node 1 is equidistant from 0 and 2
        let g = build_knn_graph(&line(&[0.0, 1.0, 2.0]), 1).unwrap();
        assert_eq!(g.senders[1], 0);
        // exact duplicates are allowed
        let d = build_knn_graph(&line(&[0.5, 0.5, 0.5]), 1).unwrap();
        assert_eq!(&*d.senders, &[1, 0, 0]);
    }

    #[test]
    fn knn_errors() {
        assert!(matches!(build_knn_graph(&line(&[0.0]), 1), Err(GraphError::TooFewNodes(1))));
        assert!(matches!(build_knn_graph(&line(&[0.0, 1.0]), 0), Err(GraphError::ZeroNeighbors)));
    }

    fn setup(n_nodes: usize) -> (GnBlockSpec, ParameterStore) {
        let spec = GnBlockSpec {
            n_v: 3,
            n_e: 2,
            n_u: 2,
            hidden_layers: 1,
            hidden_width: 5,
        };
        let mut store = ParameterStore::new();
        let mut rng = substream(3, "gn-test", n_nodes as u64);
        for b in 0..NUM_BLOCKS {
            spec.init(&mut store, &format!("b{b}"), &mut rng).unwrap();
        }
        (spec, store)
    }

    #[test]
    fn single_node_has_zero_edge_aggregate() {
        let (spec, store) = setup(1);
        let topo = GraphTopology::new(1, vec![], vec![]);
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::row(&[0.1, 0.2, 0.3]));
        let edges = tape.constant(Tensor::zeros(&[0, 2]));
        let global = tape.constant(Tensor::zeros(&[1, 2]));
        let out = gn_block(
            &mut tape,
            GraphState { nodes, edges, global },
            &topo,
            &store,
            "b0",
            &spec,
            &Pooling::sum(),
        )
        .unwrap();
        assert_eq!(tape.value(out.edges).shape(), &[0, 2]);
        assert_eq!(tape.value(out.nodes).shape(), &[1, 3]);
    }

    #[test]
    fn zero_mlps_give_zero_state() {
        let (spec, mut store) = setup(4);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let pos = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let topo = build_knn_graph(&pos, 2).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::full(&[4, 3], 0.7));
        let edges = tape.constant(Tensor::full(&[8, 2], -0.3));
        let global = tape.constant(Tensor::zeros(&[1, 2]));
        let blocks: Vec<String> = (0..NUM_BLOCKS).map(|b| format!("b{b}")).collect();
        let out = message_passing(
            &mut tape,
            GraphState { nodes, edges, global },
            &topo,
            &store,
            &blocks,
            &spec,
            &Pooling::sum(),
        )
        .unwrap();
        for v in [out.nodes, out.edges, out.global] {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn block_count_and_sharing_enforced() {
        let (spec, store) = setup(2);
        let topo = build_knn_graph(&line(&[0.0, 1.0]), 1).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::zeros(&[2, 3]));
        let edges = tape.constant(Tensor::zeros(&[2, 2]));
        let global = tape.constant(Tensor::zeros(&[1, 2]));
        let st = GraphState { nodes, edges, global };
        let two = vec!["b0".to_string(), "b1".to_string()];
        assert!(matches!(
            message_passing(&mut tape, st, &topo, &store, &two, &spec, &Pooling::sum()),
            Err(GraphError::BlockCount { .. })
        ));
        let shared = vec!["b0".to_string(), "b1".to_string(), "b0".to_string()];
        assert!(matches!(
            message_passing(&mut tape, st, &topo, &store, &shared, &spec, &Pooling::sum()),
            Err(GraphError::SharedBlock(_))
        ));
    }
}
