//! Undirected graphs, symmetric normalization, propagation operators and
//! transductive splits.

use std::cell::Cell;
use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

thread_local! {
    static GRAPH_OPS: Cell<u64> = const { Cell::new(0) };
}

fn bump_graph_ops() {
    GRAPH_OPS.with(|c| c.set(c.get() + 1));
}

/// Number of graph-structured operations (adjacency products, per-edge
/// gathers and scatters) executed on the current thread.
pub fn graph_op_count() -> u64 {
    GRAPH_OPS.with(Cell::get)
}

/// Runs `f` and returns how many graph operations it executed on this thread.
pub fn count_graph_ops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = graph_op_count();
    let out = f();
    (out, graph_op_count() - before)
}

/// Immutable undirected graph with node features and labels.
///
/// Adjacency is stored as sorted neighbor lists; both directions of every
/// edge are present and self-loops are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Arc<CsrMatrix>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl SparseGraph {
    /// Builds a graph from an undirected edge list. Reversed duplicates are
    /// merged and self-loops dropped.
    pub fn new(edges: &[(usize, usize)], features: CsrMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let n = labels.len();
        if features.rows() != n {
            return Err(Error::invalid(format!("{} feature rows for {n} labels", features.rows())));
        }
        if let Some((v, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(Error::invalid(format!("node {v} has label {y}, expected < {n_classes}")));
        }
        if features.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if u != v {
                lists[u].push(v);
                lists[v].push(u);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            neighbors.extend(l);
            offsets.push(neighbors.len());
        }
        Ok(SparseGraph { offsets, neighbors, features: Arc::new(features), labels, n_classes })
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Undirected edge count.
    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes()).flat_map(move |u| self.neighbors(u).iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    pub fn features(&self) -> &Arc<CsrMatrix> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Same topology and labels, different features.
    pub fn with_features(&self, features: CsrMatrix) -> Result<Self> {
        if features.rows() != self.n_nodes() {
            return Err(Error::invalid(format!("{} feature rows for {} nodes", features.rows(), self.n_nodes())));
        }
        Ok(SparseGraph { features: Arc::new(features), ..self.clone() })
    }

    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<(SparseGraph, Vec<Option<usize>>)> {
        let mut map = vec![None; self.n_nodes()];
        for (new, &old) in nodes.iter().enumerate() {
            if old >= self.n_nodes() || map[old].is_some() {
                return Err(Error::invalid(format!("bad subgraph node {old}")));
            }
            map[old] = Some(new);
        }
        let edges: Vec<(usize, usize)> = self
            .edges()
            .filter_map(|(u, v)| Some((map[u]?, map[v]?)))
            .collect();
        let mut triplets = Vec::new();
        for (new, &old) in nodes.iter().enumerate() {
            let (cols, vals) = self.features.row(old);
            triplets.extend(cols.iter().zip(vals).map(|(&c, &x)| (new, c, x)));
        }
        let features = CsrMatrix::from_triplets(nodes.len(), self.n_features(), triplets)?;
        let labels = nodes.iter().map(|&o| self.labels[o]).collect();
        Ok((SparseGraph::new(&edges, features, labels, self.n_classes)?, map))
    }
}

/// Connected components, each sorted, in order of smallest member.
pub fn connected_components(g: &SparseGraph) -> Vec<Vec<usize>> {
    let n = g.n_nodes();
    let mut seen = vec![false; n];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(u) = queue.pop_front() {
            comp.push(u);
            for &v in g.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Induced subgraph on the largest component, with the old-to-new id map.
/// Among equally large components the one holding the smallest id wins.
pub fn largest_connected_component(g: &SparseGraph) -> Result<(SparseGraph, Vec<Option<usize>>)> {
    let comps = connected_components(g);
    let best = comps.iter().fold(None::<&Vec<usize>>, |best, c| match best {
        Some(b) if b.len() >= c.len() => Some(b),
        _ => Some(c),
    });
    g.induced_subgraph(best.map_or(&[][..], |c| c.as_slice()))
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degrees of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(Arc<CsrMatrix>);

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    /// Power-iteration estimate of the largest eigenvalue.
    pub fn top_eigenvalue(&self, iters: usize) -> f64 {
        let n = self.n();
        let mut v = Tensor::from_fn(n, 1, |i, _| 1.0 + (i % 7) as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = self.0.matmul_dense(&v).expect("square");
            let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let vnorm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm / vnorm;
            v = w.scale(1.0 / norm);
        }
        lambda
    }
}

pub fn normalize_adjacency(g: &SparseGraph) -> NormalizedAdjacency {
    let n = g.n_nodes();
    let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt()).collect();
    let mut triplets = Vec::with_capacity(g.neighbors.len() + n);
    for u in 0..n {
        triplets.push((u, u, inv_sqrt[u] * inv_sqrt[u]));
        for &v in g.neighbors(u) {
            triplets.push((u, v, inv_sqrt[u] * inv_sqrt[v]));
        }
    }
    NormalizedAdjacency(Arc::new(CsrMatrix::from_triplets(n, n, triplets).expect("in-range triplets")))
}

/// `Â · H` on plain tensors.
pub fn spmm(adj: &NormalizedAdjacency, h: &Tensor) -> Result<Tensor> {
    bump_graph_ops();
    adj.0.matmul_dense(h)
}

/// `Â · H` on the tape.
pub fn spmm_var(tape: &mut Tape<'_>, adj: &NormalizedAdjacency, h: Var) -> Result<Var> {
    bump_graph_ops();
    tape.sparse_matmul(Arc::clone(&adj.0), h)
}

/// `Â^k X`. `k = 0` returns `X`.
pub fn propagate_power(adj: &NormalizedAdjacency, x: &Tensor, k: usize) -> Result<Tensor> {
    let mut h = x.clone();
    for _ in 0..k {
        h = spmm(adj, &h)?;
    }
    Ok(h)
}

/// `Â^k X` for sparse `X`, keeping the result sparse.
pub fn propagate_power_sparse(adj: &NormalizedAdjacency, x: &CsrMatrix, k: usize) -> Result<CsrMatrix> {
    let mut h = x.clone();
    for _ in 0..k {
        bump_graph_ops();
        h = adj.0.matmul_sparse(&h)?;
    }
    Ok(h)
}

fn check_teleport(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("teleport probability {alpha} outside (0, 1]")));
    }
    Ok(())
}

/// `K` steps of `H ← (1 − α) Â H + α H0`, starting from `H0`.
pub fn appnp_propagate(adj: &NormalizedAdjacency, h0: &Tensor, alpha: f64, steps: usize) -> Result<Tensor> {
    check_teleport(alpha)?;
    let restart = h0.scale(alpha);
    let mut h = h0.clone();
    for _ in 0..steps {
        h = spmm(adj, &h)?.scale(1.0 - alpha);
        h.add_assign(&restart);
    }
    Ok(h)
}

/// Tape version of [`appnp_propagate`].
pub fn appnp_propagate_var(tape: &mut Tape<'_>, adj: &NormalizedAdjacency, h0: Var, alpha: f64, steps: usize) -> Result<Var> {
    check_teleport(alpha)?;
    if alpha == 1.0 {
        return Ok(h0);
    }
    let restart = tape.scale(h0, alpha)?;
    let mut h = h0;
    for _ in 0..steps {
        let p = spmm_var(tape, adj, h)?;
        let p = tape.scale(p, 1.0 - alpha)?;
        h = tape.add(p, restart)?;
    }
    Ok(h)
}

/// Directed message edges `src → dst` for attention: every neighbor of a
/// node plus the node itself, grouped by destination in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    n: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
}

impl EdgeIndex {
    pub fn with_self_loops(g: &SparseGraph) -> Self {
        let n = g.n_nodes();
        let mut src = Vec::with_capacity(g.neighbors.len() + n);
        let mut dst = Vec::with_capacity(g.neighbors.len() + n);
        for i in 0..n {
            let nb = g.neighbors(i);
            let split = nb.partition_point(|&j| j < i);
            for &j in nb[..split].iter().chain(std::iter::once(&i)).chain(&nb[split..]) {
                src.push(j);
                dst.push(i);
            }
        }
        EdgeIndex { n, src: src.into(), dst: dst.into() }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn dst(&self) -> &Arc<[usize]> {
        &self.dst
    }

    /// Rows of `h` at each edge's source.
    pub fn gather_src(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        bump_graph_ops();
        tape.gather_rows(h, Arc::clone(&self.src))
    }

    /// Rows of `h` at each edge's destination.
    pub fn gather_dst(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        bump_graph_ops();
        tape.gather_rows(h, Arc::clone(&self.dst))
    }

    /// Sums per-edge rows into their destination node.
    pub fn scatter_dst(&self, tape: &mut Tape<'_>, e: Var) -> Result<Var> {
        bump_graph_ops();
        tape.scatter_add_rows(e, Arc::clone(&self.dst), self.n)
    }

    /// Softmax of per-edge scores over each destination's incoming edges.
    pub fn softmax_by_dst(&self, tape: &mut Tape<'_>, scores: Var) -> Result<Var> {
        bump_graph_ops();
        tape.segment_softmax(scores, Arc::clone(&self.dst))
    }
}

pub const TRAIN_PER_CLASS: usize = 20;
pub const VAL_PER_CLASS: usize = 30;

/// Disjoint train/val/test node sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub n_nodes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    /// Checks that the three sets partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_nodes != n {
            return Err(Error::invalid(format!("split is for {} nodes, graph has {n}", self.n_nodes)));
        }
        let mut seen = vec![false; n];
        for &v in self.train.iter().chain(&self.val).chain(&self.test) {
            if v >= n || seen[v] {
                return Err(Error::invalid(format!("split node {v} out of range or repeated")));
            }
            seen[v] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("split does not cover every node"));
        }
        Ok(())
    }
}

/// Samples 20 training and 30 validation nodes per class without
/// replacement; everything else is test.
pub fn make_splits(labels: &[usize], n_classes: usize, seed: u64) -> Result<SplitAssignment> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (v, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::invalid(format!("node {v} has label {y}, expected < {n_classes}")));
        }
        by_class[y].push(v);
    }
    let required = TRAIN_PER_CLASS + VAL_PER_CLASS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_split = vec![false; labels.len()];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < required {
            return Err(Error::ClassTooSmall { class, available: members.len(), required });
        }
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..TRAIN_PER_CLASS]);
        val.extend_from_slice(&members[TRAIN_PER_CLASS..required]);
        for &v in &members[..required] {
            in_split[v] = true;
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    let test = (0..labels.len()).filter(|&v| !in_split[v]).collect();
    Ok(SplitAssignment { seed, n_nodes: labels.len(), train, val, test })
}
