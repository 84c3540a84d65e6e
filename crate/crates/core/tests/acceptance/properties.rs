//! Synthetic checks on graphs of at most 8 nodes. Every expected value is
//! computed here from first principles, never by the routine under test.

use std::sync::Arc;

use kgac::amalgam::{attention_weights, fuse_soft_targets, loss_hard, loss_mta, loss_total, teacher_similarity, TeacherOutputs};
use kgac::datasets::{decode_checkpoint, encode_checkpoint, Checkpoint};
use kgac::diffcore::{ParamId, ParamStore, Tape, Var};
use kgac::graph::{appnp_propagate, appnp_propagate_var, make_splits, normalize_adjacency, spmm, spmm_var, EdgeIndex, SparseGraph};
use kgac::kan::{KanInput, KanLayer, SplineGrid};
use kgac::models::{gat_attention, Arch, ForwardMode, GatScorer, GraphContext, Model, ModelSpec};
use kgac::{CsrMatrix, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::{Criterion, Outcome};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Below this magnitude gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;
pub const UNITY_TOL: f64 = 1e-12;
pub const SYMMETRY_TOL: f64 = 1e-12;
pub const EIGEN_SLACK: f64 = 1e-9;
pub const SPMM_TOL: f64 = 1e-12;
pub const PPR_TOL: f64 = 1e-6;
pub const ATTENTION_TOL: f64 = 1e-12;
pub const KL_TOL: f64 = 1e-10;
pub const SUITE_BUDGET_SECS: f64 = 60.0;

type Check = Result<(bool, String), String>;

fn err(e: kgac::Error) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform on `[-2, 2]`, kept at least 0.05 away from the kinks at zero.
fn away_from_zero(r: &mut ChaCha8Rng) -> f64 {
    let v: f64 = r.random_range(0.05..2.0);
    if r.random_bool(0.5) {
        v
    } else {
        -v
    }
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| away_from_zero(r))
}

/// A random simple graph on `n` nodes with each pair joined with probability `p`.
fn random_graph(r: &mut ChaCha8Rng, n: usize, p: f64, d: usize, classes: usize) -> SparseGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let x = Tensor::from_fn(n, d, |_, _| if r.random_bool(0.6) { r.random_range(0.05..1.0) } else { 0.0 });
    let labels = (0..n).map(|v| v % classes).collect();
    SparseGraph::new(&edges, CsrMatrix::from_dense(&x), labels, classes).unwrap()
}

fn ring_with_chords() -> SparseGraph {
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3), (1, 4)];
    let mut r = rng(77);
    let x = Tensor::from_fn(6, 5, |_, _| if r.random_bool(0.7) { r.random_range(0.05..1.0) } else { 0.0 });
    SparseGraph::new(&edges, CsrMatrix::from_dense(&x), vec![0, 1, 2, 0, 1, 2], 3).unwrap()
}

// ---------------------------------------------------------------- gradients

fn loss_value(store: &ParamStore, loss: &dyn Fn(&mut Tape<'_>) -> kgac::Result<Var>) -> kgac::Result<f64> {
    let mut tape = Tape::with_params(store);
    let l = loss(&mut tape)?;
    Ok(tape.value(l).item())
}

/// Worst relative error over every scalar parameter between the tape's
/// reverse pass and central differences.
fn fd_worst(store: &mut ParamStore, loss: &dyn Fn(&mut Tape<'_>) -> kgac::Result<Var>) -> kgac::Result<f64> {
    let grads = {
        let mut tape = Tape::with_params(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let ids: Vec<ParamId> = store.iter().map(|p| p.id()).collect();
    let mut worst = 0.0f64;
    for id in ids {
        for k in 0..store.value(id).len() {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let up = loss_value(store, loss)?;
            store.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let down = loss_value(store, loss)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let scale = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

/// `Σ W ⊙ v` with a fixed random `W`, so every output entry gets a distinct weight.
fn project(t: &mut Tape<'_>, v: Var, seed: u64) -> kgac::Result<Var> {
    let (r, c) = t.shape(v);
    let w = t.constant(random_tensor(&mut rng(seed), r, c));
    let p = t.hadamard(v, w)?;
    t.sum(p)
}

type Case = (&'static str, ParamStore, Box<dyn Fn(&mut Tape<'_>) -> kgac::Result<Var>>);

fn primitive_cases() -> Vec<Case> {
    let mut r = rng(1);
    let mut cases: Vec<Case> = Vec::new();
    let mut unary = |name: &'static str, rows: usize, cols: usize, positive: bool, op: fn(&mut Tape<'_>, Var) -> kgac::Result<Var>| {
        let mut s = ParamStore::new();
        let a = if positive { Tensor::from_fn(rows, cols, |_, _| r.random_range(0.5..2.0)) } else { random_tensor(&mut r, rows, cols) };
        let a = s.add("a", a);
        let f = move |t: &mut Tape<'_>| {
            let av = t.param(a);
            let y = op(t, av)?;
            project(t, y, 100)
        };
        cases.push((name, s, Box::new(f)));
    };
    unary("scale", 3, 4, false, |t, a| t.scale(a, -1.7));
    unary("softmax_rows", 3, 4, false, |t, a| t.softmax_rows(a));
    unary("log_softmax_rows", 3, 4, false, |t, a| t.log_softmax_rows(a));
    unary("leaky_relu", 3, 4, false, |t, a| t.leaky_relu(a));
    unary("relu", 3, 4, false, |t, a| t.relu(a));
    unary("elu", 3, 4, false, |t, a| t.elu(a));
    unary("silu", 3, 4, false, |t, a| t.silu(a));
    unary("exp", 3, 4, false, |t, a| t.exp(a));
    unary("log", 3, 4, true, |t, a| t.log(a));
    unary("sum", 3, 4, false, |t, a| t.sum(a));
    unary("mean", 3, 4, false, |t, a| t.mean(a));
    unary("slice_cols", 3, 5, false, |t, a| t.slice_cols(a, 1, 3));
    unary("gather_rows", 4, 3, false, |t, a| t.gather_rows(a, vec![2, 0, 2, 3, 1].into()));
    unary("scatter_add_rows", 5, 3, false, |t, a| t.scatter_add_rows(a, vec![1, 0, 1, 3, 3].into(), 4));
    unary("segment_softmax", 6, 2, false, |t, a| t.segment_softmax(a, vec![0, 0, 1, 2, 2, 2].into()));

    let mut binary = |name: &'static str, sa: (usize, usize), sb: (usize, usize), op: fn(&mut Tape<'_>, Var, Var) -> kgac::Result<Var>| {
        let mut s = ParamStore::new();
        let a = s.add("a", random_tensor(&mut r, sa.0, sa.1));
        let b = s.add("b", random_tensor(&mut r, sb.0, sb.1));
        let f = move |t: &mut Tape<'_>| {
            let (av, bv) = (t.param(a), t.param(b));
            let y = op(t, av, bv)?;
            project(t, y, 101)
        };
        cases.push((name, s, Box::new(f)));
    };
    binary("matmul", (3, 4), (4, 2), |t, a, b| t.matmul(a, b));
    binary("add", (3, 4), (3, 4), |t, a, b| t.add(a, b));
    binary("sub", (3, 4), (3, 4), |t, a, b| t.sub(a, b));
    binary("hadamard", (3, 4), (3, 4), |t, a, b| t.hadamard(a, b));
    binary("add_row", (3, 4), (1, 4), |t, a, b| t.add_row(a, b));
    binary("scale_rows", (3, 4), (3, 1), |t, a, b| t.scale_rows(a, b));
    binary("concat_cols", (3, 2), (3, 3), |t, a, b| t.concat_cols(&[a, b]));

    let lhs = Arc::new(CsrMatrix::from_dense(&Tensor::from_rows(&[[0.0, 1.5, -0.3], [2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.7, -1.1, 0.4]])));
    let mut s = ParamStore::new();
    let b = s.add("b", random_tensor(&mut r, 3, 2));
    cases.push((
        "sparse_matmul",
        s,
        Box::new(move |t| {
            let bv = t.param(b);
            let y = t.sparse_matmul(Arc::clone(&lhs), bv)?;
            project(t, y, 102)
        }),
    ));

    let g = ring_with_chords();
    let adj = normalize_adjacency(&g);
    let edges = EdgeIndex::with_self_loops(&g);
    let mut s = ParamStore::new();
    let h = s.add("h", random_tensor(&mut r, 6, 3));
    cases.push((
        "spmm / appnp propagation",
        s,
        Box::new(move |t| {
            let hv = t.param(h);
            let a = spmm_var(t, &adj, hv)?;
            let p = appnp_propagate_var(t, &adj, hv, 0.1, 4)?;
            let y = t.add(a, p)?;
            project(t, y, 103)
        }),
    ));
    let edges2 = edges.clone();
    let mut s = ParamStore::new();
    let h2 = s.add("h", random_tensor(&mut r, 6, 2));
    let e2 = s.add("e", random_tensor(&mut r, edges2.len(), 2));
    cases.push((
        "edge gather / scatter / softmax",
        s,
        Box::new(move |t| {
            let (hv, ev) = (t.param(h2), t.param(e2));
            let gs = edges2.gather_src(t, hv)?;
            let gd = edges2.gather_dst(t, hv)?;
            let sm = edges2.softmax_by_dst(t, ev)?;
            let m = t.hadamard(gs, sm)?;
            let m = t.add(m, gd)?;
            let y = edges2.scatter_dst(t, m)?;
            project(t, y, 104)
        }),
    ));

    let mut s = ParamStore::new();
    let z = s.add("student", random_tensor(&mut r, 5, 3));
    let teachers = TeacherOutputs::new(vec!["a".into(), "b".into()], vec![random_tensor(&mut r, 5, 3), random_tensor(&mut r, 5, 3)]).unwrap();
    let alpha = attention_weights(&[0.3, -0.2]).unwrap();
    let targets = fuse_soft_targets(teachers.logits(), &alpha, 2.0).unwrap();
    cases.push((
        "loss_mta / loss_hard / loss_total",
        s,
        Box::new(move |t| {
            let zv = t.param(z);
            let nodes: Arc<[usize]> = vec![0, 1, 3, 4].into();
            let mta = loss_mta(t, zv, &targets, 2.0, &nodes)?;
            let hard = loss_hard(t, zv, &[0, 1, 2, 0, 1], &vec![0, 2, 4].into())?;
            loss_total(t, mta, hard, 0.4)
        }),
    ));
    cases
}

fn kan_cases() -> Vec<Case> {
    let mut r = rng(2);
    let grid = SplineGrid::unit(5, 3).unwrap();
    let mut cases: Vec<Case> = Vec::new();

    let mut s = ParamStore::new();
    let layer = KanLayer::init(&mut s, "kan", 3, 2, grid, &mut r).unwrap();
    perturb_bias(&mut s, layer.bias_id(), &mut r);
    let x = s.add("x", Tensor::from_fn(4, 3, |_, _| r.random_range(-1.3..1.3)));
    cases.push((
        "KAN layer, dense input",
        s,
        Box::new(move |t| {
            let xv = t.param(x);
            let y = layer.forward(t, &KanInput::Dense(xv))?;
            project(t, y, 200)
        }),
    ));

    let mut s = ParamStore::new();
    let layer = KanLayer::init(&mut s, "kan", 5, 3, grid, &mut r).unwrap();
    perturb_bias(&mut s, layer.bias_id(), &mut r);
    let xs = Tensor::from_fn(6, 5, |_, _| if r.random_bool(0.5) { r.random_range(-1.2..1.2) } else { 0.0 });
    let xs = Arc::new(CsrMatrix::from_dense(&xs));
    cases.push((
        "KAN layer, sparse input",
        s,
        Box::new(move |t| {
            let y = layer.forward(t, &KanInput::Sparse(Arc::clone(&xs)))?;
            project(t, y, 201)
        }),
    ));

    let mut s = ParamStore::new();
    let layer = KanLayer::init(&mut s, "kan", 4, 1, grid, &mut r).unwrap();
    let x = s.add("x", Tensor::from_fn(5, 2, |_, _| r.random_range(-1.3..1.3)));
    cases.push((
        "KAN layer, partial input",
        s,
        Box::new(move |t| {
            let xv = t.param(x);
            let y = layer.forward_partial(t, xv, 2)?;
            project(t, y, 202)
        }),
    ));
    cases
}

fn perturb_bias(store: &mut ParamStore, id: ParamId, r: &mut ChaCha8Rng) {
    for v in store.get_mut(id).value.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
}

fn tiny_spec(arch: Arch, seed: u64) -> ModelSpec {
    let mut spec = ModelSpec::new(arch).with_seed(seed);
    spec.hidden = 4;
    spec.heads = 2;
    spec.grid_size = 4;
    if arch.default_prop_steps() == 10 {
        spec.prop_steps = 3;
    }
    spec
}

/// Perturbs zero-initialized biases so their gradients are generic.
fn randomize_zero_params(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
}

fn check_arch_gradient(arch: Arch) -> Check {
    let g = ring_with_chords();
    let ctx = GraphContext::new(&g);
    let model = Model::build(&tiny_spec(arch, 5), g.n_features(), g.n_classes()).map_err(err)?;
    let mut store = model.params().clone();
    randomize_zero_params(&mut store, &mut rng(9));
    let labels = g.labels().to_vec();
    let loss = move |t: &mut Tape<'_>| {
        // Re-seeding keeps the dropout masks identical across evaluations.
        let mut mask_rng = rng(31);
        let logits = model.forward(t, &ctx, &mut ForwardMode::Train(&mut mask_rng))?;
        loss_hard(t, logits, &labels, &vec![0, 2, 3, 5].into())
    };
    let worst = fd_worst(&mut store, &loss).map_err(err)?;
    Ok((worst <= FD_TOL, format!("max rel err {worst:.2e}")))
}

fn gradients(c: &mut Criterion) {
    for (name, mut store, f) in primitive_cases().into_iter().chain(kan_cases()) {
        c.run(&format!("gradient {name}"), || {
            let worst = fd_worst(&mut store, &*f).map_err(err)?;
            Ok((worst <= FD_TOL, format!("max rel err {worst:.2e}")))
        });
    }
    for arch in Arch::ALL {
        c.run(&format!("gradient {arch} forward+loss"), || check_arch_gradient(arch));
    }
}

// ---------------------------------------------------------------- B-splines

fn splines(c: &mut Criterion) {
    c.run("partition of unity, 1000 random points", || {
        let mut r = rng(3);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let g = r.random_range(1..=40);
            let k = r.random_range(0..=5);
            let grid = SplineGrid::unit(g, k).map_err(err)?;
            let x = r.random_range(-1.0..=1.0);
            let b = grid.basis(x);
            if b.iter().any(|&v| v < 0.0) {
                return Ok((false, format!("negative basis value at x={x}")));
            }
            worst = worst.max((b.iter().sum::<f64>() - 1.0).abs());
        }
        Ok((worst <= UNITY_TOL, format!("max |Σ B − 1| = {worst:.1e}")))
    });
    c.run("cubic basis at an interior knot", || {
        let grid = SplineGrid::unit(8, 3).map_err(err)?;
        let knot = 0.25;
        let nz: Vec<f64> = grid.basis(knot).into_iter().filter(|&v| v != 0.0).collect();
        let expect = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
        let ok = nz.len() == 3 && nz.iter().zip(expect).all(|(a, b)| (a - b).abs() <= UNITY_TOL);
        Ok((ok, format!("{nz:.6?}")))
    });
}

// ---------------------------------------------------------------- adjacency

fn dense_normalized(g: &SparseGraph) -> Tensor {
    let n = g.n_nodes();
    let mut a = Tensor::identity(n);
    for (u, v) in g.edges() {
        a.set(u, v, 1.0);
        a.set(v, u, 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    Tensor::from_fn(n, n, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt())
}

/// Spectral radius by power iteration on `M²`, which is positive
/// semi-definite for symmetric `M`.
fn spectral_radius(m: &Tensor) -> f64 {
    let m2 = m.matmul(m).unwrap();
    let n = m.rows();
    let mut v = Tensor::from_fn(n, 1, |i, _| 1.0 + 0.37 * i as f64);
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w = m2.matmul(&v).unwrap();
        let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.scale(1.0 / norm);
    }
    lambda.sqrt()
}

fn adjacency(c: &mut Criterion) {
    let mut r = rng(4);
    let graphs: Vec<SparseGraph> = (0..200).map(|i| random_graph(&mut r, 1 + i % 8, 0.45, 3, 1)).collect();
    c.run("normalized adjacency symmetric and matches D^-1/2 (A+I) D^-1/2", || {
        let (mut asym, mut diff) = (0.0f64, 0.0f64);
        for g in &graphs {
            let a = normalize_adjacency(g).matrix().to_dense();
            asym = asym.max(a.max_abs_diff(&a.transpose()));
            diff = diff.max(a.max_abs_diff(&dense_normalized(g)));
        }
        Ok((asym <= SYMMETRY_TOL && diff <= SYMMETRY_TOL, format!("asymmetry {asym:.1e}, oracle diff {diff:.1e}, 200 graphs")))
    });
    c.run("top eigenvalue <= 1 + 1e-9", || {
        let (mut library, mut oracle) = (0.0f64, 0.0f64);
        for g in &graphs {
            let adj = normalize_adjacency(g);
            library = library.max(adj.top_eigenvalue(500));
            oracle = oracle.max(spectral_radius(&adj.matrix().to_dense()));
        }
        Ok((library <= 1.0 + EIGEN_SLACK && oracle <= 1.0 + EIGEN_SLACK, format!("power iteration {library:.12}, oracle {oracle:.12}")))
    });
    c.run("spmm equals dense product", || {
        let mut worst = 0.0f64;
        for (i, g) in graphs.iter().enumerate() {
            let h = random_tensor(&mut rng(i as u64), g.n_nodes(), 4);
            let fast = spmm(&normalize_adjacency(g), &h).map_err(err)?;
            let slow = dense_normalized(g).matmul(&h).map_err(err)?;
            worst = worst.max(fast.max_abs_diff(&slow));
        }
        Ok((worst <= SPMM_TOL, format!("max diff {worst:.1e}")))
    });
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
fn solve(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).iter().chain(b.row(i)).copied().collect()).collect();
    let w = n + b.cols();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..w {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Tensor::from_fn(n, b.cols(), |i, j| m[i][n + j] / m[i][i])
}

fn ppr(c: &mut Criterion) {
    c.run("APPNP K=50 equals α (I − (1−α) Â)^-1 H0", || {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)];
        let x = CsrMatrix::from_dense(&Tensor::identity(5));
        let g = SparseGraph::new(&edges, x, vec![0; 5], 1).map_err(err)?;
        let alpha = 0.1;
        let h0 = random_tensor(&mut rng(5), 5, 3);
        let got = appnp_propagate(&normalize_adjacency(&g), &h0, alpha, 50).map_err(err)?;
        let a = dense_normalized(&g);
        let system = Tensor::identity(5).sub(&a.scale(1.0 - alpha)).map_err(err)?;
        let expect = solve(&system, &h0.scale(alpha));
        let diff = got.max_abs_diff(&expect);
        Ok((diff <= PPR_TOL, format!("max diff {diff:.2e}")))
    });
}

// ---------------------------------------------------------------- attention

fn attention(c: &mut Criterion) {
    let g = ring_with_chords();
    let edges = EdgeIndex::with_self_loops(&g);
    let mut r = rng(6);
    let head = 3;
    let grid = SplineGrid::unit(6, 3).unwrap();
    for variant in ["standard", "KAN scorer", "KAN transform"] {
        c.run(&format!("attention rows sum to 1 ({variant})"), || {
            let mut store = ParamStore::new();
            let x = store.add("x", random_tensor(&mut r, 6, 4));
            let w = store.add("w", random_tensor(&mut r, 4, head));
            let transform = KanLayer::init(&mut store, "t", 4, head, grid, &mut r).map_err(err)?;
            let scorer = match variant {
                "KAN scorer" => GatScorer::Kan(KanLayer::init(&mut store, "s", 2 * head, 1, grid, &mut r).map_err(err)?),
                _ => GatScorer::Vectors { dst: store.add("ad", random_tensor(&mut r, head, 1)), src: store.add("as", random_tensor(&mut r, head, 1)) },
            };
            let mut tape = Tape::with_params(&store);
            let xv = tape.param(x);
            let wh = if variant == "KAN transform" {
                transform.forward(&mut tape, &KanInput::Dense(xv)).map_err(err)?
            } else {
                let wv = tape.param(w);
                tape.matmul(xv, wv).map_err(err)?
            };
            let alpha = gat_attention(&mut tape, wh, &scorer, &edges).map_err(err)?;
            let alpha = tape.value(alpha);
            let mut sums = vec![0.0; 6];
            for (e, &d) in edges.dst().iter().enumerate() {
                if !(alpha.get(e, 0) > 0.0) {
                    return Ok((false, format!("edge {e} has weight {}", alpha.get(e, 0))));
                }
                sums[d] += alpha.get(e, 0);
            }
            let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
            Ok((worst <= ATTENTION_TOL, format!("max |Σα − 1| = {worst:.1e}")))
        });
    }
    c.run("teacher attention weights sum to 1 and ignore shifts", || {
        let mut r = rng(7);
        let mut worst_sum = 0.0f64;
        let mut worst_shift = 0.0f64;
        for _ in 0..200 {
            let k = r.random_range(1..6);
            let sims: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
            let shift = r.random_range(-50.0..50.0);
            let a = attention_weights(&sims).map_err(err)?;
            let b = attention_weights(&sims.iter().map(|s| s + shift).collect::<Vec<_>>()).map_err(err)?;
            worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
            worst_shift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst_shift, f64::max);
        }
        Ok((worst_sum <= ATTENTION_TOL && worst_shift <= ATTENTION_TOL, format!("sum err {worst_sum:.1e}, shift err {worst_shift:.1e}")))
    });
}

// ---------------------------------------------------------------- losses

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Teacher weights from the mean of all pairwise row cosines, then the
/// elementwise KL sum, all done by hand.
fn mta_oracle(student: &Tensor, teachers: &[Tensor], temperature: f64, nodes: &[usize]) -> f64 {
    let n = student.rows();
    let sims: Vec<f64> = teachers
        .iter()
        .map(|z| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += cosine(student.row(i), z.row(j));
                }
            }
            s / (n * n) as f64
        })
        .collect();
    let alpha = softmax(&sims);
    let mut total = 0.0;
    for &v in nodes {
        let mixed: Vec<f64> = (0..student.cols()).map(|c| teachers.iter().zip(&alpha).map(|(z, a)| a * z.get(v, c)).sum::<f64>() / temperature).collect();
        let z = softmax(&mixed);
        let p = softmax(&student.row(v).iter().map(|s| s / temperature).collect::<Vec<_>>());
        total += p.iter().zip(&z).map(|(pi, zi)| pi * (pi.ln() - zi.ln())).sum::<f64>();
    }
    temperature * temperature * total / nodes.len() as f64
}

fn losses(c: &mut Criterion) {
    c.run("loss_mta non-negative and equal to the KL oracle", || {
        let mut r = rng(8);
        let (mut worst, mut min) = (0.0f64, f64::INFINITY);
        for trial in 0..100 {
            let (n, classes) = (r.random_range(2..8), r.random_range(2..6));
            let student = Tensor::from_fn(n, classes, |_, _| r.random_range(-3.0..3.0));
            let teachers: Vec<Tensor> = (0..r.random_range(1..4)).map(|_| Tensor::from_fn(n, classes, |_, _| r.random_range(-3.0..3.0))).collect();
            let temperature = [0.5, 1.0, 2.0, 4.0][trial % 4];
            let nodes: Vec<usize> = (0..n).filter(|v| v % 3 != 1).collect();
            let outputs = TeacherOutputs::new((0..teachers.len()).map(|i| i.to_string()).collect(), teachers.clone()).map_err(err)?;
            let alpha = attention_weights(&outputs.similarities(&student).map_err(err)?).map_err(err)?;
            let targets = fuse_soft_targets(outputs.logits(), &alpha, temperature).map_err(err)?;
            let mut tape = Tape::new();
            let s = tape.constant(student.clone());
            let l = loss_mta(&mut tape, s, &targets, temperature, &nodes.clone().into()).map_err(err)?;
            let got = tape.value(l).item();
            min = min.min(got);
            worst = worst.max((got - mta_oracle(&student, &teachers, temperature, &nodes)).abs());
        }
        Ok((min >= 0.0 && worst <= KL_TOL, format!("min {min:.3e}, max oracle diff {worst:.1e}")))
    });
    c.run("loss_total endpoints", || {
        let mut r = rng(9);
        let student = random_tensor(&mut r, 4, 3);
        let teacher = random_tensor(&mut r, 4, 3);
        let targets = fuse_soft_targets(&[Arc::new(teacher)], &[1.0], 2.0).map_err(err)?;
        let nodes: Arc<[usize]> = vec![0, 1, 2, 3].into();
        let mut tape = Tape::new();
        let s = tape.constant(student);
        let mta = loss_mta(&mut tape, s, &targets, 2.0, &nodes).map_err(err)?;
        let hard = loss_hard(&mut tape, s, &[0, 1, 2, 0], &nodes).map_err(err)?;
        let zero = loss_total(&mut tape, mta, hard, 0.0).map_err(err)?;
        let one = loss_total(&mut tape, mta, hard, 1.0).map_err(err)?;
        let bits = |v: Var| tape.value(v).item().to_bits();
        let ok = bits(zero) == bits(hard) && bits(one) == bits(mta);
        Ok((ok, format!("λ=0 → {:.6}, λ=1 → {:.6}", tape.value(zero).item(), tape.value(one).item())))
    });
}

fn fused_targets(c: &mut Criterion) {
    c.run("fused targets invariant to teacher order", || {
        let mut r = rng(10);
        let student = random_tensor(&mut r, 6, 4);
        let zs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, 6, 4)).collect();
        let fuse = |order: &[usize]| -> kgac::Result<Tensor> {
            let picked: Vec<Tensor> = order.iter().map(|&i| zs[i].clone()).collect();
            let t = TeacherOutputs::new(order.iter().map(|i| i.to_string()).collect(), picked)?;
            let alpha = attention_weights(&t.similarities(&student)?)?;
            Ok(fuse_soft_targets(t.logits(), &alpha, 2.0)?.probs)
        };
        let base = fuse(&[0, 1, 2]).map_err(err)?;
        let mut worst = 0.0f64;
        for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            worst = worst.max(fuse(&order).map_err(err)?.max_abs_diff(&base));
        }
        let sim_pair = (teacher_similarity(&student, &zs[0]).map_err(err)?, mta_pairwise(&student, &zs[0]));
        let sim_ok = (sim_pair.0 - sim_pair.1).abs() <= KL_TOL;
        Ok((worst <= 1e-15 && sim_ok, format!("max diff over 6 orders {worst:.1e}, similarity vs n² oracle {:.1e}", (sim_pair.0 - sim_pair.1).abs())))
    });
}

fn mta_pairwise(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += cosine(a.row(i), b.row(j));
        }
    }
    s / (n * n) as f64
}

// ---------------------------------------------------------------- artifacts

fn checkpoints(c: &mut Criterion) {
    let g = ring_with_chords();
    let ctx = GraphContext::new(&g);
    c.run("checkpoint round trip is bit-exact for every architecture", || {
        for arch in Arch::ALL {
            let model = Model::build(&tiny_spec(arch, 3), g.n_features(), g.n_classes()).map_err(err)?;
            let bytes = encode_checkpoint(&Checkpoint::from_model(&model, 0.5)).map_err(err)?;
            let back = decode_checkpoint(&bytes).map_err(err)?.to_model().map_err(err)?;
            let same_params = model.params().iter().zip(back.params().iter()).all(|(a, b)| {
                a.name() == b.name() && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            let la = model.logits(&ctx).map_err(err)?;
            let lb = back.logits(&ctx).map_err(err)?;
            let same_logits = la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            let reencoded = encode_checkpoint(&Checkpoint::from_model(&back, 0.5)).map_err(err)?;
            if !(same_params && same_logits && reencoded == bytes) {
                return Ok((false, format!("{arch} differs after round trip")));
            }
        }
        Ok((true, format!("{} architectures", Arch::ALL.len())))
    });
}

/// A Cora-sized labelling: LCC class sizes summing to 2485 nodes.
fn cora_like_labels() -> Vec<usize> {
    let sizes = [341, 208, 399, 727, 400, 262, 148];
    let mut labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    labels.shuffle(&mut rng(11));
    labels
}

fn splits(c: &mut Criterion) {
    c.run("splits deterministic with 20/30 per class (140/210 on 7 classes)", || {
        let labels = cora_like_labels();
        let a = make_splits(&labels, 7, 3).map_err(err)?;
        let b = make_splits(&labels, 7, 3).map_err(err)?;
        let other = make_splits(&labels, 7, 4).map_err(err)?;
        a.validate(labels.len()).map_err(err)?;
        let per_class = |set: &[usize], c: usize| set.iter().filter(|&&v| labels[v] == c).count();
        let counts_ok = (0..7).all(|c| per_class(&a.train, c) == 20 && per_class(&a.val, c) == 30);
        let ok = a == b && a.train != other.train && counts_ok && (a.train.len(), a.val.len(), a.test.len()) == (140, 210, 2135);
        Ok((ok, format!("train {} / val {} / test {}", a.train.len(), a.val.len(), a.test.len())))
    });
}

pub fn run() -> Outcome {
    let mut c = Criterion::open("Property suite (synthetic graphs of at most 8 nodes)");
    gradients(&mut c);
    splines(&mut c);
    adjacency(&mut c);
    ppr(&mut c);
    attention(&mut c);
    losses(&mut c);
    fused_targets(&mut c);
    checkpoints(&mut c);
    splits(&mut c);
    let secs = c.elapsed_secs();
    c.check("runtime", secs < SUITE_BUDGET_SECS, format!("{secs:.1}s < {SUITE_BUDGET_SECS}s"));
    c.close("")
}
