//! Teacher and student architectures.
//!
//! Every model maps the node features (and, for teachers, the graph) to raw
//! class logits through [`Model::forward`]. Parameters live in the model's
//! own [`ParamStore`], so a tape is built with `Tape::with_params(model.params())`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{
    appnp_propagate_var, normalize_adjacency, propagate_power_sparse, spmm_var, EdgeIndex, NormalizedAdjacency, SparseGraph,
};
use crate::kan::{KanInput, KanLayer, KanStack, SplineGrid};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Arch {
    Gcn,
    Gat,
    Sgc,
    Appnp,
    Kgcn1,
    Kgcn2,
    Kgat1,
    Kgat2,
    Ksgc,
    Kappnp,
    Mlp,
    Kan,
}

impl Arch {
    pub const ALL: [Arch; 12] = [
        Arch::Gcn,
        Arch::Gat,
        Arch::Sgc,
        Arch::Appnp,
        Arch::Kgcn1,
        Arch::Kgcn2,
        Arch::Kgat1,
        Arch::Kgat2,
        Arch::Ksgc,
        Arch::Kappnp,
        Arch::Mlp,
        Arch::Kan,
    ];

    pub const TEACHERS: [Arch; 10] = [
        Arch::Gcn,
        Arch::Gat,
        Arch::Sgc,
        Arch::Appnp,
        Arch::Kgcn1,
        Arch::Kgcn2,
        Arch::Kgat1,
        Arch::Kgat2,
        Arch::Ksgc,
        Arch::Kappnp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Gcn => "GCN",
            Arch::Gat => "GAT",
            Arch::Sgc => "SGC",
            Arch::Appnp => "APPNP",
            Arch::Kgcn1 => "KGCN1",
            Arch::Kgcn2 => "KGCN2",
            Arch::Kgat1 => "KGAT1",
            Arch::Kgat2 => "KGAT2",
            Arch::Ksgc => "KSGC",
            Arch::Kappnp => "KAPPNP",
            Arch::Mlp => "MLP",
            Arch::Kan => "KAN",
        }
    }

    /// Students see node features only.
    pub fn is_student(self) -> bool {
        matches!(self, Arch::Mlp | Arch::Kan)
    }

    pub fn is_gat_family(self) -> bool {
        matches!(self, Arch::Gat | Arch::Kgat1 | Arch::Kgat2)
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            Arch::Sgc | Arch::Ksgc => 0.0,
            _ => 0.5,
        }
    }

    pub fn default_prop_steps(self) -> usize {
        match self {
            Arch::Sgc | Arch::Ksgc => 2,
            Arch::Appnp | Arch::Kappnp => 10,
            _ => 0,
        }
    }

    pub fn known_names() -> String {
        Arch::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// Case-insensitive. `KGCN` and `KGAT` name their first variant.
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let alias = match upper.as_str() {
            "KGCN" => Some(Arch::Kgcn1),
            "KGAT" => Some(Arch::Kgat1),
            _ => None,
        };
        alias
            .or_else(|| Arch::ALL.into_iter().find(|a| a.name() == upper))
            .ok_or_else(|| Error::UnknownArch { name: s.to_string(), known: Arch::known_names() })
    }
}

impl From<Arch> for String {
    fn from(a: Arch) -> String {
        a.name().to_string()
    }
}

impl TryFrom<String> for Arch {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub hidden: usize,
    pub layers: usize,
    /// Attention heads (GAT family).
    pub heads: usize,
    /// Propagation steps: `K` in `Â^K X` (SGC family) or APPNP iterations.
    pub prop_steps: usize,
    /// Teleport probability of APPNP propagation.
    pub teleport: f64,
    pub grid_size: usize,
    pub spline_order: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Arch) -> Self {
        ModelSpec {
            arch,
            hidden: 32,
            layers: 2,
            heads: 4,
            prop_steps: arch.default_prop_steps(),
            teleport: 0.1,
            grid_size: 32,
            spline_order: 3,
            dropout: arch.default_dropout(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::invalid("hidden, layers and heads must be >= 1"));
        }
        if self.arch.is_gat_family() && !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.teleport > 0.0 && self.teleport <= 1.0) {
            return Err(Error::invalid(format!("teleport {} outside (0, 1]", self.teleport)));
        }
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::unit(self.grid_size, self.spline_order)
    }

    /// `[in, hidden, ..., hidden, out]` with `layers` transitions.
    fn dims(&self, in_dim: usize, out_dim: usize) -> Vec<usize> {
        let mut d = vec![in_dim];
        d.extend(std::iter::repeat_n(self.hidden, self.layers - 1));
        d.push(out_dim);
        d
    }
}

/// Whether dropout is active; training mode carries the mask RNG.
pub enum ForwardMode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl ForwardMode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, ForwardMode::Train(_))
    }

    fn dropout_var(&mut self, tape: &mut Tape<'_>, v: Var, p: f64) -> Result<Var> {
        let ForwardMode::Train(rng) = self else { return Ok(v) };
        if p == 0.0 {
            return Ok(v);
        }
        let (r, c) = tape.shape(v);
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(r, c, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = tape.constant(mask);
        tape.hadamard(v, m)
    }

    fn dropout_csr(&mut self, x: &Arc<CsrMatrix>, p: f64) -> Arc<CsrMatrix> {
        let ForwardMode::Train(rng) = self else { return Arc::clone(x) };
        if p == 0.0 {
            return Arc::clone(x);
        }
        let keep = 1.0 / (1.0 - p);
        Arc::new(x.filter_map_values(|_, _, v| (rng.random::<f64>() >= p).then_some(v * keep)))
    }

    fn dropout(&mut self, tape: &mut Tape<'_>, x: &KanInput, p: f64) -> Result<KanInput> {
        Ok(match x {
            KanInput::Dense(v) => KanInput::Dense(self.dropout_var(tape, *v, p)?),
            KanInput::Sparse(m) => KanInput::Sparse(self.dropout_csr(m, p)),
        })
    }
}

/// Graph-side inputs shared by every model trained on one graph. Powers
/// `Â^k X` are computed on first use and cached.
pub struct GraphContext {
    adjacency: NormalizedAdjacency,
    edges: EdgeIndex,
    features: Arc<CsrMatrix>,
    n_classes: usize,
    propagated: Mutex<HashMap<usize, Arc<CsrMatrix>>>,
}

impl GraphContext {
    pub fn new(graph: &SparseGraph) -> Self {
        GraphContext {
            adjacency: normalize_adjacency(graph),
            edges: EdgeIndex::with_self_loops(graph),
            features: Arc::clone(graph.features()),
            n_classes: graph.n_classes(),
            propagated: Mutex::new(HashMap::new()),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adjacency
    }

    pub fn edges(&self) -> &EdgeIndex {
        &self.edges
    }

    pub fn features(&self) -> &Arc<CsrMatrix> {
        &self.features
    }

    /// `Â^k X`, kept sparse.
    pub fn propagated_features(&self, k: usize) -> Result<Arc<CsrMatrix>> {
        let mut cache = self.propagated.lock().expect("cache lock");
        if let Some(m) = cache.get(&k) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(propagate_power_sparse(&self.adjacency, &self.features, k)?);
        cache.insert(k, Arc::clone(&m));
        Ok(m)
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(rows, cols, |_, _| u.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{prefix}.weight"), glorot(d_in, d_out, rng));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(1, d_out));
        Linear { weight, bias }
    }

    /// `X W` without the bias.
    fn project(&self, tape: &mut Tape<'_>, x: &KanInput) -> Result<Var> {
        let w = tape.param(self.weight);
        match x {
            KanInput::Dense(v) => tape.matmul(*v, w),
            KanInput::Sparse(m) => tape.sparse_matmul(Arc::clone(m), w),
        }
    }

    fn add_bias(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let b = tape.param(self.bias);
        tape.add_row(h, b)
    }

    fn forward(&self, tape: &mut Tape<'_>, x: &KanInput) -> Result<Var> {
        let h = self.project(tape, x)?;
        self.add_bias(tape, h)
    }
}

/// Graph-free network: the MLP/KAN students, and the prediction head of
/// APPNP/KAPPNP.
#[derive(Debug, Clone, PartialEq)]
enum Head {
    Mlp(Vec<Linear>),
    Kan(KanStack),
}

impl Head {
    fn forward(&self, tape: &mut Tape<'_>, x: KanInput, mode: &mut ForwardMode<'_>, dropout: f64) -> Result<Var> {
        let mut h = x;
        match self {
            Head::Mlp(layers) => {
                for (l, lin) in layers.iter().enumerate() {
                    h = mode.dropout(tape, &h, dropout)?;
                    let mut v = lin.forward(tape, &h)?;
                    if l + 1 < layers.len() {
                        v = tape.relu(v)?;
                    }
                    h = KanInput::Dense(v);
                }
            }
            Head::Kan(stack) => return kan_forward(stack, tape, h, mode, dropout),
        }
        Ok(dense(h))
    }
}

/// KAN stack with dropout before every layer.
fn kan_forward(stack: &KanStack, tape: &mut Tape<'_>, x: KanInput, mode: &mut ForwardMode<'_>, dropout: f64) -> Result<Var> {
    let mut h = x;
    for layer in stack.layers() {
        h = mode.dropout(tape, &h, dropout)?;
        h = KanInput::Dense(layer.forward(tape, &h)?);
    }
    Ok(dense(h))
}

/// Node-wise transform `h ↦ W h` of an attention layer.
#[derive(Debug, Clone, PartialEq)]
pub enum GatTransform {
    Linear(ParamId),
    Kan(KanLayer),
}

/// Edge scorer of an attention head.
#[derive(Debug, Clone, PartialEq)]
pub enum GatScorer {
    /// `LeakyReLU(a_dstᵀ W h_i + a_srcᵀ W h_j)`.
    Vectors { dst: ParamId, src: ParamId },
    /// `KAN([W h_i ‖ W h_j])`, no extra nonlinearity.
    Kan(KanLayer),
}

impl GatTransform {
    fn apply(&self, tape: &mut Tape<'_>, x: &KanInput) -> Result<Var> {
        match self {
            GatTransform::Linear(w) => {
                let w = tape.param(*w);
                match x {
                    KanInput::Dense(v) => tape.matmul(*v, w),
                    KanInput::Sparse(m) => tape.sparse_matmul(Arc::clone(m), w),
                }
            }
            GatTransform::Kan(k) => k.forward(tape, x),
        }
    }
}

/// Attention coefficients `α_ij` (one per edge of `edges`, as an `E x 1`
/// column) from transformed node states `wh` (`n x d'`). Each node's
/// incoming coefficients, self-loop included, sum to one.
pub fn gat_attention(tape: &mut Tape<'_>, wh: Var, scorer: &GatScorer, edges: &EdgeIndex) -> Result<Var> {
    let scores = match scorer {
        GatScorer::Vectors { dst, src } => {
            let (a_dst, a_src) = (tape.param(*dst), tape.param(*src));
            let s_dst = tape.matmul(wh, a_dst)?;
            let s_src = tape.matmul(wh, a_src)?;
            let e_dst = edges.gather_dst(tape, s_dst)?;
            let e_src = edges.gather_src(tape, s_src)?;
            let e = tape.add(e_dst, e_src)?;
            tape.leaky_relu(e)?
        }
        GatScorer::Kan(kan) => {
            // One output, so KAN([h_i ‖ h_j]) splits into a dst half and a src
            // half, each evaluated once per node instead of once per edge.
            let d = tape.shape(wh).1;
            let s_dst = kan.forward_partial(tape, wh, 0)?;
            let s_src = kan.forward_partial(tape, wh, d)?;
            let e_dst = edges.gather_dst(tape, s_dst)?;
            let e_src = edges.gather_src(tape, s_src)?;
            let e = tape.add(e_dst, e_src)?;
            let bias = tape.param(kan.bias_id());
            tape.add_row(e, bias)?
        }
    };
    edges.softmax_by_dst(tape, scores)
}

#[derive(Debug, Clone, PartialEq)]
struct GatLayer {
    transform: GatTransform,
    scorers: Vec<GatScorer>,
    head_dim: usize,
    concat: bool,
    bias: ParamId,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        arch: Arch,
        d_in: usize,
        heads: usize,
        head_dim: usize,
        concat: bool,
        grid: SplineGrid,
        rng: &mut R,
    ) -> Result<Self> {
        let width = heads * head_dim;
        let transform = match arch {
            Arch::Kgat2 => GatTransform::Kan(KanLayer::init(store, &format!("{prefix}.transform"), d_in, width, grid, rng)?),
            _ => GatTransform::Linear(store.add(format!("{prefix}.weight"), glorot(d_in, width, rng))),
        };
        let mut scorers = Vec::with_capacity(heads);
        for h in 0..heads {
            scorers.push(match arch {
                Arch::Kgat1 => GatScorer::Kan(KanLayer::init(store, &format!("{prefix}.score{h}"), 2 * head_dim, 1, grid, rng)?),
                _ => GatScorer::Vectors {
                    dst: store.add(format!("{prefix}.att_dst{h}"), glorot(head_dim, 1, rng)),
                    src: store.add(format!("{prefix}.att_src{h}"), glorot(head_dim, 1, rng)),
                },
            });
        }
        let out = if concat { width } else { head_dim };
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(1, out));
        Ok(GatLayer { transform, scorers, head_dim, concat, bias })
    }

    fn forward(&self, tape: &mut Tape<'_>, x: &KanInput, edges: &EdgeIndex) -> Result<Var> {
        let wh = self.transform.apply(tape, x)?;
        let mut outs = Vec::with_capacity(self.scorers.len());
        for (h, scorer) in self.scorers.iter().enumerate() {
            let whh = tape.slice_cols(wh, h * self.head_dim, self.head_dim)?;
            let alpha = gat_attention(tape, whh, scorer, edges)?;
            let msg = edges.gather_src(tape, whh)?;
            let msg = tape.scale_rows(msg, alpha)?;
            outs.push(edges.scatter_dst(tape, msg)?);
        }
        let combined = if self.concat {
            tape.concat_cols(&outs)?
        } else {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o)?;
            }
            tape.scale(acc, 1.0 / outs.len() as f64)?
        };
        let b = tape.param(self.bias);
        tape.add_row(combined, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Gcn(Vec<Linear>),
    /// KGCN1 (`after = true`): `KAN(Â H)`. KGCN2: `Â KAN(H)`.
    Kgcn { stack: KanStack, after: bool },
    Gat(Vec<GatLayer>),
    Sgc(Linear),
    Ksgc(KanStack),
    Appnp(Head),
    Student(Head),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    in_dim: usize,
    n_classes: usize,
    params: ParamStore,
    body: Body,
}

impl Model {
    /// Deterministic in `spec.seed`.
    pub fn build(spec: &ModelSpec, in_dim: usize, n_classes: usize) -> Result<Model> {
        spec.validate()?;
        if in_dim == 0 || n_classes == 0 {
            return Err(Error::invalid("input and class dims must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let grid = spec.grid()?;
        let dims = spec.dims(in_dim, n_classes);
        let linears = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
            dims.windows(2)
                .enumerate()
                .map(|(l, w)| Linear::init(store, &format!("{prefix}.{l}"), w[0], w[1], rng))
                .collect::<Vec<_>>()
        };
        let body = match spec.arch {
            Arch::Gcn => Body::Gcn(linears(&mut store, &mut rng, "gcn")),
            Arch::Kgcn1 | Arch::Kgcn2 => Body::Kgcn {
                stack: KanStack::init(&mut store, "kgcn", &dims, grid, &mut rng)?,
                after: spec.arch == Arch::Kgcn1,
            },
            Arch::Gat | Arch::Kgat1 | Arch::Kgat2 => {
                let head_dim = spec.hidden / spec.heads;
                let mut layers = Vec::with_capacity(spec.layers);
                let mut d_in = in_dim;
                for l in 0..spec.layers {
                    let last = l + 1 == spec.layers;
                    let (dh, concat) = if last { (n_classes, false) } else { (head_dim, true) };
                    let prefix = format!("gat.{l}");
                    layers.push(GatLayer::init(&mut store, &prefix, spec.arch, d_in, spec.heads, dh, concat, grid, &mut rng)?);
                    d_in = spec.hidden;
                }
                Body::Gat(layers)
            }
            Arch::Sgc => Body::Sgc(Linear::init(&mut store, "sgc", in_dim, n_classes, &mut rng)),
            Arch::Ksgc => Body::Ksgc(KanStack::init(&mut store, "ksgc", &dims, grid, &mut rng)?),
            Arch::Appnp => Body::Appnp(Head::Mlp(linears(&mut store, &mut rng, "mlp"))),
            Arch::Kappnp => Body::Appnp(Head::Kan(KanStack::init(&mut store, "kan", &dims, grid, &mut rng)?)),
            Arch::Mlp => Body::Student(Head::Mlp(linears(&mut store, &mut rng, "mlp"))),
            Arch::Kan => Body::Student(Head::Kan(KanStack::init(&mut store, "kan", &dims, grid, &mut rng)?)),
        };
        Ok(Model { spec: spec.clone(), in_dim, n_classes, params: store, body })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// KAN layers of a KAN student, in order.
    pub fn kan_layers(&self) -> Option<&[KanLayer]> {
        match &self.body {
            Body::Student(Head::Kan(s)) | Body::Ksgc(s) | Body::Appnp(Head::Kan(s)) | Body::Kgcn { stack: s, .. } => Some(s.layers()),
            _ => None,
        }
    }

    /// Raw logits (`n x C`).
    pub fn forward(&self, tape: &mut Tape<'_>, ctx: &GraphContext, mode: &mut ForwardMode<'_>) -> Result<Var> {
        if ctx.features().cols() != self.in_dim {
            return Err(Error::Shape { op: "model_forward", left: ctx.features().shape(), right: (ctx.n_nodes(), self.in_dim) });
        }
        let p = self.spec.dropout;
        let x = KanInput::Sparse(Arc::clone(ctx.features()));
        match &self.body {
            Body::Gcn(layers) => {
                let mut h = x;
                for (l, lin) in layers.iter().enumerate() {
                    h = mode.dropout(tape, &h, p)?;
                    let xw = lin.project(tape, &h)?;
                    let agg = spmm_var(tape, ctx.adjacency(), xw)?;
                    let mut v = lin.add_bias(tape, agg)?;
                    if l + 1 < layers.len() {
                        v = tape.relu(v)?;
                    }
                    h = KanInput::Dense(v);
                }
                Ok(dense(h))
            }
            Body::Kgcn { stack, after } => {
                let mut h = x;
                for layer in stack.layers() {
                    h = mode.dropout(tape, &h, p)?;
                    let v = if *after {
                        let agg = aggregate(tape, ctx, &h)?;
                        layer.forward(tape, &agg)?
                    } else {
                        let t = layer.forward(tape, &h)?;
                        spmm_var(tape, ctx.adjacency(), t)?
                    };
                    h = KanInput::Dense(v);
                }
                Ok(dense(h))
            }
            Body::Gat(layers) => {
                let mut h = x;
                for (l, layer) in layers.iter().enumerate() {
                    h = mode.dropout(tape, &h, p)?;
                    let mut v = layer.forward(tape, &h, ctx.edges())?;
                    if l + 1 < layers.len() {
                        v = tape.elu(v)?;
                    }
                    h = KanInput::Dense(v);
                }
                Ok(dense(h))
            }
            Body::Sgc(lin) => {
                let px = KanInput::Sparse(ctx.propagated_features(self.spec.prop_steps)?);
                let px = mode.dropout(tape, &px, p)?;
                lin.forward(tape, &px)
            }
            Body::Ksgc(stack) => {
                let px = KanInput::Sparse(ctx.propagated_features(self.spec.prop_steps)?);
                kan_forward(stack, tape, px, mode, p)
            }
            Body::Appnp(head) => {
                let h0 = head.forward(tape, x, mode, p)?;
                self.propagate_logits(tape, ctx, h0)
            }
            Body::Student(head) => head.forward(tape, x, mode, p),
        }
    }

    /// The propagation tail shared by APPNP and KAPPNP.
    pub fn propagate_logits(&self, tape: &mut Tape<'_>, ctx: &GraphContext, h0: Var) -> Result<Var> {
        appnp_propagate_var(tape, ctx.adjacency(), h0, self.spec.teleport, self.spec.prop_steps)
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, ctx: &GraphContext) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward(&mut tape, ctx, &mut ForwardMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, ctx: &GraphContext) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.logits(ctx)?))
    }
}

/// `Â H`, keeping a sparse `H` sparse.
fn aggregate(tape: &mut Tape<'_>, ctx: &GraphContext, h: &KanInput) -> Result<KanInput> {
    Ok(match h {
        KanInput::Dense(v) => KanInput::Dense(spmm_var(tape, ctx.adjacency(), *v)?),
        KanInput::Sparse(m) => KanInput::Sparse(Arc::new(propagate_power_sparse(ctx.adjacency(), m, 1)?)),
    })
}

fn dense(h: KanInput) -> Var {
    match h {
        KanInput::Dense(v) => v,
        KanInput::Sparse(_) => unreachable!("model has at least one layer"),
    }
}

/// Row-wise argmax; ties go to the smallest class id.
pub fn predict_from_logits(logits: &Tensor) -> Vec<usize> {
    logits.argmax_rows()
}
