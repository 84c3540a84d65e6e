//! On-disk dataset directories and model checkpoints.
//!
//! A dataset directory holds:
//!
//! * `meta.json`: the [`DatasetManifest`];
//! * `edges.txt`: one `u v` pair per line, 0-indexed, undirected;
//! * `features.bin`: `u64 n`, `u64 d` (little endian), then `n * d`
//!   little-endian `f32` values in row-major order;
//! * `labels.txt`: one class id per line.
//!
//! A checkpoint file is the magic `KGAC`, a `u32` format version, a `u64`
//! length followed by a JSON header, then for every parameter: `u32` name
//! length, name bytes, `u64` rows, `u64` cols, `u64` value count and the
//! values as little-endian `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{largest_connected_component, SparseGraph};
use crate::models::{Arch, Model, ModelSpec};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub n_nodes: usize,
    /// Distinct undirected edges, self-loops excluded.
    pub n_edges: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub feature_encoding: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub graph: SparseGraph,
}

/// How stored features are turned into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTransform {
    /// Use the stored values.
    #[default]
    Stored,
    /// Every nonzero becomes 1. For bag-of-words features this undoes any
    /// row scaling applied at conversion time.
    Binary,
}

/// Steps from a loaded dataset to the graph a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    pub largest_component: bool,
    pub features: FeatureTransform,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess { largest_component: true, features: FeatureTransform::default() }
    }
}

impl Dataset {
    pub fn working_graph(&self, p: &Preprocess) -> Result<SparseGraph> {
        let g = if p.largest_component { largest_connected_component(&self.graph)?.0 } else { self.graph.clone() };
        match p.features {
            FeatureTransform::Stored => Ok(g),
            FeatureTransform::Binary => g.with_features(g.features().filter_map_values(|_, _, _| Some(1.0))),
        }
    }
}

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), msg: msg.into() }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| dataset_err(path, e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| dataset_err(path, e.to_string()))
}

/// Loads and validates a dataset directory. Edge order, direction and
/// duplicates do not affect the result.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(dataset_err(dir, "not a dataset directory"));
    }
    let meta_path = dir.join("meta.json");
    let manifest: DatasetManifest =
        serde_json::from_str(&read_text(&meta_path)?).map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;
    let n = manifest.n_nodes;

    let labels_path = dir.join("labels.txt");
    let mut labels = Vec::with_capacity(n);
    for (i, line) in read_text(&labels_path)?.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let y: usize = t.parse().map_err(|_| parse_err(&labels_path, i + 1, format!("bad label `{t}`")))?;
        if y >= manifest.n_classes {
            return Err(parse_err(&labels_path, i + 1, format!("label {y} not below {} classes", manifest.n_classes)));
        }
        labels.push(y);
    }
    if labels.len() != n {
        return Err(dataset_err(&labels_path, format!("{} labels, manifest says {n} nodes", labels.len())));
    }

    let edges_path = dir.join("edges.txt");
    let mut edges = Vec::new();
    for (i, line) in read_text(&edges_path)?.lines().enumerate() {
        let mut it = line.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(&edges_path, i + 1, format!("expected `u v`, got `{line}`")));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| parse_err(&edges_path, i + 1, format!("bad node id `{s}`")));
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= n || v >= n {
            return Err(parse_err(&edges_path, i + 1, format!("node id {} out of range for {n} nodes", u.max(v))));
        }
        edges.push((u, v));
    }

    let features_path = dir.join("features.bin");
    let features = decode_features(&read(&features_path)?).map_err(|msg| dataset_err(&features_path, msg))?;
    if features.shape() != (n, manifest.n_features) {
        return Err(dataset_err(
            &features_path,
            format!("features are {:?}, manifest says ({n}, {})", features.shape(), manifest.n_features),
        ));
    }

    let graph = SparseGraph::new(&edges, features, labels, manifest.n_classes).map_err(|e| dataset_err(dir, e.to_string()))?;
    if graph.n_edges() != manifest.n_edges {
        return Err(dataset_err(&edges_path, format!("{} distinct edges, manifest says {}", graph.n_edges(), manifest.n_edges)));
    }
    Ok(Dataset { manifest, graph })
}

fn decode_features(bytes: &[u8]) -> std::result::Result<CsrMatrix, String> {
    if bytes.len() < 16 {
        return Err("shorter than its 16-byte header".into());
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = n.checked_mul(d).and_then(|c| c.checked_mul(4)).and_then(|c| c.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(format!("{} bytes for a {n}x{d} f32 matrix", bytes.len()));
    }
    let mut triplets = Vec::new();
    for (k, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format!("non-finite value at row {}, col {}", k / d, k % d));
        }
        if v != 0.0 {
            triplets.push((k / d, k % d, f64::from(v)));
        }
    }
    CsrMatrix::from_triplets(n, d, triplets).map_err(|e| e.to_string())
}

/// Writes `graph` as a dataset directory. Feature values are stored as
/// `f32`.
pub fn write_dataset(dir: impl AsRef<Path>, name: &str, graph: &SparseGraph, feature_encoding: &str) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        name: name.to_string(),
        n_nodes: graph.n_nodes(),
        n_edges: graph.n_edges(),
        n_features: graph.n_features(),
        n_classes: graph.n_classes(),
        feature_encoding: feature_encoding.to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&manifest)?)?;
    let edges: String = graph.edges().map(|(u, v)| format!("{u} {v}\n")).collect();
    fs::write(dir.join("edges.txt"), edges)?;
    let labels: String = graph.labels().iter().map(|y| format!("{y}\n")).collect();
    fs::write(dir.join("labels.txt"), labels)?;
    let (n, d) = graph.features().shape();
    let mut bytes = Vec::with_capacity(16 + 4 * n * d);
    bytes.extend((n as u64).to_le_bytes());
    bytes.extend((d as u64).to_le_bytes());
    let dense = graph.features().to_dense();
    for &v in dense.data() {
        bytes.extend((v as f32).to_le_bytes());
    }
    fs::write(dir.join("features.bin"), bytes)?;
    Ok(manifest)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KGAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub spec: ModelSpec,
    pub in_dim: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub val_accuracy: f64,
    pub n_params: usize,
    /// Preprocessing of the training graph.
    #[serde(default)]
    pub preprocess: Preprocess,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, val_accuracy: f64) -> Self {
        let params: Vec<(String, Tensor)> = model.params().iter().map(|p| (p.name().to_string(), p.value.clone())).collect();
        Checkpoint {
            header: CheckpointHeader {
                arch: model.arch(),
                spec: model.spec().clone(),
                in_dim: model.in_dim(),
                n_classes: model.n_classes(),
                seed: model.spec().seed,
                val_accuracy,
                n_params: params.len(),
                preprocess: Preprocess::default(),
            },
            params,
        }
    }

    pub fn with_preprocess(mut self, p: Preprocess) -> Self {
        self.header.preprocess = p;
        self
    }

    /// Rebuilds the model and restores every parameter.
    pub fn to_model(&self) -> Result<Model> {
        let h = &self.header;
        let mut model = Model::build(&h.spec, h.in_dim, h.n_classes)?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("{} parameters stored, architecture has {}", self.params.len(), store.len())));
        }
        for (name, value) in &self.params {
            let id = store.find(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("`{name}` is {:?}, expected {:?}", value.shape(), p.value.shape())));
            }
            p.value = value.clone();
        }
        Ok(model)
    }

    /// Like [`to_model`](Self::to_model), failing unless the stored
    /// architecture is `expected`.
    pub fn to_model_of(&self, expected: Arch) -> Result<Model> {
        if self.header.arch != expected {
            return Err(Error::ArchMismatch { expected: expected.to_string(), found: self.header.arch.to_string() });
        }
        self.to_model()
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ckpt.header)?;
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header);
    for (name, t) in &ckpt.params {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rows() as u64).to_le_bytes());
        out.extend((t.cols() as u64).to_le_bytes());
        out.extend((t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let len = r.u64()?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
    if header.arch != header.spec.arch {
        return Err(Error::ArchMismatch { expected: header.arch.to_string(), found: header.spec.arch.to_string() });
    }
    let mut params = Vec::with_capacity(header.n_params);
    for _ in 0..header.n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let (rows, cols, count) = (r.u64()?, r.u64()?, r.u64()?);
        if rows.checked_mul(cols) != Some(count) {
            return Err(Error::Checkpoint(format!("`{name}`: {count} values for {rows}x{cols}")));
        }
        let raw = r.take(count.checked_mul(8).ok_or(Error::Truncated)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { header, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// `<root>/<name>` if it exists.
pub fn find_dataset(root: impl AsRef<Path>, name: &str) -> Option<PathBuf> {
    let p = root.as_ref().join(name);
    p.join("meta.json").is_file().then_some(p)
}
