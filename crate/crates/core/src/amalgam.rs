//! Multi-teacher knowledge amalgamation: similarity-weighted fusion of
//! teacher logits into soft targets, and the distillation losses.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Rows with a smaller L2 norm count as zero vectors.
pub const ZERO_ROW_NORM: f64 = 1e-12;

/// Knobs of one amalgamation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the amalgamation loss against the supervised loss.
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { lambda: DEFAULT_LAMBDA, temperature: DEFAULT_TEMPERATURE }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Cached evaluation-mode logits of each teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    names: Vec<String>,
    logits: Vec<Arc<Tensor>>,
}

impl TeacherOutputs {
    pub fn new(names: Vec<String>, logits: Vec<Tensor>) -> Result<Self> {
        if logits.is_empty() || names.len() != logits.len() {
            return Err(Error::invalid("need one name per teacher and at least one teacher"));
        }
        let shape = logits[0].shape();
        for (name, z) in names.iter().zip(&logits) {
            if z.shape() != shape {
                return Err(Error::Shape { op: "teacher_outputs", left: shape, right: z.shape() });
            }
            if !z.is_finite() {
                return Err(Error::invalid(format!("teacher {name} has non-finite logits")));
            }
        }
        Ok(TeacherOutputs { names, logits: logits.into_iter().map(Arc::new).collect() })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn logits(&self) -> &[Arc<Tensor>] {
        &self.logits
    }

    /// Similarity of the student to each teacher, in teacher order.
    pub fn similarities(&self, student: &Tensor) -> Result<Vec<f64>> {
        self.logits.iter().map(|z| teacher_similarity(student, z)).collect()
    }
}

/// Sum of the L2-normalized rows of `z`.
fn normalized_row_sum(z: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        let row = z.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= ZERO_ROW_NORM {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / norm;
            }
        }
    }
    acc
}

/// Mean of all `n²` pairwise cosine similarities between rows of the
/// student logits and rows of a teacher's logits.
///
/// Since the mean of `Ẑ_s Ẑ_tᵀ` factorizes as the dot product of the two
/// normalized row sums, this costs `O(n C)`.
pub fn teacher_similarity(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape { op: "teacher_similarity", left: student.shape(), right: teacher.shape() });
    }
    let n = student.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let (s, t) = (normalized_row_sum(student), normalized_row_sum(teacher));
    let dot: f64 = s.iter().zip(&t).map(|(a, b)| a * b).sum();
    Ok(dot / (n as f64 * n as f64))
}

/// Softmax over teacher similarities.
pub fn attention_weights(sims: &[f64]) -> Result<Vec<f64>> {
    if sims.is_empty() {
        return Err(Error::invalid("attention over zero teachers"));
    }
    let mut a = sims.to_vec();
    softmax_in_place(&mut a);
    Ok(a)
}

/// Row-wise `softmax(Σ_t α_t Z^t / T)` and its logarithm.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub probs: Tensor,
    pub log_probs: Tensor,
}

pub fn fuse_soft_targets(teachers: &[Arc<Tensor>], alpha: &[f64], temperature: f64) -> Result<SoftTargets> {
    if teachers.is_empty() || teachers.len() != alpha.len() {
        return Err(Error::invalid(format!("{} teachers but {} weights", teachers.len(), alpha.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let shape = teachers[0].shape();
    let mut mixed = Tensor::zeros(shape.0, shape.1);
    for (z, &a) in teachers.iter().zip(alpha) {
        if z.shape() != shape {
            return Err(Error::Shape { op: "fuse_soft_targets", left: shape, right: z.shape() });
        }
        for (m, v) in mixed.data_mut().iter_mut().zip(z.data()) {
            *m += a * v / temperature;
        }
    }
    Ok(SoftTargets { probs: mixed.softmax_rows(), log_probs: mixed.log_softmax_rows() })
}

fn check_nodes(op: &str, nodes: &[usize], rows: usize) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::invalid(format!("{op}: empty node set")));
    }
    if let Some(&v) = nodes.iter().find(|&&v| v >= rows) {
        return Err(Error::invalid(format!("{op}: node {v} out of range for {rows} rows")));
    }
    Ok(())
}

/// `(T² / |V|) Σ_{v ∈ V} KL(ŷ_v ‖ z_v)` with `ŷ_v = softmax(s_v / T)`.
pub fn loss_mta(tape: &mut Tape<'_>, student_logits: Var, targets: &SoftTargets, temperature: f64, nodes: &Arc<[usize]>) -> Result<Var> {
    let shape = tape.shape(student_logits);
    if shape != targets.probs.shape() {
        return Err(Error::Shape { op: "loss_mta", left: shape, right: targets.probs.shape() });
    }
    check_nodes("loss_mta", nodes, shape.0)?;
    let s = tape.gather_rows(student_logits, Arc::clone(nodes))?;
    let s = tape.scale(s, 1.0 / temperature)?;
    let log_p = tape.log_softmax_rows(s)?;
    let p = tape.exp(log_p)?;
    let log_z = tape.constant(targets.log_probs.select_rows(nodes));
    let diff = tape.sub(log_p, log_z)?;
    let terms = tape.hadamard(p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, temperature * temperature / nodes.len() as f64)
}

/// Mean cross-entropy of the logits against the labels on `nodes`.
pub fn loss_hard(tape: &mut Tape<'_>, logits: Var, labels: &[usize], nodes: &Arc<[usize]>) -> Result<Var> {
    let (rows, classes) = tape.shape(logits);
    check_nodes("loss_hard", nodes, rows)?;
    if labels.len() != rows {
        return Err(Error::Shape { op: "loss_hard", left: (rows, classes), right: (labels.len(), 1) });
    }
    let mut onehot = Tensor::zeros(nodes.len(), classes);
    for (r, &v) in nodes.iter().enumerate() {
        if labels[v] >= classes {
            return Err(Error::invalid(format!("label {} out of range for {classes} classes", labels[v])));
        }
        onehot.set(r, labels[v], 1.0);
    }
    let s = tape.gather_rows(logits, Arc::clone(nodes))?;
    let log_p = tape.log_softmax_rows(s)?;
    let y = tape.constant(onehot);
    let picked = tape.hadamard(log_p, y)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / nodes.len() as f64)
}

/// `λ L_MTA + (1 − λ) L_hard`. The endpoints return the corresponding loss
/// node unchanged.
pub fn loss_total(tape: &mut Tape<'_>, mta: Var, hard: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(mta);
    }
    if lambda == 0.0 {
        return Ok(hard);
    }
    let a = tape.scale(mta, lambda)?;
    let b = tape.scale(hard, 1.0 - lambda)?;
    tape.add(a, b)
}
