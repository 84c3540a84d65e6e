use std::path::{Path, PathBuf};

use kgac::amalgam::{DistillConfig, TeacherOutputs};
use kgac::bench::{format_table, measure_inference};
use kgac::datasets::{load_checkpoint, load_dataset, Checkpoint, DatasetManifest, FeatureTransform, Preprocess};
use kgac::graph::{make_splits, SparseGraph, SplitAssignment};
use kgac::models::{Arch, GraphContext, ModelSpec};
use kgac::recipes::Recipe;
use kgac::trainer::{evaluate, run_seeds, train, Objective, RunResult, Summary, TrainConfig};
use kgac::Tensor;
use serde::Serialize;

use crate::config::{parse_arch, ExperimentConfig};
use crate::output::{print_json, table, write_atomic, write_json};
use crate::{CliError, DataArgs};

struct Loaded {
    manifest: DatasetManifest,
    graph: SparseGraph,
}

fn load_graph(dir: &Path, p: &Preprocess) -> Result<Loaded, CliError> {
    let ds = load_dataset(dir).map_err(|e| CliError::Config(e.to_string()))?;
    let graph = ds.working_graph(p)?;
    Ok(Loaded { manifest: ds.manifest, graph })
}

fn read_split(path: &Path, n_nodes: usize) -> Result<SplitAssignment, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let split: SplitAssignment = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    split.validate(n_nodes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(split)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!("{}: no such checkpoint", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn split_for(config: &ExperimentConfig, graph: &SparseGraph, seed: u64) -> Result<SplitAssignment, CliError> {
    match &config.split {
        Some(path) => read_split(path, graph.n_nodes()),
        None => Ok(make_splits(graph.labels(), graph.n_classes(), seed)?),
    }
}

fn parse_features(s: &str) -> Result<FeatureTransform, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Config(format!("unknown feature transform `{s}` (expected stored or binary)")))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn splits(data: &DataArgs, seed: u64, out: &Path, json: bool) -> Result<(), CliError> {
    let p = Preprocess { largest_component: !data.full_graph, features: parse_features(&data.features)? };
    let loaded = load_graph(&data.dataset, &p)?;
    let split = make_splits(loaded.graph.labels(), loaded.graph.n_classes(), seed)?;
    write_json(out, &split)?;
    if json {
        return print_json(&split);
    }
    print!(
        "{}",
        table(
            &["dataset", "seed", "nodes", "train", "val", "test"],
            &[vec![
                loaded.manifest.name,
                seed.to_string(),
                split.n_nodes.to_string(),
                split.train.len().to_string(),
                split.val.len().to_string(),
                split.test.len().to_string(),
            ]],
        )
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedRun {
    spec: ModelSpec,
    result: RunResult,
    checkpoint: PathBuf,
}

#[derive(Serialize)]
struct TeacherMetrics<'a> {
    command: &'static str,
    config: &'a ExperimentConfig,
    dataset: &'a DatasetManifest,
    preprocess: Preprocess,
    train: TrainConfig,
    nodes: usize,
    runs: Vec<SeedRun>,
    val_accuracy: Summary,
    test_accuracy: Summary,
}

fn ckpt_path(dir: &Path, arch: Arch, seed: u64) -> PathBuf {
    dir.join(arch.name()).join(format!("seed-{seed}.kgac"))
}

fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    write_atomic(path, &kgac::datasets::encode_checkpoint(ckpt)?)
}

fn run_table(runs: &[&RunResult]) -> String {
    let mut rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| vec![r.seed.to_string(), r.best_epoch.to_string(), r.epochs_run.to_string(), pct(r.val_accuracy), pct(r.test_accuracy)])
        .collect();
    let val = Summary::of(&runs.iter().map(|r| r.val_accuracy).collect::<Vec<_>>());
    let test = Summary::of(&runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    rows.push(vec!["mean".into(), String::new(), String::new(), pct(val.mean), pct(test.mean)]);
    rows.push(vec!["std".into(), String::new(), String::new(), pct(val.std), pct(test.std)]);
    table(&["seed", "best_epoch", "epochs", "val_acc%", "test_acc%"], &rows)
}

pub fn train_teacher(config: &ExperimentConfig, json: bool) -> Result<(), CliError> {
    let arch = parse_arch(config.arch.as_deref().ok_or_else(|| CliError::Config("`arch` is required".into()))?)?;
    let train_config = config.train_config(arch)?;
    let preprocess = config.preprocess(arch);
    let loaded = load_graph(&config.dataset, &preprocess)?;
    let graph = &loaded.graph;
    let ctx = GraphContext::new(graph);
    for &seed in &config.seeds {
        split_for(config, graph, seed)?;
        config.model_spec(arch, seed)?;
    }

    let runs = run_seeds(&config.seeds, config.threads, |seed| {
        let spec = config.model_spec(arch, seed).map_err(to_core)?;
        let splits = split_for(config, graph, seed).map_err(to_core)?;
        let (result, model) = train(&spec, &ctx, graph.labels(), &splits, &train_config, &Objective::Supervised)?;
        let checkpoint = ckpt_path(&config.output, arch, seed);
        save(&checkpoint, &Checkpoint::from_model(&model, result.val_accuracy).with_preprocess(preprocess)).map_err(to_core)?;
        Ok(SeedRun { spec, result, checkpoint })
    })?;

    let metrics = TeacherMetrics {
        command: "train-teacher",
        config,
        dataset: &loaded.manifest,
        preprocess,
        train: train_config,
        nodes: graph.n_nodes(),
        val_accuracy: Summary::of(&runs.iter().map(|r| r.result.val_accuracy).collect::<Vec<_>>()),
        test_accuracy: Summary::of(&runs.iter().map(|r| r.result.test_accuracy).collect::<Vec<_>>()),
        runs,
    };
    write_json(&config.output.join(arch.name()).join("metrics.json"), &metrics)?;
    if json {
        return print_json(&metrics);
    }
    println!("{} on {} ({} nodes)", arch, loaded.manifest.name, graph.n_nodes());
    print!("{}", run_table(&metrics.runs.iter().map(|r| &r.result).collect::<Vec<_>>()));
    Ok(())
}

/// Errors inside seed jobs travel as core errors; config problems were
/// checked before the jobs started.
fn to_core(e: CliError) -> kgac::Error {
    match e {
        CliError::Config(m) => kgac::Error::invalid(m),
        CliError::Runtime(e) => e,
    }
}

#[derive(Serialize)]
struct TeacherRecord {
    arch: Arch,
    checkpoint: PathBuf,
    /// Whether the checkpoint was trained by this run.
    trained_here: bool,
    val_accuracy: f64,
    test_accuracy: f64,
}

#[derive(Serialize)]
struct DistillRun {
    spec: ModelSpec,
    teachers: Vec<TeacherRecord>,
    result: RunResult,
    checkpoint: PathBuf,
}

#[derive(Serialize)]
struct DistillMetrics<'a> {
    command: &'static str,
    config: &'a ExperimentConfig,
    dataset: &'a DatasetManifest,
    preprocess: Preprocess,
    train: TrainConfig,
    distill: DistillConfig,
    nodes: usize,
    runs: Vec<DistillRun>,
    val_accuracy: Summary,
    test_accuracy: Summary,
}

/// A teacher's working graph. Node order only depends on
/// `largest_component`, so teacher logits line up with the student's rows
/// whatever feature transform each side uses.
struct TeacherGraph {
    arch: Arch,
    preprocess: Preprocess,
    graph: SparseGraph,
}

fn teacher_graphs(config: &ExperimentConfig, archs: &[Arch], student: &Loaded) -> Result<Vec<TeacherGraph>, CliError> {
    let mut out: Vec<TeacherGraph> = Vec::new();
    for &arch in archs {
        let preprocess = config.preprocess(arch);
        let graph = match out.iter().find(|t| t.preprocess == preprocess) {
            Some(t) => t.graph.clone(),
            None => load_graph(&config.dataset, &preprocess)?.graph,
        };
        if graph.labels() != student.graph.labels() {
            return Err(CliError::Config(format!("{arch}: teacher and student graphs disagree on node order")));
        }
        out.push(TeacherGraph { arch, preprocess, graph });
    }
    Ok(out)
}

fn teacher_for_seed(config: &ExperimentConfig, teacher: &TeacherGraph, seed: u64, splits: &SplitAssignment) -> Result<(Tensor, TeacherRecord), CliError> {
    let TeacherGraph { arch, preprocess, ref graph } = *teacher;
    let ctx = GraphContext::new(graph);
    let path = ckpt_path(config.teacher_dir(), arch, seed);
    if path.is_file() {
        let ckpt = load_checkpoint(&path)?;
        if ckpt.header.preprocess != preprocess {
            return Err(CliError::Config(format!("{}: teacher was trained with different preprocessing", path.display())));
        }
        let model = ckpt.to_model_of(arch)?;
        let test_accuracy = evaluate(&model, &ctx, graph.labels(), &splits.test)?;
        let record = TeacherRecord { arch, checkpoint: path, trained_here: false, val_accuracy: ckpt.header.val_accuracy, test_accuracy };
        return Ok((model.logits(&ctx)?, record));
    }
    let recipe = Recipe::for_arch(arch);
    let (result, model) = train(&recipe.spec(seed), &ctx, graph.labels(), splits, &recipe.train, &Objective::Supervised)?;
    save(&path, &Checkpoint::from_model(&model, result.val_accuracy).with_preprocess(preprocess))?;
    let record = TeacherRecord { arch, checkpoint: path, trained_here: true, val_accuracy: result.val_accuracy, test_accuracy: result.test_accuracy };
    Ok((model.logits(&ctx)?, record))
}

pub fn distill(config: &ExperimentConfig, json: bool) -> Result<(), CliError> {
    if config.teachers.len() != 2 {
        return Err(CliError::Config(format!("`teachers` must name exactly 2 architectures, got {}", config.teachers.len())));
    }
    let teacher_archs = config.teachers.iter().map(|t| parse_arch(t)).collect::<Result<Vec<_>, _>>()?;
    let student = parse_arch(&config.student)?;
    if !student.is_student() {
        return Err(CliError::Config(format!("student must be MLP or KAN, got {student}")));
    }
    let train_config = config.train_config(student)?;
    let distill_config = config.distill_config()?;
    let preprocess = config.preprocess(student);
    let loaded = load_graph(&config.dataset, &preprocess)?;
    let teacher_graphs = teacher_graphs(config, &teacher_archs, &loaded)?;
    let graph = &loaded.graph;
    let ctx = GraphContext::new(graph);
    for &seed in &config.seeds {
        split_for(config, graph, seed)?;
        config.model_spec(student, seed)?;
    }
    let tag = format!("{}+{}-to-{}", teacher_archs[0], teacher_archs[1], student);
    let out_dir = config.output.join("distill").join(&tag);

    let runs = run_seeds(&config.seeds, config.threads, |seed| {
        let splits = split_for(config, graph, seed).map_err(to_core)?;
        let mut names = Vec::new();
        let mut logits = Vec::new();
        let mut teachers = Vec::new();
        for teacher in &teacher_graphs {
            let (teacher_logits, record) = teacher_for_seed(config, teacher, seed, &splits).map_err(to_core)?;
            names.push(teacher.arch.name().to_string());
            logits.push(teacher_logits);
            teachers.push(record);
        }
        let outputs = TeacherOutputs::new(names, logits)?;
        let spec = config.model_spec(student, seed).map_err(to_core)?;
        let objective = Objective::Distill { teachers: &outputs, config: distill_config };
        let (result, model) = train(&spec, &ctx, graph.labels(), &splits, &train_config, &objective)?;
        let checkpoint = out_dir.join(format!("seed-{seed}.kgac"));
        save(&checkpoint, &Checkpoint::from_model(&model, result.val_accuracy).with_preprocess(preprocess)).map_err(to_core)?;
        Ok(DistillRun { spec, teachers, result, checkpoint })
    })?;

    let metrics = DistillMetrics {
        command: "distill",
        config,
        dataset: &loaded.manifest,
        preprocess,
        train: train_config,
        distill: distill_config,
        nodes: graph.n_nodes(),
        val_accuracy: Summary::of(&runs.iter().map(|r| r.result.val_accuracy).collect::<Vec<_>>()),
        test_accuracy: Summary::of(&runs.iter().map(|r| r.result.test_accuracy).collect::<Vec<_>>()),
        runs,
    };
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    if json {
        return print_json(&metrics);
    }
    println!("{tag} on {} (lambda {}, T {})", loaded.manifest.name, distill_config.lambda, distill_config.temperature);
    print!("{}", run_table(&metrics.runs.iter().map(|r| &r.result).collect::<Vec<_>>()));
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    arch: Arch,
    seed: u64,
    dataset: String,
    split_seed: u64,
    train_accuracy: f64,
    val_accuracy: f64,
    test_accuracy: f64,
    /// Validation accuracy stored in the checkpoint at save time.
    recorded_val_accuracy: f64,
}

pub fn eval(checkpoint: &Path, dataset: &Path, split: &Path, out: Option<&Path>, json: bool) -> Result<(), CliError> {
    let ckpt = read_checkpoint(checkpoint)?;
    let loaded = load_graph(dataset, &ckpt.header.preprocess)?;
    let split = read_split(split, loaded.graph.n_nodes())?;
    let model = ckpt.to_model()?;
    if model.in_dim() != loaded.graph.n_features() || model.n_classes() != loaded.graph.n_classes() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            model.in_dim(),
            model.n_classes(),
            loaded.graph.n_features(),
            loaded.graph.n_classes()
        )));
    }
    let ctx = GraphContext::new(&loaded.graph);
    let pred = model.predict(&ctx)?;
    let labels = loaded.graph.labels();
    let acc = |nodes: &[usize]| if nodes.is_empty() { Ok(f64::NAN) } else { kgac::trainer::accuracy(&pred, labels, nodes) };
    let report = EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        arch: model.arch(),
        seed: ckpt.header.seed,
        dataset: loaded.manifest.name.clone(),
        split_seed: split.seed,
        train_accuracy: acc(&split.train)?,
        val_accuracy: acc(&split.val)?,
        test_accuracy: acc(&split.test)?,
        recorded_val_accuracy: ckpt.header.val_accuracy,
    };
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    if json {
        return print_json(&report);
    }
    print!(
        "{}",
        table(
            &["model", "dataset", "train_acc%", "val_acc%", "test_acc%"],
            &[vec![report.arch.to_string(), report.dataset, pct(report.train_accuracy), pct(report.val_accuracy), pct(report.test_accuracy)]],
        )
    );
    Ok(())
}

pub fn bench(checkpoint: &Path, dataset: &Path, reps: usize, out: Option<&Path>, json: bool) -> Result<(), CliError> {
    if reps < kgac::bench::MIN_REPS {
        return Err(CliError::Config(format!("--reps must be at least {}", kgac::bench::MIN_REPS)));
    }
    let ckpt = read_checkpoint(checkpoint)?;
    let loaded = load_graph(dataset, &ckpt.header.preprocess)?;
    let model = ckpt.to_model()?;
    if model.in_dim() != loaded.graph.n_features() {
        return Err(CliError::Config(format!("checkpoint expects {} features, dataset has {}", model.in_dim(), loaded.graph.n_features())));
    }
    let ctx = GraphContext::new(&loaded.graph);
    let report = measure_inference(&model, &ctx, &loaded.manifest.name, reps)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    if json {
        return print_json(&report);
    }
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}
