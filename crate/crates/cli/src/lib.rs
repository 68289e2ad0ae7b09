//! Pipeline stages behind the `cfgmoe` binary. Each stage reads the
//! documented formats, writes its outputs and a manifest next to them.

pub mod config;
pub mod error;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cfgmoe::autoencoder::{encode_nodes, train_autoencoder, AeConfig, AutoencoderParams};
use cfgmoe::encoding::{aggregate_block, encode_instruction, parse_blocks, BlockAggregation, ENCODED_WIDTH};
use cfgmoe::explain::{explain_graph, ExplainConfig, Explanation};
use cfgmoe::graph::{
    load_dataset, load_graph, save_dataset, save_graph, stratified_split, synth_dataset, Cfg, Dataset, Label,
};
use cfgmoe::model::{expert_name, predict, MoeModel, NUM_EXPERTS};
use cfgmoe::train::{evaluate, train};
use cfgmoe::xai::{coselection_entropy, coselection_matrix, entropy_ecdf, fidelity_sweep, gate_boxes, router_entropy};
use cfgmoe::Tensor;
use serde::Serialize;

use config::{hex_digest, read_input, require, RunConfig};
use error::{CliError, Result};
use manifest::write_manifest;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("serializable output") + "\n",
    )?;
    Ok(path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn args_digest<T: Serialize>(args: &T) -> String {
    hex_digest(serde_json::to_string(args).expect("arguments serialize").as_bytes())
}

fn load_ae(path: &Path) -> Result<AutoencoderParams> {
    Ok(AutoencoderParams::from_json(&read_input(path)?)?)
}

fn load_model(path: &Path) -> Result<MoeModel> {
    Ok(MoeModel::from_json(&read_input(path)?)?)
}

/// Replaces 439-wide node features by autoencoder latents.
fn compress(g: &Cfg, ae: &AutoencoderParams) -> Result<Cfg> {
    if g.feature_dim() != ae.input_dim() {
        return Ok(g.clone());
    }
    Ok(g.with_features(encode_nodes(ae, g.features())?)?)
}

/// Loads the configured dataset, compressing features when an autoencoder
/// is configured.
pub fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset_path()?;
    require(path)?;
    let ds = load_dataset(path)?;
    match &cfg.paths.autoencoder {
        None => Ok(ds),
        Some(p) => {
            let ae = load_ae(p)?;
            let graphs = ds.graphs.iter().map(|g| compress(g, &ae)).collect::<Result<_>>()?;
            Ok(Dataset::new(graphs))
        }
    }
}

fn input_dim(ds: &Dataset) -> Result<usize> {
    let d = ds
        .graphs
        .first()
        .map(Cfg::feature_dim)
        .ok_or_else(|| CliError::Config("dataset is empty".into()))?;
    if let Some(g) = ds.graphs.iter().find(|g| g.feature_dim() != d) {
        return Err(CliError::Config(format!(
            "graph `{}` has {} features, expected {d}",
            g.id(),
            g.feature_dim()
        )));
    }
    Ok(d)
}

fn test_split(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_run_dataset(cfg)?;
    Ok(stratified_split(&ds, cfg.split())?.1)
}

#[derive(Debug, Serialize)]
pub struct EncodeArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub aggregation: BlockAggregation,
    /// Also write a graph file built from the block successors.
    pub graph: Option<PathBuf>,
    pub label: Label,
    pub id: Option<String>,
    pub autoencoder: Option<PathBuf>,
}

#[derive(Serialize)]
struct RowEntry<'a> {
    row: usize,
    block: &'a str,
}

/// Instruction record file to a node feature CSV, a row-to-block sidecar
/// and optionally a graph file. Self-successors are dropped because every
/// node already aggregates itself.
pub fn encode(args: &EncodeArgs) -> Result<Vec<PathBuf>> {
    let blocks = parse_blocks(&read_input(&args.input)?)?;
    let mut rows = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let enc: Vec<_> = b.instructions.iter().map(encode_instruction).collect();
        rows.push(aggregate_block(&enc, args.aggregation)?);
    }
    let out_dir = parent_dir(&args.out);
    create_dir(&out_dir)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&args.out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let sidecar = args.out.with_extension("rows.json");
    let entries: Vec<RowEntry> = blocks
        .iter()
        .enumerate()
        .map(|(row, b)| RowEntry { row, block: &b.id })
        .collect();
    let mut outputs = vec![args.out.clone(), write_json(&sidecar, &entries)?];

    if let Some(graph_path) = &args.graph {
        let index: BTreeMap<&str, usize> = blocks.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect();
        let mut edges = Vec::new();
        for (i, b) in blocks.iter().enumerate() {
            for s in &b.successors {
                let j = index[s.as_str()];
                if j != i && !edges.contains(&(i, j)) {
                    edges.push((i, j));
                }
            }
        }
        let mut features = Tensor::from_rows(&rows)?;
        if let Some(p) = &args.autoencoder {
            features = encode_nodes(&load_ae(p)?, &features)?;
        }
        let id = args.id.clone().unwrap_or_else(|| {
            args.input
                .file_stem()
                .map_or("graph".into(), |s| s.to_string_lossy().into_owned())
        });
        let g = Cfg::new(id, args.label, blocks.len(), edges, features)?;
        create_dir(&parent_dir(graph_path))?;
        save_graph(&g, graph_path)?;
        outputs.push(graph_path.clone());
    }
    write_manifest(&out_dir, "encode", None, &args_digest(args), &outputs)?;
    Ok(outputs)
}

#[derive(Debug, Serialize)]
pub struct TrainAeArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub config: AeConfig,
}

fn read_matrix(path: &Path) -> Result<Tensor> {
    require(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} has no rows", path.display())));
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Trains the autoencoder on a feature CSV; writes the parameters and a
/// `<stem>.history.csv` of per-epoch corpus MSE.
pub fn train_ae(args: &TrainAeArgs) -> Result<Vec<PathBuf>> {
    let x = read_matrix(&args.input)?;
    if x.cols() != ENCODED_WIDTH {
        return Err(CliError::Config(format!(
            "{} has {} columns, expected {ENCODED_WIDTH}",
            args.input.display(),
            x.cols()
        )));
    }
    let out = train_autoencoder(&x, AutoencoderParams::init(args.config.seed), &args.config)?;
    let out_dir = parent_dir(&args.out);
    create_dir(&out_dir)?;
    fs::write(&args.out, out.params.to_json())?;
    let history = args.out.with_extension("history.csv");
    let mut w = csv::Writer::from_path(&history)?;
    w.write_record(["epoch", "mse"])?;
    for (i, v) in out.history.iter().enumerate() {
        w.serialize((i, v))?;
    }
    w.flush()?;
    println!(
        "autoencoder: {} epochs, final mse {:.6}{}",
        out.history.len(),
        out.final_loss,
        if out.stopped_early { " (stopped early)" } else { "" }
    );
    let outputs = vec![args.out.clone(), history];
    write_manifest(
        &out_dir,
        "train-ae",
        Some(args.config.seed),
        &args_digest(args),
        &outputs,
    )?;
    Ok(outputs)
}

#[derive(Debug, Serialize)]
pub struct SynthArgs {
    pub n_per_class: usize,
    pub d: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes a synthetic dataset directory; returns the manifest path first.
pub fn synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let ds = synth_dataset(args.n_per_class, args.d, args.seed)?;
    let manifest = save_dataset(&ds, &args.out)?;
    let mut outputs = vec![manifest];
    outputs.extend(ds.graphs.iter().map(|g| args.out.join(format!("{}.json", g.id()))));
    write_manifest(&args.out, "synth", Some(args.seed), &args_digest(args), &outputs)?;
    Ok(outputs)
}

#[derive(Serialize)]
struct SplitFile {
    train: Vec<String>,
    test: Vec<String>,
}

fn ids(ds: &Dataset) -> Vec<String> {
    ds.graphs.iter().map(|g| g.id().to_string()).collect()
}

/// Trains on the training split; writes the model, `history.csv` and
/// `split.json`.
pub fn train_stage(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load_run_dataset(cfg)?;
    let (train_ds, test_ds) = stratified_split(&ds, cfg.split())?;
    let init = MoeModel::init(cfg.model_config(input_dim(&ds)?), cfg.seed)?;
    let out = train(&train_ds, init, &cfg.train_config())?;

    let dir = &cfg.paths.out_dir;
    create_dir(dir)?;
    let model_path = cfg.model_path();
    create_dir(&parent_dir(&model_path))?;
    fs::write(&model_path, out.model.to_json())?;

    let history = dir.join("history.csv");
    let mut w = csv::Writer::from_path(&history)?;
    let mut header = vec!["epoch", "loss", "ce", "lb", "train_acc"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((0..NUM_EXPERTS).map(|e| format!("gate_{}", expert_name(e))));
    w.write_record(&header)?;
    for r in &out.history {
        let mut row = vec![
            r.epoch.to_string(),
            r.loss.to_string(),
            r.ce.to_string(),
            r.lb.to_string(),
            r.train_acc.to_string(),
        ];
        row.extend(r.mean_gate.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    if let Some(last) = out.history.last() {
        println!(
            "train {}: epoch {} loss {:.4} train_acc {:.3}",
            cfg.scenario.name(),
            last.epoch,
            last.loss,
            last.train_acc
        );
    }
    let split = write_json(
        &dir.join("split.json"),
        &SplitFile {
            train: ids(&train_ds),
            test: ids(&test_ds),
        },
    )?;
    let outputs = vec![model_path, history, split];
    write_manifest(dir, "train", Some(cfg.seed), &cfg.sha256(), &outputs)?;
    Ok(outputs)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    scenario: &'a str,
    split: &'a str,
    graphs: usize,
    metrics: cfgmoe::train::MetricsReport,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    graph_id: &'a str,
    label: usize,
    predicted: usize,
    logit_benign: f64,
    logit_malicious: f64,
}

/// Test-split metrics (`metrics.json`) and per-graph predictions.
pub fn eval_stage(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(&cfg.model_path())?;
    let test = test_split(cfg)?;
    let (report, outputs) = evaluate(&model, &test)?;
    let dir = &cfg.paths.out_dir;
    create_dir(dir)?;
    println!(
        "eval {}: accuracy {:.4} on {} graphs",
        cfg.scenario.name(),
        report.accuracy,
        test.len()
    );
    let metrics = write_json(
        &dir.join("metrics.json"),
        &MetricsFile {
            scenario: cfg.scenario.name(),
            split: "test",
            graphs: test.len(),
            metrics: report,
        },
    )?;
    let preds = dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&preds)?;
    for (g, o) in test.graphs.iter().zip(&outputs) {
        w.serialize(PredictionRow {
            graph_id: g.id(),
            label: g.label().index(),
            predicted: o.predicted,
            logit_benign: o.logits[0],
            logit_malicious: o.logits[1],
        })?;
    }
    w.flush()?;
    let files = vec![metrics, preds];
    write_manifest(dir, "eval", Some(cfg.seed), &cfg.sha256(), &files)?;
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct ExplainArgs {
    pub model: PathBuf,
    pub graph: PathBuf,
    pub autoencoder: Option<PathBuf>,
    pub config: ExplainConfig,
    pub out: Option<PathBuf>,
}

/// Explains one graph; prints the JSON unless `out` is given.
pub fn explain_stage(args: &ExplainArgs) -> Result<Vec<PathBuf>> {
    let model = load_model(&args.model)?;
    require(&args.graph)?;
    let mut g = load_graph(&args.graph)?;
    if let Some(p) = &args.autoencoder {
        g = compress(&g, &load_ae(p)?)?;
    }
    let ex = explain_graph(&g, &model, &args.config)?;
    match &args.out {
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(
                stdout,
                "{}",
                serde_json::to_string_pretty(&ex).expect("explanation serializes")
            )?;
            Ok(Vec::new())
        }
        Some(path) => {
            let dir = parent_dir(path);
            create_dir(&dir)?;
            let outputs = vec![write_json(path, &ex)?];
            write_manifest(&dir, "explain", None, &args_digest(args), &outputs)?;
            Ok(outputs)
        }
    }
}

#[derive(Serialize)]
struct FidelityCsvRow<'a> {
    variant: &'a str,
    sparsity: f64,
    fid_plus: f64,
    fid_minus: f64,
    characterization: f64,
}

#[derive(Serialize)]
struct EntropySummary {
    graphs: usize,
    quartiles: cfgmoe::xai::Quartiles,
    reference: Vec<(usize, f64)>,
    /// Shannon entropy (nats) of the co-selection histogram; top-2 only.
    coselection_entropy: Option<f64>,
}

/// Explains every test graph, then writes `explanations.json`,
/// `fidelity_sweep.csv`, `entropy_ecdf.csv`, `entropy_summary.json`,
/// `gate_boxes.csv` and, for two-expert routing, `coselection.csv`.
pub fn xai_eval_stage(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(&cfg.model_path())?;
    let test = test_split(cfg)?;
    let graphs: Vec<&Cfg> = test.graphs.iter().collect();
    let explanations: Vec<Explanation> = graphs
        .iter()
        .map(|g| explain_graph(g, &model, &cfg.explain))
        .collect::<cfgmoe::Result<_>>()?;
    let dir = &cfg.paths.out_dir;
    create_dir(dir)?;
    let mut outputs = vec![write_json(&dir.join("explanations.json"), &explanations)?];

    let scores: Vec<Vec<f64>> = explanations.iter().map(|e| e.aggregated.clone()).collect();
    let rows = fidelity_sweep(&model, &graphs, &scores, &cfg.sparsity_grid)?;
    let path = dir.join("fidelity_sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(FidelityCsvRow {
            variant: cfg.scenario.name(),
            sparsity: r.sparsity,
            fid_plus: r.fid_plus,
            fid_minus: r.fid_minus,
            characterization: r.characterization,
        })?;
    }
    w.flush()?;
    outputs.push(path);

    let gates: Vec<Vec<f64>> = predict(&model, &graphs)?.into_iter().map(|o| o.gates).collect();
    let entropies: Vec<f64> = gates.iter().map(|a| router_entropy(a)).collect();
    let ecdf = entropy_ecdf(&entropies)?;
    let path = dir.join("entropy_ecdf.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["entropy", "ecdf"])?;
    for p in &ecdf.points {
        w.serialize(p)?;
    }
    w.flush()?;
    outputs.push(path);

    let two_experts = gates.iter().all(|a| a.iter().filter(|&&x| x != 0.0).count() == 2);
    let mut co_entropy = None;
    if two_experts {
        let m = coselection_matrix(&gates)?;
        co_entropy = Some(coselection_entropy(&m));
        let path = dir.join("coselection.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["top1".to_string()];
        header.extend((0..NUM_EXPERTS).map(expert_name));
        w.write_record(&header)?;
        for (e, row) in m.iter().enumerate() {
            let mut rec = vec![expert_name(e)];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        outputs.push(path);
    }

    outputs.push(write_json(
        &dir.join("entropy_summary.json"),
        &EntropySummary {
            graphs: graphs.len(),
            quartiles: ecdf.quartiles.clone(),
            reference: ecdf.reference.clone(),
            coselection_entropy: co_entropy,
        },
    )?);

    let path = dir.join("gate_boxes.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for b in gate_boxes(&gates)? {
        w.serialize(b)?;
    }
    w.flush()?;
    outputs.push(path);

    let last = rows.iter().find(|r| (r.sparsity - 0.5).abs() < 1e-9).or(rows.last());
    if let Some(r) = last {
        println!(
            "xai-eval {}: {} graphs, s={} fid+ {:.3} fid- {:.3} char {:.3}",
            cfg.scenario.name(),
            graphs.len(),
            r.sparsity,
            r.fid_plus,
            r.fid_minus,
            r.characterization
        );
    }
    write_manifest(dir, "xai-eval", Some(cfg.seed), &cfg.sha256(), &outputs)?;
    Ok(outputs)
}
