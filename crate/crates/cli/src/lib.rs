//! Command implementations behind the `anchorref` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anchorref::ablation::{run_specs, standard_variants, AblationTable};
use anchorref::anchor::{build_bank, AnchorBank};
use anchorref::container::{BlobWriter, FrameSource, TraceReader};
use anchorref::embedder::embed_text;
use anchorref::metrics::{EvalReport, GroundTruth, SequenceEval};
use anchorref::pipeline::{
    diagnostics_jsonl, gate_jsonl, parse_trajectory_jsonl, records_to_trajectory, trajectory_jsonl, Engine,
    RunOutput,
};
use anchorref::sim::{make_suite, write_scene, ScenarioSpec, SimScene, Suite};
use anchorref::validate::validate_trace;
use anchorref::{Embedding, Error, QuerySpec, RunConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "anchorref",
    version,
    about = "Anchor-conditioned long-term referring on fixed-view traces"
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set association.theta=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Discover static anchors in the first frames of a trace.
    BuildBank(BuildBankArgs),
    /// Run the referring engine over a trace.
    Run(RunArgs),
    /// Generate a synthetic scene with ground truth.
    Simulate(SimulateArgs),
    /// Score a trajectory against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the component ablation over a simulated suite.
    Ablate(AblateArgs),
    /// Check a trace against the fixed-view contract.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    #[arg(long, value_name = "PATH")]
    pub trace: PathBuf,
    /// Output directory for `bank.json` and its blob.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Maximum number of anchors (overrides `anchor.k`).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub trace: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub bank: PathBuf,
    /// JSON query: `{"text": ..., "embedding": [...]}` or a bare array.
    #[arg(long, value_name = "PATH", conflicts_with = "query")]
    pub query_embedding: Option<PathBuf>,
    /// Raw query text, embedded with the toy hash embedder.
    #[arg(long)]
    pub query: Option<String>,
    /// Which of the trace's stored queries to use when no query is given.
    #[arg(long, default_value_t = 0)]
    pub query_index: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Write the per-frame re-entry prior as a `[T, H, W]` tensor.
    #[arg(long)]
    pub dump_prior: bool,
    /// Write per-frame gate decisions to `gate.jsonl`.
    #[arg(long)]
    pub dump_gate: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "ablation")]
    pub suite: String,
    /// Scenario spec JSON; overrides `--suite` and `--seed`.
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Trajectory JSONL written by `run`.
    #[arg(long, value_name = "PATH")]
    pub trajectory: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    /// Directory for `report.json` and `report.txt`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Comma-separated IoU thresholds for an RCR sweep.
    #[arg(long, value_delimiter = ',')]
    pub tau_sweep: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value = "ablation")]
    pub suite: String,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, value_name = "PATH")]
    pub trace: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub query_embedding: Option<PathBuf>,
}

/// A trace or input that failed validation; exits with code 2.
#[derive(Debug)]
pub struct ValidationFailed(pub String);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailed {}

/// 2 for input and validation errors, 3 for domain errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ValidationFailed>().is_some() {
        return 2;
    }
    if err.downcast_ref::<clap::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::EmptyScene | Error::EmptyBank | Error::ZeroVector | Error::EmptyMask) => 3,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::BuildBank(a) => cmd_build_bank(a, &config),
        Command::Run(a) => cmd_run(a, &config),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a, &config),
        Command::Ablate(a) => cmd_ablate(a, &config),
        Command::Validate(a) => cmd_validate(a),
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn open_trace(path: &Path) -> Result<TraceReader> {
    TraceReader::open(path).with_context(|| format!("opening trace {}", path.display()))
}

#[derive(Serialize)]
struct BankSummary {
    bank: String,
    anchors: usize,
    requested_k: usize,
    truncated: bool,
    t0: usize,
    t_star: usize,
    static_pixels: usize,
    centroids: Vec<[f32; 2]>,
}

pub fn cmd_build_bank(a: &BuildBankArgs, config: &RunConfig) -> Result<()> {
    let mut config = config.clone();
    if let Some(k) = a.k {
        config.anchor.k = k;
    }
    config.validate()?;
    let trace = open_trace(&a.trace)?;
    let bank = build_bank(&trace, &config.anchor.bank_params())?;
    create_dir(&a.out)?;
    let path = a.out.join("bank.json");
    bank.save(&path)?;
    let s = BankSummary {
        bank: path.display().to_string(),
        anchors: bank.len(),
        requested_k: bank.info.requested_k,
        truncated: bank.info.truncated,
        t0: bank.info.t0,
        t_star: bank.info.t_star,
        static_pixels: bank.info.static_pixels,
        centroids: bank.anchors.iter().map(|x| x.centroid).collect(),
    };
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&s)?),
        Format::Csv => {
            println!("anchor,row,col,area");
            for (i, x) in bank.anchors.iter().enumerate() {
                println!("{i},{},{},{}", x.centroid[0], x.centroid[1], x.mask.popcount());
            }
        }
        Format::Table => {
            println!(
                "{} anchors (K={}{}) from t0={} frames, prototypes at frame {}",
                s.anchors,
                s.requested_k,
                if s.truncated { ", fewer found" } else { "" },
                s.t0,
                s.t_star
            );
            for (i, x) in bank.anchors.iter().enumerate() {
                println!(
                    "  #{i:<3} centroid=({:.1}, {:.1}) area={}",
                    x.centroid[0],
                    x.centroid[1],
                    x.mask.popcount()
                );
            }
            println!("wrote {}", s.bank);
        }
    }
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum QueryFile {
    Full {
        text: Option<String>,
        embedding: Vec<f32>,
    },
    Bare(Vec<f32>),
}

pub fn load_query_file(path: &Path) -> Result<QuerySpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let q: QueryFile = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing query {}", path.display()))?;
    let (text, embedding) = match q {
        QueryFile::Full { text, embedding } => (text.unwrap_or_default(), embedding),
        QueryFile::Bare(e) => (String::new(), e),
    };
    let embedding = Embedding::new(embedding);
    if !embedding.is_finite() || embedding.dim() == 0 {
        return Err(Error::Invalid("query embedding must be finite and nonempty".into()).into());
    }
    Ok(QuerySpec { text, embedding })
}

fn resolve_query(a: &RunArgs, trace: &TraceReader) -> Result<QuerySpec> {
    if let Some(p) = &a.query_embedding {
        return load_query_file(p);
    }
    let dim = trace.extent().text_dim;
    if let Some(t) = &a.query {
        return Ok(QuerySpec {
            text: t.clone(),
            embedding: embed_text(t, dim)?,
        });
    }
    let mut qs = trace.queries()?;
    if a.query_index >= qs.len() {
        return Err(Error::Invalid(format!(
            "trace has {} queries; pass --query-embedding or --query",
            qs.len()
        ))
        .into());
    }
    Ok(qs.swap_remove(a.query_index))
}

#[derive(Serialize)]
struct RunSummary {
    frames: usize,
    boxes: usize,
    query: String,
    anchor_weights: Vec<f64>,
    anchor_similarities: Vec<f64>,
    map_clamped: bool,
    prior_degenerate: bool,
    config: RunConfig,
}

pub fn run_engine(a: &RunArgs, config: &RunConfig) -> Result<RunOutput> {
    let trace = open_trace(&a.trace)?;
    let bank = AnchorBank::load(&a.bank).with_context(|| format!("loading bank {}", a.bank.display()))?;
    let query = resolve_query(a, &trace)?;
    let ext = trace.extent();
    let heads = config.heads(ext.text_dim, ext.feature_dim)?;
    let engine = Engine::new(&bank, heads, &query, config)?;
    create_dir(&a.out)?;

    let (h, w) = (bank.height, bank.width);
    let mut prior_blob = if a.dump_prior {
        let file = fs::File::create(a.out.join("prior.bin"))?;
        Some((BlobWriter::new(std::io::BufWriter::new(file)), Vec::new()))
    } else {
        None
    };
    let out = engine.run_with(&trace, |state, _| {
        if let Some((bw, offsets)) = prior_blob.as_mut() {
            let v: Vec<f32> = state.prior.values().iter().map(|&p| p as f32).collect();
            offsets.push(bw.write_tensor(&[h, w], &v)?);
        }
        Ok(())
    })?;

    fs::write(a.out.join("trajectory.jsonl"), trajectory_jsonl(&out))?;
    fs::write(a.out.join("diagnostics.jsonl"), diagnostics_jsonl(&out))?;
    if a.dump_gate {
        fs::write(a.out.join("gate.jsonl"), gate_jsonl(&out))?;
    }
    if let Some((bw, offsets)) = prior_blob {
        bw.into_inner()?;
        write_json(
            &a.out.join("prior.json"),
            &serde_json::json!({
                "blob": "prior.bin",
                "height": h,
                "width": w,
                "frame_offsets": offsets,
            }),
        )?;
    }
    let map = engine.map();
    write_json(
        &a.out.join("run.json"),
        &RunSummary {
            frames: out.trajectory.len(),
            boxes: out.trajectory.iter().filter(|o| o.is_box()).count(),
            query: query.text.clone(),
            anchor_weights: map.weights.clone(),
            anchor_similarities: map.similarities.clone(),
            map_clamped: out.map_clamped,
            prior_degenerate: out.prior_degenerate,
            config: config.clone(),
        },
    )?;
    Ok(out)
}

pub fn cmd_run(a: &RunArgs, config: &RunConfig) -> Result<()> {
    let out = run_engine(a, config)?;
    let boxes = out.trajectory.iter().filter(|o| o.is_box()).count();
    println!(
        "{} frames, {} boxes; wrote {}",
        out.trajectory.len(),
        boxes,
        a.out.join("trajectory.jsonl").display()
    );
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let spec: ScenarioSpec = match &a.scenario {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(Error::from)
                .with_context(|| format!("parsing scenario {}", p.display()))?
        }
        None => {
            let suite: Suite = a.suite.parse()?;
            make_suite(suite, &[a.seed]).remove(0)
        }
    };
    let scene = SimScene::new(spec)?;
    create_dir(&a.out)?;
    let path = a.out.join("trace.json");
    let m = write_scene(&path, &scene)?;
    let gt = scene.ground_truth();
    println!(
        "{} frames, {} re-entries; wrote {} (ground truth {})",
        m.num_frames,
        gt.reentries.len(),
        path.display(),
        a.out.join("trace.gt.json").display()
    );
    Ok(())
}

pub fn evaluate_files(a: &EvaluateArgs, config: &RunConfig) -> Result<EvalReport> {
    let text =
        fs::read_to_string(&a.trajectory).with_context(|| format!("reading {}", a.trajectory.display()))?;
    let pred = records_to_trajectory(&parse_trajectory_jsonl(&text)?)?;
    let gt = GroundTruth::load(&a.gt).with_context(|| format!("loading {}", a.gt.display()))?;
    gt.validate()?;
    let sweep = (!a.tau_sweep.is_empty()).then_some(a.tau_sweep.as_slice());
    Ok(SequenceEval::new(&pred, &gt)?.report(config.metrics.tau, sweep))
}

pub fn cmd_evaluate(a: &EvaluateArgs, config: &RunConfig) -> Result<()> {
    let report = evaluate_files(a, config)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&dir.join("report.json"), &report)?;
        fs::write(dir.join("report.txt"), report.to_text())?;
    }
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Csv => println!("{}\n{}", EvalReport::csv_header(), report.csv_row()),
        Format::Table => print!("{}", report.to_text()),
    }
    Ok(())
}

pub fn ablation_table(a: &AblateArgs, config: &RunConfig) -> Result<AblationTable> {
    let suite: Suite = a.suite.parse()?;
    if a.seeds == 0 {
        return Err(Error::Invalid("--seeds must be ≥ 1".into()).into());
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let specs = make_suite(suite, &seeds);
    Ok(run_specs(suite.name(), &specs, config, &standard_variants())?)
}

pub fn render_table(t: &AblationTable, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(t)? + "\n",
        Format::Csv => t.to_csv(),
        Format::Table => t.to_text(),
    })
}

pub fn cmd_ablate(a: &AblateArgs, config: &RunConfig) -> Result<()> {
    let t = ablation_table(a, config)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&dir.join("ablation.json"), &t)?;
        fs::write(dir.join("ablation.csv"), t.to_csv())?;
    }
    print!("{}", render_table(&t, a.format)?);
    Ok(())
}

pub fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let trace = open_trace(&a.trace)?;
    let query = match &a.query_embedding {
        Some(p) => load_query_file(p)?,
        None => match trace.queries()?.into_iter().next() {
            Some(q) => q,
            None => bail!(ValidationFailed(
                "trace has no query; pass --query-embedding".into()
            )),
        },
    };
    let report = validate_trace(&trace, &query)?;
    for v in &report.violations {
        println!("{v}");
    }
    if !report.is_ok() {
        bail!(ValidationFailed(format!(
            "{} violation(s) in {} frames",
            report.violations.len(),
            report.frames_checked
        )));
    }
    println!("ok: {} frames", report.frames_checked);
    Ok(())
}
