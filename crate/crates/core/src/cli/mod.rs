//! Command-line front end: `synth`, `train`, `eval`, `predict`, `encode`, `study`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::attention::spd_bias;
use crate::data::{
    load_dataset, load_flows, load_timestamps, save_dataset, save_flows, split, synthesize,
    MetricsReport, SyntheticSpec, SPLIT_RATIOS,
};
use crate::encoding::spatial_input_encoding;
use crate::error::{Error, Result};
use crate::graph::load_graph;
use crate::model::StgormerModel;
use crate::train::{evaluate, fit, format_study_csv, run_study, NoObserver, RunConfig, StudyAxis};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "stgormer", version, about = "Spatio-temporal graph transformer for traffic forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (graph.txt, flows.txt, timestamps.txt, spec.txt).
    Synth {
        /// Generator spec file of `key = value` lines.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Spec override, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model and write best.ckpt, history.jsonl, manifest.json and report.json.
    Train {
        /// Config file of `key = value` lines (keys listed below).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Config override, `key=value`; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Mask threshold: only targets strictly above it are scored.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        threshold: f64,
        /// Report path (defaults to report.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast the next T_out steps from one input window.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Window in flow-file format with T_in steps.
        #[arg(long)]
        window: PathBuf,
        /// Timestamps for the window's T_in steps.
        #[arg(long)]
        timestamps: PathBuf,
        #[arg(long, default_value = "forecast.txt")]
        out: PathBuf,
    },
    /// Dump degree, shortest-path and (with a checkpoint) learned encodings as CSV.
    Encode {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "encodings")]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per variant along a study axis and write a comparison CSV.
    Study {
        #[arg(long)]
        config: Option<PathBuf>,
        /// ablation, block_count or block_order.
        #[arg(long)]
        axis: String,
        /// Dataset directory; a default synthetic dataset is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "study.csv")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Run description written before training starts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn train_help() -> String {
    let mut s = String::from("Config keys (defaults):\n");
    for (k, v) in RunConfig::default().entries() {
        writeln!(s, "  {k} = {v}").unwrap();
    }
    s
}

fn synth_help() -> String {
    let mut s = String::from("Spec keys (defaults):\n");
    s.push_str(
        &SyntheticSpec::default()
            .to_text()
            .lines()
            .map(|l| format!("  {l}\n"))
            .collect::<String>(),
    );
    s
}

pub fn command() -> clap::Command {
    Cli::command()
        .mut_subcommand("train", |c| c.after_help(train_help()))
        .mut_subcommand("study", |c| c.after_help(train_help()))
        .mut_subcommand("synth", |c| c.after_help(synth_help()))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) | Error::Gradient(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let first = e.render().to_string();
                    let first = first.lines().next().unwrap_or("usage error");
                    let msg = first.strip_prefix("error: ").unwrap_or(first);
                    let _ = writeln!(err, "error: {msg}");
                    EXIT_USAGE
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.to_string().lines().next().unwrap_or(""));
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {msg}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth { spec, set, out: dir } => cmd_synth(spec.as_deref(), &set, &dir, out),
        Command::Train {
            config,
            data,
            out: dir,
            overrides,
        } => cmd_train(config.as_deref(), &data, &dir, &overrides, out),
        Command::Eval {
            checkpoint,
            data,
            split,
            threshold,
            out: report,
        } => cmd_eval(&checkpoint, &data, &split, threshold, report.as_deref(), out),
        Command::Predict {
            checkpoint,
            window,
            timestamps,
            out: path,
        } => cmd_predict(&checkpoint, &window, &timestamps, &path, out),
        Command::Encode {
            graph,
            out: dir,
            checkpoint,
        } => cmd_encode(&graph, &dir, checkpoint.as_deref(), out),
        Command::Study {
            config,
            axis,
            data,
            out: path,
            overrides,
        } => cmd_study(config.as_deref(), &axis, data.as_deref(), &path, &overrides, out),
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn cmd_synth(spec_path: Option<&Path>, set: &[String], dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut spec = SyntheticSpec::default();
    if let Some(p) = spec_path {
        spec.apply_text(&read_file(p)?, &p.display().to_string())?;
    }
    let mut errs = Vec::new();
    for s in set {
        let res = match s.split_once('=') {
            Some((k, v)) => spec.set(k.trim(), v),
            None => Err("expected key=value".into()),
        };
        if let Err(e) = res {
            errs.push(format!("--set {s}: {e}"));
        }
    }
    if let Err(Error::Config(e)) = spec.validate() {
        errs.extend(e);
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let ds = synthesize(&spec)?;
    save_dataset(dir, &ds)?;
    write_file(&dir.join("spec.txt"), &spec.to_text())?;
    writeln!(
        out,
        "wrote {} steps x {} nodes x {} channels to {}",
        ds.num_steps(),
        ds.num_nodes(),
        ds.channels(),
        dir.display()
    )
    .map_err(io_out)
}

/// Defaults, then the config file, then overrides; validated as a whole.
pub fn resolve_config(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    let mut errs = Vec::new();
    if let Some(p) = config {
        if let Err(Error::Config(e)) = run.apply_text(&read_file(p)?, &p.display().to_string()) {
            errs.extend(e);
        }
    }
    if let Err(Error::Config(e)) = run.apply_overrides(overrides) {
        errs.extend(e);
    }
    if let Err(Error::Config(e)) = run.validate() {
        errs.extend(e);
    }
    if errs.is_empty() {
        Ok(run)
    } else {
        Err(Error::Config(errs))
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    metrics: &'a MetricsReport,
    split: &'a str,
    manifest: Option<String>,
}

fn write_report(path: &Path, metrics: &MetricsReport, split: &str, manifest: Option<&Path>) -> Result<()> {
    let doc = ReportFile {
        metrics,
        split,
        manifest: manifest.map(|p| p.display().to_string()),
    };
    write_file(path, &(serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"))
}

fn print_metrics(out: &mut dyn Write, m: &MetricsReport) -> Result<()> {
    writeln!(out, "mae: {}", m.mae).map_err(io_out)?;
    writeln!(out, "rmse: {}", m.rmse).map_err(io_out)?;
    writeln!(out, "mape: {}%", m.mape * 100.0).map_err(io_out)?;
    writeln!(out, "count: {}", m.count).map_err(io_out)
}

pub fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    dir: &Path,
    overrides: &[String],
    out: &mut dyn Write,
) -> Result<()> {
    let run = resolve_config(config, overrides)?;
    let ds = load_dataset(data_dir)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: run.model.seed,
        config: run.entries(),
        data_dir: data_dir.to_path_buf(),
        out_dir: dir.to_path_buf(),
        started_unix: now(),
        finished_unix: None,
    };
    let manifest_path = dir.join("manifest.json");
    let dump = |m: &RunManifest| write_file(&manifest_path, &(serde_json::to_string_pretty(m).expect("manifest") + "\n"));
    dump(&manifest)?;
    write_file(&dir.join("config.txt"), &run.to_text())?;

    let (model, history, data) = fit(&run, &ds, &mut NoObserver)?;
    model.save(dir.join("best.ckpt"))?;
    history.save(dir.join("history.jsonl"))?;
    let report = evaluate(&model, &data.raw.test, run.train.threshold)?;
    write_report(&dir.join("report.json"), &report, "test", Some(&manifest_path))?;
    manifest.finished_unix = Some(now());
    dump(&manifest)?;

    writeln!(
        out,
        "trained {} epochs ({} steps); best epoch {} with validation mae {}",
        history.records.len(),
        history.total_steps,
        history.best_epoch,
        history.best_val_mae
    )
    .map_err(io_out)?;
    print_metrics(out, &report)
}

pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    which: &str,
    threshold: f64,
    report_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let model = StgormerModel::load(checkpoint)?;
    let ds = load_dataset(data_dir)?;
    if ds.num_nodes() != model.graph().num_nodes() {
        return Err(Error::Data(format!(
            "checkpoint graph has {} nodes but {} has {}",
            model.graph().num_nodes(),
            data_dir.display(),
            ds.num_nodes()
        )));
    }
    let splits = split(&ds, SPLIT_RATIOS)?;
    let part = match which {
        "train" => &splits.train,
        "val" => &splits.val,
        _ => &splits.test,
    };
    let report = evaluate(&model, part, threshold)?;
    let manifest = checkpoint.with_file_name("manifest.json");
    let path = report_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.with_file_name("report.json"));
    write_report(&path, &report, which, manifest.exists().then_some(manifest.as_path()))?;
    print_metrics(out, &report)
}

pub fn cmd_predict(
    checkpoint: &Path,
    window: &Path,
    timestamps: &Path,
    path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let model = StgormerModel::load(checkpoint)?;
    let c = model.config();
    let x = load_flows(window, Some(model.graph().num_nodes()))?;
    if x.shape()[0] != c.t_in {
        return Err(Error::Data(format!(
            "{}: window has {} steps, model expects T_in = {}",
            window.display(),
            x.shape()[0],
            c.t_in
        )));
    }
    let ts = load_timestamps(timestamps, Some(c.t_in))?;
    let k = c.temporal_features.min(2);
    let ts = crate::numerics::NdArray::new(
        &[c.t_in, k],
        ts.data().chunks_exact(2).flat_map(|r| r[..k].to_vec()).collect(),
    )?;
    let y = model.predict(&x, &ts)?;
    save_flows(path, &y)?;
    writeln!(out, "wrote forecast {:?} to {}", y.shape(), path.display()).map_err(io_out)
}

fn csv_matrix(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",") + "\n";
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn cmd_encode(graph_path: &Path, dir: &Path, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let graph = load_graph(graph_path)?;
    let n = graph.num_nodes();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (indeg, outdeg) = graph.degrees();
    let degrees = csv_matrix(
        &["in_degree".into(), "out_degree".into()],
        indeg.iter().zip(&outdeg).map(|(a, b)| vec![a.to_string(), b.to_string()]),
    );
    write_file(&dir.join("degrees.csv"), &degrees)?;
    let spd = graph.shortest_path_matrix();
    let cols: Vec<String> = (0..n).map(|j| j.to_string()).collect();
    let spd_csv = csv_matrix(
        &cols,
        spd.values().chunks(n).map(|r| r.iter().map(|v| v.to_string()).collect()),
    );
    write_file(&dir.join("spd.csv"), &spd_csv)?;
    let mut written = vec!["degrees.csv", "spd.csv"];

    if let Some(ckpt) = checkpoint {
        let model = StgormerModel::load(ckpt)?;
        if model.graph().num_nodes() != n {
            return Err(Error::Data(format!(
                "checkpoint graph has {} nodes, {} has {n}",
                model.graph().num_nodes(),
                graph_path.display()
            )));
        }
        if let Some(table) = model.sa_bias_table() {
            let values = model.store().value(table.table).data();
            let bias = spd_bias(&spd, values)?;
            let csv = csv_matrix(
                &cols,
                bias.data().chunks(n).map(|r| r.iter().map(|v| format!("{v:?}")).collect()),
            );
            write_file(&dir.join("sa_bias.csv"), &csv)?;
            written.push("sa_bias.csv");
        }
        if let Some(emb) = model.degree_embedding() {
            let s_in = spatial_input_encoding(&graph, emb, model.store())?;
            let d = emb.dim();
            let header: Vec<String> = (0..d).map(|j| format!("e{j}")).collect();
            let csv = csv_matrix(
                &header,
                s_in.data().chunks(d).map(|r| r.iter().map(|v| format!("{v:?}")).collect()),
            );
            write_file(&dir.join("s_in.csv"), &csv)?;
            written.push("s_in.csv");
        }
    }
    writeln!(out, "wrote {} to {}", written.join(", "), dir.display()).map_err(io_out)
}

pub fn cmd_study(
    config: Option<&Path>,
    axis: &str,
    data_dir: Option<&Path>,
    path: &Path,
    overrides: &[String],
    out: &mut dyn Write,
) -> Result<()> {
    let axis: StudyAxis = axis.parse()?;
    let run = resolve_config(config, overrides)?;
    let ds = match data_dir {
        Some(d) => load_dataset(d)?,
        None => synthesize(&SyntheticSpec::default())?,
    };
    let rows = run_study(&run, &ds, axis)?;
    let csv = format_study_csv(&rows);
    write_file(path, &csv)?;
    write!(out, "{csv}").map_err(io_out)
}
