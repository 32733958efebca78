//! The `dualguide` command line: `gen`, `train`, `eval`, `analyze`.
//!
//! Every subcommand writes into an output directory and echoes the fully
//! resolved configuration there as `resolved_config.json`. Randomness comes
//! only from the seeds in that configuration.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{
    default_prune_layer, export_stats, layer_allocation, position_allocation, Format, DEFAULT_ANALYSIS_SAMPLES,
};
use crate::config::{parse_override, RunConfig};
use crate::data::{generate_dataset, read_jsonl, text_prior_accuracy, write_jsonl, GridSample, Split};
use crate::decode::{trace_records, write_trace, GenerateOptions, Strategy};
use crate::error::{Error, Result};
use crate::experiment::{attention_records, evaluate, fit_model_config, train_on};
use crate::model::{ModelParams, PruneSpec};
use crate::train::{load_checkpoint, Checkpoint};

#[derive(Parser, Debug)]
#[command(name = "dualguide", version, about = "Dual-mask attention and soft-prompt guided decoding on a toy grid task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON file of flat dotted keys, e.g. {"train.theta": 0.1}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file and before flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a toy dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        colors: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        /// train-biased (alias train) or eval-anti (alias eval).
        #[arg(long, default_value = "train-biased")]
        split: String,
    },
    /// Train a model with stochastic soft-prompt replacement.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset JSONL, or a directory holding dataset.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        attention: Option<AttentionArg>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Train on zeroed patches (text-only baseline).
        #[arg(long)]
        blind: bool,
    },
    /// Guided decoding accuracy over a dataset, one row per lambda.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Attention allocation and visual-token pruning diagnostics.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// First pruned layer; defaults to n_layers / 2.
        #[arg(long)]
        prune_layer: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        keep_ratio: f64,
        /// Generated tokens per sample for `positions`.
        #[arg(long, default_value_t = 10)]
        max_steps: usize,
        /// Samples averaged for `layers`/`positions` (default 30) or scored
        /// for `prune` (default all).
        #[arg(long)]
        n_samples: Option<usize>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// Checkpoint directory, or a training output directory holding `checkpoint/`.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// One or more guidance scales.
    #[arg(long = "lambda", num_args = 1..)]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Limit to the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Zero every patch before decoding.
    #[arg(long)]
    pub blind: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AttentionArg {
    Mda,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Layers,
    Positions,
    Prune,
}

/// Parses `args` (program name first) and runs the subcommand. Usage
/// errors come back as [`Error::Config`] carrying clap's message.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            common,
            seed,
            n,
            grid,
            colors,
            beta,
            split,
        } => cmd_gen(common, seed, n, grid, colors, beta, &split),
        Command::Train {
            common,
            data,
            attention,
            theta,
            seed,
            steps,
            blind,
        } => cmd_train(common, &data, attention, theta, seed, steps, blind),
        Command::Eval { common, decode } => cmd_eval(common, decode),
        Command::Analyze {
            common,
            decode,
            mode,
            prune_layer,
            keep_ratio,
            max_steps,
            n_samples,
        } => cmd_analyze(common, decode, mode, prune_layer, keep_ratio, max_steps, n_samples),
    }
}

fn resolve(common: &Common, flags: Vec<(&str, Option<Value>)>) -> Result<RunConfig> {
    let mut overrides = common.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn make_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(path: &Path) -> Result<Vec<GridSample>> {
    let file = if path.is_dir() { path.join("dataset.jsonl") } else { path.to_path_buf() };
    if !file.exists() {
        return Err(Error::Config(format!("dataset not found: {}", file.display())));
    }
    read_jsonl(&file)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    let nested = path.join("checkpoint");
    load_checkpoint(if nested.join("manifest.json").exists() { &nested } else { path })
}

fn cmd_gen(
    common: Common,
    seed: Option<u64>,
    n: Option<usize>,
    grid: Option<usize>,
    colors: Option<usize>,
    beta: Option<f64>,
    split: &str,
) -> Result<()> {
    let split: Split = split.parse()?;
    let n_key = match split {
        Split::TrainBiased => "data.n_train",
        Split::EvalAnti => "data.n_eval",
    };
    let cfg = resolve(
        &common,
        vec![
            ("data.seed", seed.map(Value::from)),
            (n_key, n.map(Value::from)),
            ("data.grid", grid.map(Value::from)),
            ("data.colors", colors.map(Value::from)),
            ("data.beta", beta.map(Value::from)),
        ],
    )?;
    let d = &cfg.data;
    let n = if split == Split::TrainBiased { d.n_train } else { d.n_eval };
    let samples = generate_dataset(d.seed, n, d.grid, d.colors, d.beta, split)?;
    make_out(&common.out)?;
    write_jsonl(&samples, &common.out.join("dataset.jsonl"))?;
    let rate = text_prior_accuracy(&samples)?;
    let summary = json!({
        "n": n,
        "split": split,
        "beta": d.beta,
        "bias_rate": rate,
        "text_prior_accuracy": rate,
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    cfg.echo(&common.out)?;
    println!("{summary}");
    Ok(())
}

fn cmd_train(
    common: Common,
    data: &Path,
    attention: Option<AttentionArg>,
    theta: Option<f64>,
    seed: Option<u64>,
    steps: Option<usize>,
    blind: bool,
) -> Result<()> {
    let mode = attention.map(|a| match a {
        AttentionArg::Mda => json!("mda"),
        AttentionArg::Causal => json!("causal"),
    });
    let mut cfg = resolve(
        &common,
        vec![
            ("model.attention_mode", mode),
            ("train.theta", theta.map(Value::from)),
            ("train.seed", seed.map(Value::from)),
            ("train.steps", steps.map(Value::from)),
            ("data.blind", blind.then_some(Value::Bool(true))),
        ],
    )?;
    let samples = load_data(data)?;
    cfg.model = fit_model_config(cfg.model, &samples);
    cfg.validate()?;
    make_out(&common.out)?;
    cfg.echo(&common.out)?;
    let out = train_on(&cfg.model, &cfg.train, &samples, cfg.data.blind, Some(&common.out))?;
    let last = out.metrics.last();
    let summary = json!({
        "steps": out.state.step,
        "final_loss": last.map(|m| m.loss),
        "replaced_fraction": out.state.replaced_fraction(),
        "attention_mode": cfg.model.attention_mode,
        "params": out.params.count_params(),
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

/// Decode settings from flags over the config; notes a defaulted lambda.
fn decode_config(common: &Common, args: &DecodeArgs, ck: &Checkpoint) -> Result<(RunConfig, Vec<f64>)> {
    let mut cfg = resolve(
        common,
        vec![
            ("decode.strategy", args.strategy.map(|s| json!(s))),
            ("decode.top_p", args.top_p.map(Value::from)),
            ("decode.seed", args.seed.map(Value::from)),
            ("decode.max_new_tokens", args.max_new_tokens.map(Value::from)),
            ("decode.lambda", args.lambdas.first().map(|&l| Value::from(l))),
            ("data.blind", args.blind.then_some(Value::Bool(true))),
        ],
    )?;
    cfg.model = ck.params.config.clone();
    cfg.train = ck.train_config.clone();
    cfg.validate()?;
    let lambdas = if args.lambdas.is_empty() {
        eprintln!("notice: no --lambda given; using decode.lambda = {}", cfg.decode.lambda);
        vec![cfg.decode.lambda]
    } else {
        args.lambdas.clone()
    };
    Ok((cfg, lambdas))
}

fn limited(mut samples: Vec<GridSample>, limit: Option<usize>) -> Vec<GridSample> {
    if let Some(n) = limit {
        samples.truncate(n);
    }
    samples
}

fn cmd_eval(common: Common, args: DecodeArgs) -> Result<()> {
    let ck = load_ckpt(&args.ckpt)?;
    let (cfg, lambdas) = decode_config(&common, &args, &ck)?;
    let samples = limited(load_data(&args.data)?, args.limit);
    make_out(&common.out)?;
    cfg.echo(&common.out)?;
    let results_path = common.out.join("eval_results.jsonl");
    let trace_path = common.out.join("trace.jsonl");
    let mut results = BufWriter::new(File::create(&results_path).map_err(|e| Error::io(&results_path, e))?);
    let mut trace = BufWriter::new(File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?);
    for lambda in lambdas {
        let dc = crate::decode::DecodeConfig {
            lambda,
            ..cfg.decode.clone()
        };
        let (report, gens) = evaluate(&ck.params, &samples, &dc, &GenerateOptions::default(), cfg.data.blind)?;
        for (i, g) in gens.iter().enumerate() {
            write_trace(&mut trace, &trace_records(i, lambda, g)).map_err(|e| Error::io(&trace_path, e))?;
        }
        let line = serde_json::to_string(&report).map_err(|e| Error::io(&results_path, e.into()))?;
        writeln!(results, "{line}").map_err(|e| Error::io(&results_path, e))?;
        println!("{line}");
    }
    results.flush().map_err(|e| Error::io(&results_path, e))?;
    trace.flush().map_err(|e| Error::io(&trace_path, e))
}

fn cmd_analyze(
    common: Common,
    args: DecodeArgs,
    mode: AnalyzeMode,
    prune_layer: Option<usize>,
    keep_ratio: f64,
    max_steps: usize,
    n_samples: Option<usize>,
) -> Result<()> {
    let ck = load_ckpt(&args.ckpt)?;
    let (cfg, lambdas) = decode_config(&common, &args, &ck)?;
    let samples = limited(load_data(&args.data)?, args.limit);
    make_out(&common.out)?;
    cfg.echo(&common.out)?;
    let dc = crate::decode::DecodeConfig {
        lambda: lambdas[0],
        ..cfg.decode.clone()
    };
    let params: &ModelParams = &ck.params;
    match mode {
        AnalyzeMode::Layers | AnalyzeMode::Positions => {
            let n = n_samples.unwrap_or(DEFAULT_ANALYSIS_SAMPLES).min(samples.len());
            let steps = if mode == AnalyzeMode::Layers { dc.max_new_tokens } else { max_steps };
            let records = attention_records(params, &samples[..n], &dc, steps)?;
            let (stats, name) = if mode == AnalyzeMode::Layers {
                (layer_allocation(&records)?, "layers")
            } else {
                (position_allocation(&records, max_steps)?, "positions")
            };
            export_stats(&stats, &common.out.join(format!("{name}.csv")), Format::Csv)?;
            export_stats(&stats, &common.out.join(format!("{name}.json")), Format::Json)?;
            for r in &stats.rows {
                println!("{}", serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
            }
        }
        AnalyzeMode::Prune => {
            let n = n_samples.unwrap_or(samples.len()).min(samples.len());
            let layer = prune_layer.unwrap_or_else(|| default_prune_layer(params.config.n_layers));
            let prune = GenerateOptions {
                capture_attention: false,
                prune: Some(PruneSpec { layer, keep_ratio }),
            };
            let (plain, _) = evaluate(params, &samples[..n], &dc, &GenerateOptions::default(), cfg.data.blind)?;
            let (pruned, _) = evaluate(params, &samples[..n], &dc, &prune, cfg.data.blind)?;
            let summary = json!({
                "attention_mode": params.config.attention_mode,
                "prune_layer": layer,
                "keep_ratio": keep_ratio,
                "n": n,
                "lambda": dc.lambda,
                "accuracy": pruned.accuracy,
                "unpruned_accuracy": plain.accuracy,
                "drop": plain.accuracy - pruned.accuracy,
            });
            write_json(&common.out.join("prune.json"), &summary)?;
            println!("{summary}");
        }
    }
    Ok(())
}
