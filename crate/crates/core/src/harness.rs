//! Command-line surface: argument parsing and the implementation of every
//! `stego` verb.
//!
//! Errors map to exit codes through [`StegoError::exit_code`]: 0 success,
//! 2 usage or contract error, 3 I/O error, 4 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::codec::{pretrain_reference_codec, IDENTITY_ID};
use crate::config::{PerceptualKind, RunConfig};
use crate::data::{write_procedural_dataset, Dataset};
use crate::error::{Result, StegoError};
use crate::evaluation::{evaluate, robustness, EvalOptions, RobustnessReport};
use crate::imaging::{load_image, save_image};
use crate::losses::{NoPerceptual, PerceptualMetric, ProxyPerceptual};
use crate::message::Message;
use crate::message_codec::StegoSystem;
use crate::metrics::{psnr, ssim, EvalReport};
use crate::nn::sigmoid;
use crate::trainer::{train, TrainSummary};
use crate::transforms::TransformParams;

#[derive(Debug, Parser)]
#[command(name = "stego", version, about = "Hide and recover bit messages in images through a latent codec")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model checkpoint to read, or for `pretrain-codec` the codec file to write.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override any config key, e.g. `--set alpha3=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub blur_kernel: Option<usize>,
    #[arg(long, global = true)]
    pub blur_sigma: Option<f64>,
    #[arg(long, global = true)]
    pub noise_mean: Option<f64>,
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    #[arg(long, global = true)]
    pub jpeg_quality: Option<u8>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference latent codec on an image folder.
    PretrainCodec {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the message encoder and decoder.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Hide a hex message in an image.
    Embed {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        message: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read the message hidden in an image.
    Extract {
        #[arg(long)]
        image: PathBuf,
    },
    /// Embed and recover fresh messages over a folder and write reports.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1)]
        n_messages: usize,
    },
    /// Message recovery under each image corruption.
    Robustness {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1)]
        n_messages: usize,
    },
    /// Train once per point of a parameter grid and summarize.
    Sweep {
        /// `key=v1,v2,...`; repeat for a Cartesian product.
        #[arg(long = "grid", value_name = "KEY=V1,V2", required = true)]
        grid: Vec<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write a folder of procedural test images.
    GenerateData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Height and width.
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Option<Vec<usize>>,
    },
}

/// Parses arguments, runs the verb and prints errors; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The config file (or defaults) with the global flags applied.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &global.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| StegoError::Usage(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(w) = global.workers {
        cfg.workers = w;
    }
    if let Some(v) = global.blur_kernel {
        cfg.blur_kernel = v;
    }
    if let Some(v) = global.blur_sigma {
        cfg.blur_sigma = v;
    }
    if let Some(v) = global.noise_mean {
        cfg.noise_mean = v;
    }
    if let Some(v) = global.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = global.jpeg_quality {
        cfg.jpeg_quality = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn perceptual_metric(kind: PerceptualKind) -> Result<Box<dyn PerceptualMetric>> {
    match kind {
        PerceptualKind::Proxy => Ok(Box::new(ProxyPerceptual)),
        PerceptualKind::None => Ok(Box::new(NoPerceptual)),
        PerceptualKind::External => Err(StegoError::Config(
            "perceptual = \"external\" is only available through the library".into(),
        )),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| StegoError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| StegoError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("report serializes"))
}

fn need_checkpoint(global: &GlobalArgs) -> Result<&Path> {
    global
        .checkpoint
        .as_deref()
        .ok_or_else(|| StegoError::Usage("--checkpoint is required".into()))
}

fn out_dir(global: &GlobalArgs) -> PathBuf {
    global.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

pub fn run(cli: &Cli) -> Result<()> {
    let global = &cli.global;
    let mut cfg = resolve_config(global)?;
    match &cli.command {
        Command::PretrainCodec { dataset } => {
            if let Some(d) = dataset {
                cfg.dataset_path = d.clone();
            }
            if let Some(c) = &global.checkpoint {
                cfg.codec_path = c.clone();
            }
            let (_, report) = pretrain_reference_codec(&cfg.dataset_path, &cfg)?;
            print_json(&report);
        }
        Command::Train { dataset } => {
            if let Some(d) = dataset {
                cfg.dataset_path = d.clone();
            }
            if let Some(o) = &global.out_dir {
                cfg.checkpoint_path = o.clone();
            }
            print_json(&train(&cfg)?);
        }
        Command::Embed { image, message, out } => {
            let stats = cmd_embed(need_checkpoint(global)?, image, message, out)?;
            print_json(&stats);
        }
        Command::Extract { image } => {
            print_json(&cmd_extract(need_checkpoint(global)?, image)?);
        }
        Command::Evaluate { dataset, n_messages } => {
            let report = cmd_evaluate(need_checkpoint(global)?, dataset, *n_messages, &cfg, &out_dir(global))?;
            print_json(&report.aggregate);
        }
        Command::Robustness { dataset, n_messages } => {
            let report = cmd_robustness(need_checkpoint(global)?, dataset, *n_messages, &cfg, &out_dir(global))?;
            print!("{}", report.to_csv());
        }
        Command::Sweep { grid, dataset } => {
            if let Some(d) = dataset {
                cfg.dataset_path = d.clone();
            }
            let grid = parse_grid(grid)?;
            let rows = cmd_sweep(&cfg, &grid, &out_dir(global))?;
            print!("{}", sweep_csv(&grid, &rows));
        }
        Command::GenerateData { count, out, size } => {
            let (h, w) = match size.as_deref() {
                Some([h, w]) => (*h, *w),
                _ => cfg.image_dims(),
            };
            crate::imaging::check_image_dims(h, w)?;
            write_procedural_dataset(out, *count, (h, w), cfg.seed)?;
            println!("wrote {count} images to {}", out.display());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbedStats {
    pub out: PathBuf,
    pub message: String,
    pub psnr: f64,
    pub ssim: f64,
}

fn load_system(checkpoint: &Path) -> Result<StegoSystem> {
    StegoSystem::load(checkpoint)
}

/// Parses a hex message that must encode exactly `d` bits (rounded up to
/// whole bytes).
pub fn parse_message(hex: &str, d: usize) -> Result<Message> {
    let hex = hex.trim();
    let want = Message::hex_len(d);
    if hex.len() != want {
        return Err(StegoError::Usage(format!(
            "message has {} hex digits but the checkpoint expects {d} bits ({want} hex digits)",
            hex.len()
        )));
    }
    Message::from_hex(hex, d)
}

pub fn cmd_embed(checkpoint: &Path, image: &Path, message: &str, out: &Path) -> Result<EmbedStats> {
    let system = load_system(checkpoint)?;
    let m = parse_message(message, system.d())?;
    let [h, w] = system.image_size();
    let cover = load_image(image, (h, w))?;
    let stego = system.embed_image(&cover, &m)?;
    save_image(&stego, out)?;
    let written = load_image(out, (h, w))?;
    Ok(EmbedStats {
        out: out.to_path_buf(),
        message: m.to_hex(),
        psnr: psnr(&cover, &written)?,
        ssim: ssim(&cover, &written)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtractOutput {
    pub message: String,
    pub bits: String,
    pub logits: Vec<f64>,
    /// Probability that each bit is 1.
    pub confidence: Vec<f64>,
}

pub fn cmd_extract(checkpoint: &Path, image: &Path) -> Result<ExtractOutput> {
    let system = load_system(checkpoint)?;
    let [h, w] = system.image_size();
    let img = load_image(image, (h, w))?;
    let (logits, m) = system.extract(&img)?;
    Ok(ExtractOutput {
        message: m.to_hex(),
        bits: m.to_string(),
        confidence: logits.iter().map(|&l| sigmoid(l)).collect(),
        logits,
    })
}

fn load_eval_data(dataset: &Path, system: &StegoSystem, workers: usize) -> Result<Dataset> {
    let [h, w] = system.image_size();
    let data = Dataset::load(dataset, (h, w), workers)?;
    if data.is_empty() {
        return Err(StegoError::Usage(format!("no images in {}", dataset.display())));
    }
    Ok(data)
}

/// Writes `eval_report.json`, `eval_report.csv`, `wrong_bits.csv` and
/// `wrong_bits.png` into `out`.
pub fn cmd_evaluate(checkpoint: &Path, dataset: &Path, n_messages: usize, cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    if n_messages == 0 {
        return Err(StegoError::Usage("--n-messages must be at least 1".into()));
    }
    let system = load_system(checkpoint)?;
    let data = load_eval_data(dataset, &system, cfg.workers)?;
    let metric = perceptual_metric(cfg.perceptual)?;
    let opts = EvalOptions {
        n_messages,
        seed: cfg.seed,
        quantize: true,
    };
    let report = evaluate(&system, &data, &opts, metric.as_ref())?;
    write_json(&out.join("eval_report.json"), &report)?;
    write_text(&out.join("eval_report.csv"), &report.to_csv())?;
    write_text(&out.join("wrong_bits.csv"), &report.histogram_csv())?;
    render_histogram(&report.aggregate.wrong_bit_histogram, report.d)
        .save(out.join("wrong_bits.png"))
        .map_err(|e| StegoError::Image {
            path: out.join("wrong_bits.png"),
            message: e.to_string(),
        })?;
    Ok(report)
}

/// Writes `robustness.json` and `robustness.csv` into `out`.
pub fn cmd_robustness(checkpoint: &Path, dataset: &Path, n_messages: usize, cfg: &RunConfig, out: &Path) -> Result<RobustnessReport> {
    if n_messages == 0 {
        return Err(StegoError::Usage("--n-messages must be at least 1".into()));
    }
    let system = load_system(checkpoint)?;
    let data = load_eval_data(dataset, &system, cfg.workers)?;
    let opts = EvalOptions {
        n_messages,
        seed: cfg.seed,
        quantize: true,
    };
    let report = robustness(&system, &data, &TransformParams::from(cfg), &opts)?;
    write_json(&out.join("robustness.json"), &report)?;
    write_text(&out.join("robustness.csv"), &report.to_csv())?;
    Ok(report)
}

/// Bar chart of messages per wrong-bit count, one bar per count `0..=d`.
pub fn render_histogram(hist: &BTreeMap<usize, usize>, d: usize) -> RgbImage {
    let (bar, gap, margin, plot_h) = (12u32, 4u32, 16u32, 200u32);
    let bars = d as u32 + 1;
    let width = 2 * margin + bars * (bar + gap);
    let height = plot_h + 2 * margin;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let max = hist.values().copied().max().unwrap_or(0).max(1) as f64;
    let axis = Rgb([0, 0, 0]);
    for x in margin - 2..width - margin + 2 {
        img.put_pixel(x, height - margin, axis);
    }
    for y in margin..=height - margin {
        img.put_pixel(margin - 2, y, axis);
    }
    for k in 0..bars {
        let count = hist.get(&(k as usize)).copied().unwrap_or(0) as f64;
        let h = ((count / max) * plot_h as f64).round() as u32;
        let x0 = margin + k * (bar + gap) + gap / 2;
        for x in x0..x0 + bar {
            for y in (height - margin - h)..(height - margin) {
                img.put_pixel(x, y, Rgb([60, 110, 190]));
            }
        }
    }
    img
}

/// Parses `key=v1,v2` specs, rejecting unknown config keys.
pub fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    let known = RunConfig::known_keys();
    specs
        .iter()
        .map(|s| {
            let (k, vs) = s
                .split_once('=')
                .ok_or_else(|| StegoError::Usage(format!("grid entry {s:?} is not KEY=V1,V2")))?;
            let k = k.trim().to_string();
            if !known.contains(&k) {
                return Err(StegoError::Usage(format!("unknown config key {k:?} in grid")));
            }
            let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(StegoError::Usage(format!("grid key {k:?} has no values")));
            }
            Ok((k, values))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub run: String,
    pub values: Vec<String>,
    /// Set when the grid point put `tau2` below the template's `tau1`.
    pub tau1_lowered_to: Option<f64>,
    pub summary: TrainSummary,
}

/// Every grid point in row-major order (last key varies fastest).
pub fn grid_points(grid: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    grid.iter().fold(vec![vec![]], |acc, (_, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

/// Config for one grid point. If the point sets `tau2` below `tau1` and
/// does not set `tau1` itself, `tau1` is lowered to `tau2`.
pub fn point_config(template: &RunConfig, grid: &[(String, Vec<String>)], point: &[String]) -> Result<(RunConfig, Option<f64>)> {
    let mut table: BTreeMap<&str, &str> = BTreeMap::new();
    for ((k, _), v) in grid.iter().zip(point) {
        table.insert(k.as_str(), v.as_str());
    }
    let mut cfg = template.clone();
    let mut lowered = None;
    if let (Some(t2), None) = (table.get("tau2"), table.get("tau1")) {
        let t2: f64 = t2
            .parse()
            .map_err(|_| StegoError::Config(format!("tau2 value {t2:?} is not a number")))?;
        if t2 < cfg.tau1 {
            cfg.tau1 = t2;
            lowered = Some(t2);
        }
    }
    // tau1 before tau2 so each intermediate config stays valid
    let mut keys: Vec<&str> = table.keys().copied().collect();
    keys.sort_by_key(|k| match *k {
        "tau2" if table.get("tau1").is_some_and(|v| v.parse::<f64>().is_ok_and(|t1| t1 > cfg.tau2)) => 0,
        "tau1" => 1,
        _ => 2,
    });
    for k in keys {
        cfg = cfg.with_override(k, table[k])?;
    }
    Ok((cfg, lowered))
}

/// Runs every grid point sequentially under `out/run_NNN`.
pub fn cmd_sweep(template: &RunConfig, grid: &[(String, Vec<String>)], out: &Path) -> Result<Vec<SweepRow>> {
    if template.codec_id != IDENTITY_ID && !template.codec_path.is_file() {
        return Err(StegoError::Config(format!(
            "codec checkpoint {} not found; run pretrain-codec first",
            template.codec_path.display()
        )));
    }
    let points = grid_points(grid);
    let configs = points
        .iter()
        .map(|p| point_config(template, grid, p))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, ((mut cfg, lowered), point)) in configs.into_iter().zip(points).enumerate() {
        let name = format!("run_{i:03}");
        cfg.checkpoint_path = out.join(&name);
        let summary = train(&cfg)?;
        rows.push(SweepRow {
            run: name,
            values: point,
            tau1_lowered_to: lowered,
            summary,
        });
        write_text(&out.join("summary.csv"), &sweep_csv(grid, &rows))?;
    }
    write_json(&out.join("summary.json"), &rows)?;
    Ok(rows)
}

pub fn sweep_csv(grid: &[(String, Vec<String>)], rows: &[SweepRow]) -> String {
    let opt = |v: Option<u64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from("run");
    for (k, _) in grid {
        out += &format!(",{k}");
    }
    out += ",iterations_to_tau1,iterations_to_tau2,final_ema_bit_acc,probe_bit_acc,probe_message_acc,best_probe_message_acc,tau1_lowered_to\n";
    for r in rows {
        out += &r.run;
        for v in &r.values {
            out += &format!(",{v}");
        }
        let s = &r.summary;
        out += &format!(
            ",{},{},{:.6},{:.6},{:.6},{},{}\n",
            opt(s.iterations_to_tau1),
            opt(s.iterations_to_tau2),
            s.final_ema_bit_acc,
            s.final_probe.bit_acc,
            s.final_probe.message_acc,
            s.best_probe.map_or(String::new(), |b| format!("{:.6}", b.message_acc)),
            r.tau1_lowered_to.map_or(String::new(), |t| t.to_string())
        );
    }
    out
}
