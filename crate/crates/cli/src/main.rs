use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use irblock_core::eval::ablation::{run_ablation, AblationSpec};
use irblock_core::eval::{evaluate_clean, run_campaign, transfer_eval, CampaignFailure, DatasetManifest, EvalReport, RecordArtifacts};
use irblock_core::oracle::stub::{StubKind, StubSpec};
use irblock_core::oracle::wire::{serve_stream, serve_tcp};
use irblock_core::raster::composite;
use irblock_core::{Genome, GrayImage, MaskBox, RunTrace};
use serde::Serialize;

mod config;

use config::RunArgs;

/// Invalid invocation; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct PortInUse(String);

impl std::fmt::Display for PortInUse {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "address {} is already in use", self.0)
    }
}

impl std::error::Error for PortInUse {}

#[derive(Parser)]
#[command(name = "irblock", version, about = "Black-box infrared block attacks on pedestrian detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack every eligible target of a dataset.
    Attack(RunArgs),
    /// Evaluate clean images only.
    Evaluate(RunArgs),
    /// Run one campaign per block count, length and pixel value.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<f64>,
        /// Fix the pixel value of every block at each of these values.
        #[arg(long, value_delimiter = ',')]
        pixel_values: Vec<f64>,
    },
    /// Evaluate adversarial images from a previous attack against other oracles.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding `<stem>.png` adversarial images.
        #[arg(long)]
        adv_dir: PathBuf,
    },
    /// Composite a genome onto an image.
    Render {
        /// Genome document or run trace.
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// x,y,w,h; taken from the trace when omitted.
        #[arg(long)]
        mask: Option<MaskBox>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a builtin stub detector over the wire protocol.
    StubServe {
        #[arg(long, default_value = "coverage")]
        kind: StubKind,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Serve on stdin/stdout instead of TCP.
        #[arg(long)]
        stdio: bool,
        /// Target box x,y,w,h. Repeatable.
        #[arg(long)]
        target: Vec<MaskBox>,
        /// Clean image the stub compares against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
    },
}

fn write_report(dir: &Path, report: &EvalReport) -> anyhow::Result<()> {
    report.write_json(dir.join("report.json"))?;
    report.write_csv(dir.join("report.csv"))?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
    records: usize,
}

fn write_timing(dir: &Path, start: Instant, records: usize) -> anyhow::Result<()> {
    let t = Timing { wall_seconds: start.elapsed().as_secs_f64(), records };
    std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&t)?)?;
    Ok(())
}

/// Writes what a failed campaign finished, then returns its error.
fn finish(dir: &Path, start: Instant, result: Result<EvalReport, CampaignFailure>) -> anyhow::Result<EvalReport> {
    match result {
        Ok(report) => {
            write_report(dir, &report)?;
            write_timing(dir, start, report.records.len())?;
            Ok(report)
        }
        Err(f) => {
            write_report(dir, &f.partial)?;
            write_timing(dir, start, f.partial.records.len())?;
            Err(anyhow::Error::new(f.error).context(format!("campaign aborted after {} records", f.partial.records.len())))
        }
    }
}

fn summarize(report: &EvalReport) {
    let a = &report.aggregates;
    let pct = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{:.1}%", x * 100.0));
    println!(
        "records {}  detected {}  ASR {}  AP clean {}  AP {}  mean queries {:.1}",
        a.n_records,
        a.n_true_positive,
        pct(a.asr),
        pct(a.ap_clean),
        pct(a.ap),
        a.mean_queries
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn attack(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let manifest = DatasetManifest::load(cfg.manifest_path()?)?;
    let out = cfg.out_dir()?;
    let campaign = cfg.campaign()?;
    cfg.write_echo(out)?;
    let provider = cfg.provider()?;
    let traces = out.join("traces");
    let adv = out.join("adv");
    std::fs::create_dir_all(&traces)?;
    std::fs::create_dir_all(&adv)?;
    let start = Instant::now();
    let sink = |a: &RecordArtifacts<'_>| -> irblock_core::Result<()> {
        if let Some(t) = a.trace {
            std::fs::write(traces.join(format!("{}.json", a.record.stem)), t.to_json()?)?;
        }
        a.adversarial.save_png(adv.join(format!("{}.png", a.record.stem)))
    };
    let report = finish(out, start, run_campaign(&manifest, &provider, &campaign, Some(&sink)))?;
    summarize(&report);
    Ok(())
}

fn evaluate(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let manifest = DatasetManifest::load(cfg.manifest_path()?)?;
    let out = cfg.out_dir()?;
    let campaign = cfg.campaign()?;
    cfg.write_echo(out)?;
    let start = Instant::now();
    let report = finish(out, start, evaluate_clean(&manifest, &cfg.provider()?, &campaign))?;
    summarize(&report);
    Ok(())
}

fn transfer(args: &RunArgs, adv_dir: &Path) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let manifest = DatasetManifest::load(cfg.manifest_path()?)?;
    if !adv_dir.is_dir() {
        return Err(Usage(format!("{} is not a directory", adv_dir.display())).into());
    }
    let out = cfg.out_dir()?;
    let campaign = cfg.campaign()?;
    cfg.write_echo(out)?;
    let start = Instant::now();
    let report = finish(out, start, transfer_eval(adv_dir, &manifest, &cfg.provider()?, &campaign))?;
    summarize(&report);
    Ok(())
}

fn ablate(args: &RunArgs, ks: &[usize], lengths: &[f64], pixel_values: &[f64]) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let manifest = DatasetManifest::load(cfg.manifest_path()?)?;
    let out = cfg.out_dir()?;
    let campaign = cfg.campaign()?;
    cfg.write_echo(out)?;
    let mut spec = if pixel_values.is_empty() {
        AblationSpec::block_grid()
    } else {
        let mut s = AblationSpec::pixel_value_sweep(cfg.k, cfg.bounds.rel_length.lo);
        s.pixel_values = Some(pixel_values.to_vec());
        s
    };
    spec.bounds = cfg.bounds;
    if pixel_values.is_empty() {
        spec.quantization = cfg.quantization;
    }
    if !ks.is_empty() {
        spec.ks = ks.to_vec();
    }
    if !lengths.is_empty() {
        spec.lengths = lengths.to_vec();
    }
    let start = Instant::now();
    let grid = run_ablation(&manifest, &cfg.provider()?, &spec, &campaign, Some(&out.join("cells")))?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&grid)?)?;
    std::fs::write(out.join("heatmap.svg"), grid.heatmap_svg())?;
    if let Some(svg) = grid.pixel_value_svg() {
        std::fs::write(out.join("pixel_values.svg"), svg)?;
    }
    write_timing(out, start, grid.cells.len())?;
    for c in &grid.cells {
        let asr = c.aggregates.as_ref().and_then(|a| a.asr);
        match (&c.error, asr) {
            (Some(e), _) => println!("k={} L={} C={:?}: failed: {e}", c.k, c.length, c.pixel_value),
            (None, Some(v)) => println!("k={} L={} C={:?}: ASR {:.1}%", c.k, c.length, c.pixel_value, v * 100.0),
            (None, None) => println!("k={} L={} C={:?}: ASR n/a", c.k, c.length, c.pixel_value),
        }
    }
    if grid.cells.iter().all(|c| c.error.is_some()) {
        bail!("every ablation cell failed");
    }
    Ok(())
}

fn load_theta(path: &Path) -> anyhow::Result<(Genome, Option<MaskBox>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if let Ok(trace) = serde_json::from_str::<RunTrace>(&text) {
        return Ok((trace.genome()?, Some(trace.mask)));
    }
    let genome = Genome::from_json(&text).with_context(|| format!("{} is not a genome document or run trace", path.display()))?;
    Ok((genome, None))
}

fn render(theta: &Path, image: &Path, mask: Option<MaskBox>, out: &Path) -> anyhow::Result<()> {
    let (genome, trace_mask) = load_theta(theta)?;
    let Some(mask) = mask.or(trace_mask) else {
        return Err(Usage("--mask is required unless --theta is a run trace".into()).into());
    };
    let img = GrayImage::load_png(image).with_context(|| format!("cannot load {}", image.display()))?;
    mask.validate(img.width(), img.height())?;
    composite(&img, &genome, &mask).save_png(out)?;
    Ok(())
}

fn stub_serve(
    kind: StubKind,
    addr: &str,
    stdio: bool,
    targets: Vec<MaskBox>,
    reference: Option<&Path>,
    lambda: f64,
    tolerance: f64,
) -> anyhow::Result<()> {
    let reference = reference.map(GrayImage::load_png).transpose()?;
    let spec = StubSpec { kind, lambda, tolerance, ..StubSpec::default() };
    let detector = spec.build(reference, targets)?;
    if stdio {
        let stdin = io::stdin();
        serve_stream(BufReader::new(stdin.lock()), io::stdout().lock(), detector.as_ref())?;
        return Ok(());
    }
    let listener = match TcpListener::bind(addr) {
        Ok(l) => l,
        Err(e) if e.kind() == io::ErrorKind::AddrInUse => return Err(PortInUse(addr.to_owned()).into()),
        Err(e) => return Err(anyhow::Error::new(e).context(format!("cannot bind {addr}"))),
    };
    let local = listener.local_addr()?;
    println!("listening on {local}");
    io::stdout().flush()?;
    serve_tcp(listener, Arc::clone(&detector))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Attack(a) => attack(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate { run, ks, lengths, pixel_values } => ablate(run, ks, lengths, pixel_values),
        Command::Transfer { run, adv_dir } => transfer(run, adv_dir),
        Command::Render { theta, image, mask, out } => render(theta, image, *mask, out),
        Command::StubServe { kind, host, port, stdio, target, reference, lambda, tolerance } => {
            stub_serve(*kind, &format!("{host}:{port}"), *stdio, target.clone(), reference.as_deref(), *lambda, *tolerance)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else if e.downcast_ref::<PortInUse>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
