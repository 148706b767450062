use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mgres::engine::{self, BackendClients, MockClients, PipelineOptions, SubprocessClients};
use mgres::gradsuite;
use mgres::metrics::{render_table, MetricReport};
use mgres::synth::{generate_dataset, load_refcoco_style, synth_vocabulary, to_annotation_line, GroundingSample, Mix};
use mgres::train::{evaluate, load_checkpoint, read_records, EvalOutputs, EvalSummary, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "mgres", version, about = "Multi-granularity referring segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a key=value config; writes loss.jsonl and checkpoints to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop at this step instead of the configured total.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Annotation JSONL, or `synthetic:SEED:N`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Write a synthetic dataset as annotation JSONL.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "0.4,0.2,0.3,0.1")]
        mix: Mix,
        #[arg(long)]
        out: PathBuf,
        /// Also write each scene as PNG plus JSON geometry (input for engine-run).
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Run the data engine over a directory of images.
    EngineRun {
        #[arg(long)]
        images: PathBuf,
        /// `mock`, `mock:SEED`, or `cmd:PROGRAM [ARGS...]`.
        #[arg(long, default_value = "mock")]
        backends: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        /// Continue after the last committed image.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        no_full_image: bool,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Render metric reports or record files.
    Report {
        #[arg(long = "from", required = true)]
        from: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Line-delimited JSON backend server over stdio, backed by the mocks.
    #[command(hide = true)]
    MockBackend {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

fn load_data(source: &str) -> Result<Vec<GroundingSample>> {
    if let Some(rest) = source.strip_prefix("synthetic:") {
        let (seed, n) = rest.split_once(':').context("expected synthetic:SEED:N")?;
        return Ok(generate_dataset(seed.parse()?, n.parse()?, Mix::default())?);
    }
    Ok(load_refcoco_style(Path::new(source), &synth_vocabulary())?)
}

fn train(config: Option<PathBuf>, out: PathBuf, overrides: Vec<String>, resume: Option<PathBuf>, until: Option<usize>) -> Result<()> {
    let mut trainer = match resume {
        Some(ckpt) => {
            let c = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = c.cfg.dataset()?;
            Trainer::from_parts(c.cfg, c.model, c.opt, c.header.step, data)
        }
        None => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not key=value"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let data = cfg.dataset()?;
            Trainer::new(cfg, data)?
        }
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.txt"), trainer.cfg.to_text())?;
    let history = trainer.run(until, Some(&out))?;
    if let Some(last) = history.last() {
        println!("step {} loss {:.4} (lm {:.4}, bce {:.4}, dice {:.4})", last.step, last.total, last.l_lm, last.l_bce, last.l_dice);
    }
    println!("checkpoint: {}", out.join("final.ckpt").display());
    Ok(())
}

fn eval(ckpt: PathBuf, data: String, report: PathBuf, records: Option<PathBuf>, overlays: Option<PathBuf>) -> Result<()> {
    let c = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let samples = load_data(&data)?;
    let outputs = EvalOutputs { report: Some(report), records, overlay_dir: overlays };
    let (summary, _) = evaluate(&c.model, &samples, &outputs)?;
    print!("{}", render_table(&[("eval".to_string(), summary.report)]));
    println!("granularity accuracy: {:.1}%", 100.0 * summary.granularity_accuracy);
    Ok(())
}

fn gen_data(seed: u64, n: usize, mix: Mix, out: PathBuf, scenes: Option<PathBuf>) -> Result<()> {
    let data = generate_dataset(seed, n, mix)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
    for s in &data {
        writeln!(w, "{}", to_annotation_line(s)?)?;
    }
    w.flush()?;
    if let Some(dir) = scenes {
        std::fs::create_dir_all(&dir)?;
        for s in &data {
            let scene = s.scene.as_ref().context("synthetic samples carry their scene")?;
            std::fs::write(dir.join(format!("{}.png", s.id)), s.image.to_png_bytes()?)?;
            std::fs::write(dir.join(format!("{}.json", s.id)), serde_json::to_string(scene)?)?;
        }
    }
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn engine_run(images: PathBuf, backends: String, out: PathBuf, workers: usize, resume: bool, no_full_image: bool) -> Result<()> {
    let source = engine::load_image_dir(&images)?;
    let resume_after = if resume {
        let tok = engine::read_resume_token(&out)?.context("no resume token next to the output file")?;
        Some(tok.last_image_id)
    } else {
        None
    };
    let opts = PipelineOptions { workers, include_full_image: !no_full_image, resume_after, stop_after: None };
    let summary = if let Some(cmd) = backends.strip_prefix("cmd:") {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next().context("empty backend command")?;
        let args: Vec<String> = parts.collect();
        engine::run_pipeline(&source, || Ok(Box::new(SubprocessClients::spawn(&program, &args)?) as Box<dyn BackendClients>), &out, &opts)?
    } else {
        let seed = match backends.as_str() {
            "mock" => 0,
            s => s.strip_prefix("mock:").context("backends must be mock, mock:SEED or cmd:PROGRAM")?.parse()?,
        };
        engine::run_pipeline(&source, || Ok(Box::new(MockClients::new(seed)) as Box<dyn BackendClients>), &out, &opts)?
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn grad_check(module: Option<String>, seeds: u64) -> Result<()> {
    let cases = gradsuite::run_all(module.as_deref(), 0..seeds)?;
    let mut failed = 0;
    for c in &cases {
        let name = if c.case.is_empty() { c.module.clone() } else { format!("{}/{}", c.module, c.case) };
        let status = if c.passes() { "ok" } else { "FAIL" };
        println!("{name:<24} seed {:<3} max rel err {:.2e}  {status}", c.seed, c.report.max_rel_error);
        failed += usize::from(!c.passes());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", cases.len());
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<MetricReport> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let records: Vec<_> = read_records(path)?.into_iter().map(|l| l.record).collect();
        return Ok(MetricReport::from_records(&records)?);
    }
    let text = std::fs::read_to_string(path)?;
    if let Ok(s) = serde_json::from_str::<EvalSummary>(&text) {
        return Ok(s.report);
    }
    serde_json::from_str(&text).with_context(|| format!("{} is neither a report nor a record file", path.display()))
}

fn report(from: Vec<PathBuf>, format: Format) -> Result<()> {
    let mut splits = Vec::new();
    for p in &from {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("split").to_string();
        splits.push((name, read_report(p)?));
    }
    match format {
        Format::Table => print!("{}", render_table(&splits)),
        Format::Json => {
            let map: BTreeMap<_, _> = splits.into_iter().collect();
            println!("{}", serde_json::to_string_pretty(&map)?);
        }
    }
    Ok(())
}

fn mock_backend(images: PathBuf, seed: u64) -> Result<()> {
    let map: BTreeMap<String, _> = engine::load_image_dir(&images)?.into_iter().map(|i| (i.id.clone(), i)).collect();
    let mut clients = MockClients::new(seed);
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<engine::BackendRequest>(&line) {
            Ok(req) => engine::serve_request(&mut clients, &map, &req),
            Err(e) => engine::BackendResponse { ok: false, payload: None, error: Some(format!("bad request: {e}")) },
        };
        writeln!(stdout, "{}", serde_json::to_string(&resp)?)?;
        stdout.flush()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Train { config, out, overrides, resume, until } => train(config, out, overrides, resume, until),
        Cmd::Eval { ckpt, data, report: r, records, overlays } => eval(ckpt, data, r, records, overlays),
        Cmd::GenData { seed, n, mix, out, scenes } => gen_data(seed, n, mix, out, scenes),
        Cmd::EngineRun { images, backends, out, workers, resume, no_full_image } => {
            engine_run(images, backends, out, workers, resume, no_full_image)
        }
        Cmd::GradCheck { module, seeds } => grad_check(module, seeds),
        Cmd::Report { from, format } => report(from, format),
        Cmd::MockBackend { images, seed } => mock_backend(images, seed),
    }
}
