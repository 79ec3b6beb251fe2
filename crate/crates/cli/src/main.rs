use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Args, Parser, Subcommand};
use visconet::eval::{run_eval, SuiteConfig};
use visconet::scenegen::{build_dataset, Dataset, DatasetConfig};
use visconet::trainer::{train, Checkpoint, TrainConfig};
use visconet_cli::request::{generate, GenerateRequest, ImageRef, RequestError, ScalesSpec, StyleRefs};
use visconet_cli::service::{serve, ServeConfig};

#[derive(Parser)]
#[command(name = "visconet", version, about = "Visually conditioned figure generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural dataset tools.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train from a TOML config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an evaluation suite and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Suite TOML; defaults apply when omitted.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Generate one image.
    Sample(Box<SampleArgs>),
    /// Run the HTTP service.
    Serve {
        /// Service TOML with bind, queue_depth, checkpoint and dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the checkpoint from the config file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the dataset from the config file.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

/// Flags mirror the fields of a `/v1/generate` request and override the
/// ones read from `--request`.
#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset that sample ids refer to.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// JSON request, as sent to `/v1/generate`.
    #[arg(long)]
    request: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    negative_prompt: Option<String>,
    #[arg(long)]
    guidance: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "pose_png")]
    pose_sample: Option<usize>,
    #[arg(long)]
    pose_png: Option<PathBuf>,
    #[arg(long)]
    style_sample: Option<usize>,
    /// `category=file.png`; an empty file name unsets the category.
    #[arg(long = "style", value_name = "CATEGORY=PNG")]
    styles: Vec<String>,
    #[arg(long, conflicts_with = "mask_png")]
    mask_sample: Option<usize>,
    #[arg(long)]
    mask_png: Option<PathBuf>,
    /// Preset name or 13 comma-separated values.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long, default_value = "sample.png")]
    out: PathBuf,
    /// Also write the response metadata as JSON.
    #[arg(long)]
    metadata: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a dataset directory.
    Build(BuildArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// No held-out color/background combinations.
    #[arg(long, conflicts_with = "config")]
    unrestricted: bool,
    /// TOML file of sampling ranges and holdout rules; unset keys keep
    /// their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn png_b64(path: &Path) -> Result<String> {
    Ok(B64.encode(fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn sample_request(a: &SampleArgs) -> Result<GenerateRequest> {
    let mut req = match &a.request {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| RequestError::Invalid {
                fields: vec![visconet_cli::request::FieldError { field: "request".into(), message: e.to_string() }],
            })?
        }
        None => GenerateRequest::new(""),
    };
    if let Some(v) = &a.prompt {
        req.prompt = v.clone();
    }
    if let Some(v) = &a.negative_prompt {
        req.negative_prompt = v.clone();
    }
    if let Some(v) = a.guidance {
        req.guidance = v;
    }
    if let Some(v) = a.steps {
        req.steps = v;
    }
    if let Some(v) = a.seed {
        req.seed = v;
    }
    if let Some(id) = a.pose_sample {
        req.pose = Some(ImageRef { sample: Some(id), png: None });
    }
    if let Some(p) = &a.pose_png {
        req.pose = Some(ImageRef { sample: None, png: Some(png_b64(p)?) });
    }
    if let Some(id) = a.mask_sample {
        req.mask = Some(ImageRef { sample: Some(id), png: None });
    }
    if let Some(p) = &a.mask_png {
        req.mask = Some(ImageRef { sample: None, png: Some(png_b64(p)?) });
    }
    if a.style_sample.is_some() || !a.styles.is_empty() {
        let refs = req.style_refs.get_or_insert_with(StyleRefs::default);
        if a.style_sample.is_some() {
            refs.sample = a.style_sample;
        }
        for s in &a.styles {
            let Some((cat, file)) = s.split_once('=') else {
                return Err(RequestError::Invalid {
                    fields: vec![visconet_cli::request::FieldError {
                        field: "style".into(),
                        message: format!("expected CATEGORY=PNG, got {s}"),
                    }],
                }
                .into());
            };
            let data = if file.is_empty() { String::new() } else { png_b64(Path::new(file))? };
            refs.images.insert(cat.to_string(), data);
        }
    }
    if let Some(v) = &a.scales {
        req.scales = if v.contains(',') {
            let values: Result<Vec<f32>, _> = v.split(',').map(|x| x.trim().parse::<f32>()).collect();
            ScalesSpec::Values(values.map_err(|e| RequestError::Invalid {
                fields: vec![visconet_cli::request::FieldError { field: "scales".into(), message: e.to_string() }],
            })?)
        } else {
            ScalesSpec::Preset(v.clone())
        };
    }
    Ok(req)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => {
            let cfg = match &a.config {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None if a.unrestricted => DatasetConfig::unrestricted(),
                None => DatasetConfig::default(),
            };
            let m = build_dataset(a.n, &cfg, a.seed, &a.out)?;
            println!("wrote {} samples to {}", m.count, a.out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let (ck, records) = train(&cfg).with_context(|| format!("training from {}", config.display()))?;
            let last = records.iter().rev().find(|r| r.kind == "step");
            println!(
                "finished at step {}, last loss {}, checkpoint {}",
                ck.header.step,
                last.map_or(f64::NAN, |r| r.loss),
                cfg.out_dir.join("checkpoint.bin").display()
            );
        }
        Command::Eval { checkpoint, suite, out } => {
            let suite = match suite {
                Some(p) => SuiteConfig::load(&p)?,
                None => SuiteConfig::default(),
            };
            let report = run_eval(&checkpoint, &suite).with_context(|| format!("evaluating {}", checkpoint.display()))?;
            report.save(&out)?;
            for r in &report.rows {
                println!("{:<28} {:<12} {:<40} {:.4} (n={})", r.metric, r.arm, r.condition, r.value, r.count);
            }
            println!("report written to {}", out.display());
        }
        Command::Sample(a) => {
            let req = sample_request(&a)?;
            let model = Checkpoint::load(&a.checkpoint)?.model()?;
            let dataset = a.dataset.as_deref().map(Dataset::load).transpose()?;
            let resp = generate("cli".into(), &req, &model, dataset.as_ref(), None)?;
            let png = B64.decode(&resp.image).context("decoding generated image")?;
            fs::write(&a.out, png).with_context(|| format!("writing {}", a.out.display()))?;
            if let Some(m) = &a.metadata {
                let text = serde_json::to_string_pretty(&resp.metadata)?;
                fs::write(m, text + "\n").with_context(|| format!("writing {}", m.display()))?;
            }
            println!("wrote {}", a.out.display());
        }
        Command::Serve { config, checkpoint, dataset } => {
            let mut cfg = match config {
                Some(p) => ServeConfig::load(&p)?,
                None => ServeConfig::default(),
            };
            if let Some(c) = checkpoint {
                cfg.checkpoint = c;
            }
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            tokio::runtime::Runtime::new()?.block_on(serve(cfg))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<visconet::Error>(),
                    Some(visconet::Error::Validation { .. } | visconet::Error::OutOfVocabulary(_))
                ) || matches!(
                    c.downcast_ref::<RequestError>(),
                    Some(RequestError::Invalid { .. } | RequestError::OutOfVocabulary(_))
                )
            });
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
