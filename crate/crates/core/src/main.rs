use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use contextcap::autodiff::OpKind;
use contextcap::config::{ConfigError, RunConfig};
use contextcap::pipeline::{evaluate, Model};
use contextcap::scene::{generate_dataset, load_scene, save_scene, Scene};
use contextcap::training::{build_vocab, run_schedule, Dataset};
use contextcap::verify;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Bad command-line input that clap cannot catch itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

#[derive(Parser)]
#[command(name = "contextcap", version, about = "Contextual 3D dense captioning on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `model.d_model=64`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(base.with_overrides(self.overrides.iter().map(String::as_str))?.with_seed_env()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_scenes: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the training schedule on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print the report JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption every candidate object of one scene.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Run the gradient, permutation, causality and oracle suites.
    Verify {
        /// Negate the backward rule of one op (e.g. `matmul`) to test the checks.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

fn log_config(cfg: &RunConfig) {
    eprintln!("resolved config:\n{}", cfg.to_json_pretty());
}

fn gen_data(cfg: &ConfigArgs, out: &Path, n_scenes: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = cfg.resolve()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    log_config(&cfg);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = Vec::with_capacity(n_scenes);
    for scene in generate_dataset(cfg.seed, n_scenes, &cfg.scene)? {
        let file = format!("{}.json", scene.scene_id);
        save_scene(&scene, &out.join(&file))?;
        entries.push(json!({ "scene_id": scene.scene_id, "file": file }));
    }
    let manifest = json!({ "seed": cfg.seed, "n_scenes": n_scenes, "scene_config": cfg.scene, "scenes": entries });
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {n_scenes} scenes to {}", out.display());
    Ok(())
}

/// Scenes listed in `dir/manifest.json`, in manifest order.
fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let entries = manifest["scenes"].as_array().ok_or_else(|| anyhow!("{}: missing \"scenes\" list", path.display()))?;
    entries
        .iter()
        .map(|e| {
            let file = e["file"].as_str().ok_or_else(|| anyhow!("{}: scene entry without \"file\"", path.display()))?;
            Ok(load_scene(&dir.join(file))?)
        })
        .collect()
}

fn train(cfg: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = cfg.resolve()?;
    log_config(&cfg);
    let scenes = load_dataset(data)?;
    if scenes.is_empty() {
        bail!("{}: no scenes", data.display());
    }
    let model_vocab = build_vocab(&scenes);
    let mut model = Model::new(&cfg, model_vocab)?;
    let dataset = Dataset::build(&model, scenes)?;
    eprintln!(
        "{} training samples from {} objects ({} below the IoU floor skipped), {} parameters",
        dataset.samples.len(),
        dataset.objects().len(),
        dataset.skipped,
        model.store.num_scalars()
    );
    run_schedule(&mut model, &dataset, Some(out), |row| {
        eprintln!("{}", serde_json::to_string(row).expect("row serializes"));
    })?;
    eprintln!("final checkpoint: {}", out.join("final.ckpt").display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let model = Model::load(ckpt)?;
    log_config(&model.config);
    let scenes = load_dataset(data)?;
    let (report, _) = evaluate(&model, &scenes)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = out {
        std::fs::write(p, text.clone() + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn caption(ckpt: &Path, scene: &Path) -> Result<()> {
    let model = Model::load(ckpt)?;
    log_config(&model.config);
    let scene = load_scene(scene)?;
    println!("{}", serde_json::to_string_pretty(&model.caption_scene(&scene)?)?);
    Ok(())
}

fn run_verify(inject_fault: Option<&str>) -> Result<bool> {
    let fault = match inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            UsageError(format!("unknown op `{name}`; expected one of {}", known.join(", ")))
        })?),
        None => None,
    };
    let summary = verify::run_all(fault);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    for s in &summary.suites {
        eprintln!("{:<16} {} ({:.1}s)", s.name, if s.passed { "pass" } else { "FAIL" }, s.seconds);
    }
    for f in summary.failures() {
        eprintln!("failed: {f}");
    }
    Ok(summary.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData { cfg, out, n_scenes, seed } => gen_data(cfg, out, *n_scenes, *seed).map(|_| true),
        Command::Train { cfg, data, out } => train(cfg, data, out).map(|_| true),
        Command::Eval { ckpt, data, out } => eval(ckpt, data, out.as_deref()).map(|_| true),
        Command::Caption { ckpt, scene } => caption(ckpt, scene).map(|_| true),
        Command::Verify { inject_fault } => run_verify(inject_fault.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.is::<UsageError>()
                || e.downcast_ref::<ConfigError>().is_some_and(|c| {
                    matches!(c, ConfigError::OverrideSyntax(_) | ConfigError::UnknownKey(_) | ConfigError::SeedEnv(_))
                });
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_DATA })
        }
    }
}
