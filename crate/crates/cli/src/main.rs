use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lens_core::interchange::{
    apply_seed_override, export_pgm, format_keypoints, load_export, metrics_csv, read_tensor,
};
use lens_core::numerics::minmax_normalize;
use lens_core::objectives::{ciou, giou};
use lens_core::router::{parse_script, route_intent, run_script, triptych, SessionMemory, StubAgent};
use lens_core::synthetic::{SyntheticTask, IDENTITIES};
use lens_core::trainer::{
    fd_gradient_check, fit_synthetic_with, load_checkpoint, save_checkpoint, step_sweep, GradCheckOptions,
};
use lens_core::{LensModel, RunConfig, Tensor};

#[derive(Parser)]
#[command(name = "lens", version, about = "Keypoint-prompted segmentation from attention maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelSource {
    /// JSON run configuration; defaults to the blob task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on synthetic data or exported features.
    Infer {
        #[arg(long, conflicts_with = "features")]
        synthetic: bool,
        /// Export directory (or manifest file) from the feature extractor.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelSource,
    },
    /// Train on the synthetic blob task.
    Train {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 0.1)]
        subset: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Also report the error at steps 1e-3, 1e-4 and 1e-5.
        #[arg(long)]
        sweep: bool,
    },
    /// gIoU/cIoU over `<name>_pred.ltns` / `<name>_gt.ltns` pairs.
    Eval {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Classify an instruction, or play a scripted session.
    Route {
        #[arg(required_unless_present = "script")]
        text: Option<String>,
        #[arg(long)]
        has_memory: bool,
        /// One instruction per line.
        #[arg(long, conflicts_with = "text")]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Where to write segmentation triptychs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => RunConfig::blob_task(),
    };
    apply_seed_override(&mut cfg)?;
    Ok(cfg)
}

fn load_model(src: &ModelSource, seed: Option<u64>) -> Result<LensModel> {
    if let Some(dir) = &src.checkpoint {
        return load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()));
    }
    let mut cfg = base_config(src.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(LensModel::new(cfg)?)
}

fn write_outputs(out: &Path, model: &LensModel, input: &lens_core::seg_head::HeadInput, image: &lens_core::decoder::ImageEmbedding) -> Result<()> {
    let result = model.infer(input, image)?;
    fs::create_dir_all(out)?;
    export_pgm(&result.mask.binary(), &out.join("mask.pgm"))?;
    export_pgm(&minmax_normalize(&result.grounding), &out.join("grounding.pgm"))?;
    fs::write(out.join("keypoints.txt"), format_keypoints(&result.keypoints))?;
    println!("keypoints={} mask={}", result.keypoints.len(), out.join("mask.pgm").display());
    Ok(())
}

fn infer(synthetic: bool, features: Option<&Path>, seed: Option<u64>, out: &Path, src: &ModelSource) -> Result<()> {
    match (synthetic, features) {
        (true, _) => {
            let model = load_model(src, seed)?;
            let seed = seed.unwrap_or(model.config.seed);
            let task = SyntheticTask::new(&model.config, seed);
            let s = task.sample(&mut ChaCha8Rng::seed_from_u64(seed)).sample;
            write_outputs(out, &model, &s.input, &s.image)
        }
        (false, Some(dir)) => {
            let export = load_export(dir)?;
            let Some(embedding) = export.embedding.as_ref() else {
                bail!("export has no image embedding");
            };
            let model = match &src.checkpoint {
                Some(_) => load_model(src, seed)?,
                None => {
                    let mut cfg = base_config(src.config.as_deref())?;
                    cfg.grid = export.input.grid;
                    cfg.model_dim = export.manifest.d;
                    cfg.prompt_dim = embedding.dim();
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    LensModel::new(cfg)?
                }
            };
            write_outputs(out, &model, &export.input, embedding)
        }
        (false, None) => bail!("pass --synthetic or --features <dir>"),
    }
}

fn train(steps: usize, seed: Option<u64>, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut cfg = base_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = fit_synthetic_with(&cfg, steps, &mut |r| {
        if (r.step + 1) % 100 == 0 {
            eprintln!("step {} loss {:.4}", r.step + 1, r.loss.total);
        }
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&report.records))?;
    save_checkpoint(&report.model, &out.join("checkpoint"))?;
    println!(
        "steps={steps} best_loss={:.6} gIoU={:.4} cIoU={:.4} initial_gIoU={:.4} elapsed={:.1}s",
        report.best_loss,
        report.final_metrics.giou,
        report.final_metrics.ciou,
        report.initial.giou,
        report.elapsed.as_secs_f64()
    );
    Ok(())
}

fn gradcheck(seed: u64, grid: usize, subset: f64, threshold: f64, sweep: bool) -> Result<bool> {
    let cfg = RunConfig {
        grid: (grid, grid),
        seed,
        ..RunConfig::toy()
    };
    let model = LensModel::new(cfg.clone())?;
    let sample = SyntheticTask::new(&cfg, seed).batch(seed, 1).remove(0);
    let opts = GradCheckOptions { subset, seed, ..GradCheckOptions::default() };
    let report = fd_gradient_check(&model, &sample, opts, threshold)?;
    println!("checked={} max_relative_error={:e}", report.checked, report.max_relative_error);
    for name in report.offending_names() {
        println!("offending {name}");
    }
    if sweep {
        for (step, err) in step_sweep(&model, &sample, &[1e-3, 1e-4, 1e-5], seed)? {
            println!("step={step:e} max_relative_error={err:e}");
        }
    }
    Ok(report.passed())
}

fn eval(dir: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_pred.ltns")).map(str::to_string))
        .collect();
    names.sort();
    let mut pairs = Vec::new();
    for n in names {
        let gt_path = dir.join(format!("{n}_gt.ltns"));
        if !gt_path.exists() {
            bail!("{n}_pred.ltns has no matching {n}_gt.ltns");
        }
        pairs.push((read_tensor(&dir.join(format!("{n}_pred.ltns")))?, read_tensor(&gt_path)?));
    }
    if pairs.is_empty() {
        bail!("no *_pred.ltns files in {}", dir.display());
    }
    println!("gIoU={:?} cIoU={:?}", giou(&pairs)?, ciou(&pairs)?);
    Ok(())
}

fn route(text: Option<&str>, has_memory: bool, script: Option<&Path>, seed: u64, out: Option<&Path>) -> Result<()> {
    if let Some(t) = text {
        println!("{}", route_intent(t, has_memory));
        return Ok(());
    }
    let path = script.expect("clap requires text or script");
    let lines = parse_script(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?);
    let cfg = RunConfig { seed, ..RunConfig::toy() };
    let model = LensModel::new(cfg.clone())?;
    let sample = SyntheticTask::new(&cfg, seed).sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut agent = StubAgent::new(cfg, IDENTITIES, seed);
    let mut memory = SessionMemory::default();
    let turns = run_script(&mut agent, &model, &mut memory, &lines, Some(&sample.image))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    for (i, (line, turn)) in lines.iter().zip(&turns).enumerate() {
        println!("{}\t{}\t{}\t{}", turn.intent, turn.depth, line, turn.reply);
        if let (Some(dir), Some(mask)) = (out, &turn.mask) {
            let strip: Tensor = triptych(&sample.image, mask)?;
            export_pgm(&strip, &dir.join(format!("turn{i}.pgm")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Infer { synthetic, features, seed, out, model } => {
            infer(*synthetic, features.as_deref(), *seed, out, model).map(|_| true)
        }
        Command::Train { steps, seed, out, config } => train(*steps, *seed, out, config.as_deref()).map(|_| true),
        Command::Gradcheck { seed, grid, subset, threshold, sweep } => {
            gradcheck(*seed, *grid, *subset, *threshold, *sweep)
        }
        Command::Eval { dir } => eval(dir).map(|_| true),
        Command::Route { text, has_memory, script, seed, out } => {
            route(text.as_deref(), *has_memory, script.as_deref(), *seed, out.as_deref()).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
