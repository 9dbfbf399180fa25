//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use sarcloud::cloudsim::synthesize_clouds;
use sarcloud::dataio::{export_grid, latest_checkpoint, load_dataset, load_image, save_image, synthetic_pairs, write_dataset, SamplePair, Split};
use sarcloud::evaluation::{evaluate, fmt_metric};
use sarcloud::training::{ablate, load_model, save_reference_checkpoint, train_cloud_removal, train_sar2opt, TrainOutcome, CLOUDY_KIND, ORACLE_KIND};
use sarcloud::{exec, Error, Result, Tensor};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Cli, Command, ReferenceKind, StageArg};

pub const SNAPSHOT_FILE: &str = "config.json";

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.sequential {
        exec::set_sequential(true);
    }
    if let Some(n) = g.threads {
        exec::set_threads(n)?;
    }
    match cli.command {
        Command::Fixture { pairs, size, seed, out } => fixture(pairs, size, seed, &out),
        Command::Reference { kind, out } => {
            let kind = match kind {
                ReferenceKind::Oracle => ORACLE_KIND,
                ReferenceKind::Cloudy => CLOUDY_KIND,
            };
            let dir = save_reference_checkpoint(&out, kind)?;
            println!("wrote {kind} checkpoint {}", dir.display());
            Ok(())
        }
        command => {
            let cfg = RunConfig::resolve(g.config.as_deref(), &g.sets)?;
            match command {
                Command::Synth => synth(&cfg),
                Command::Train {
                    stage,
                    resume,
                    overwrite,
                    sar2opt_ckpt,
                    no_sar2opt,
                    out,
                } => {
                    let mut cfg = cfg;
                    if sar2opt_ckpt.is_some() {
                        cfg.train.sar2opt_checkpoint = sar2opt_ckpt;
                    }
                    if no_sar2opt {
                        cfg.train.use_sar2opt_stage = false;
                    }
                    train(&cfg, stage, resume, overwrite, out)
                }
                Command::Eval { ckpt, grid, out } => eval(&cfg, &ckpt, grid, out),
                Command::Ablate { out } => ablate_cmd(&cfg, out),
                Command::Infer { ckpt, sar, cloudy, output } => infer(&ckpt, &sar, cloudy.as_deref(), &output),
                Command::Grid { ckpt, limit, output } => grid(&cfg, &ckpt, limit, output),
                Command::ShowConfig => {
                    println!("{}", to_json(&cfg)?);
                    Ok(())
                }
                Command::Fixture { .. } | Command::Reference { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn to_json(v: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// The resolved configuration plus command arguments, written next to the
/// outputs of every run.
fn snapshot(dir: &Path, command: &str, args: Value, cfg: &RunConfig) -> Result<()> {
    let doc = json!({ "command": command, "args": args, "config": cfg });
    write_file(&dir.join(SNAPSHOT_FILE), &(to_json(&doc)? + "\n"))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn fixture(pairs: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    if pairs == 0 || size == 0 || !size.is_multiple_of(8) {
        return Err(Error::Config(format!(
            "fixture needs at least one pair and a size divisible by 8, got {pairs} x {size}"
        )));
    }
    write_dataset(out, &synthetic_pairs(pairs, size, seed))?;
    println!("wrote {pairs} pairs of {size}x{size} to {}", out.display());
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let root = cfg.data_root();
    let source = cfg.data.source.as_deref().unwrap_or(root);
    let mut samples = load_dataset(source, cfg.data.split_seed, Split::All)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no SAR/optical pairs in {}", source.display())));
    }
    for s in &mut samples {
        s.cloudy = None;
        s.mask = None;
    }
    let coverage = synthesize_clouds(&mut samples, &cfg.synth)?;
    write_dataset(root, &samples)?;
    snapshot(root, "synth", json!({}), cfg)?;
    println!("wrote {} cloudy samples to {}", samples.len(), root.display());
    println!("coverage at tau {}:", cfg.synth.mask.tau);
    let mut bins = [0usize; 10];
    for c in &coverage {
        bins[((c * 10.0) as usize).min(9)] += 1;
    }
    for (i, n) in bins.iter().enumerate() {
        println!("  {:.1}-{:.1} {:>4} {}", i as f64 / 10.0, (i + 1) as f64 / 10.0, n, "#".repeat(*n));
    }
    Ok(())
}

fn summarize(stage: &str, out: &TrainOutcome) {
    let log = &out.log;
    let (head, tail) = match (log.head_l1_cloudy(10), log.tail_l1_cloudy(10)) {
        (Some(h), Some(t)) => (Some(h), Some(t)),
        _ => (log.head_l1(10), log.tail_l1(10)),
    };
    println!(
        "trained {stage}: {} steps, L1 {} -> {}, checkpoint {}",
        out.state.step,
        fmt_metric(head),
        fmt_metric(tail),
        out.checkpoint.display()
    );
}

fn train(cfg: &RunConfig, stage: StageArg, resume: bool, overwrite: bool, out: Option<PathBuf>) -> Result<()> {
    let name = match stage {
        StageArg::Sar2opt => "sar2opt",
        StageArg::Cloud => "cloud",
    };
    let dir = out.unwrap_or_else(|| cfg.output_dir().join(format!("train-{name}")));
    if !resume && latest_checkpoint(&dir)?.is_some() {
        if !overwrite {
            return Err(Error::Config(format!(
                "{} already holds checkpoints; pass --resume to continue or --overwrite to start over",
                dir.display()
            )));
        }
        for entry in fs::read_dir(&dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))? {
            let path = entry.map_err(|e| Error::Data(e.to_string()))?.path();
            let is_ckpt = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt-"));
            if is_ckpt && path.is_dir() {
                fs::remove_dir_all(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            }
        }
    }
    let samples = load_dataset(cfg.data_root(), cfg.data.split_seed, cfg.data.train_split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no training samples in {}", cfg.data_root().display())));
    }
    let args = json!({ "stage": name, "resume": resume, "out": path_str(&dir) });
    snapshot(&dir, "train", args, cfg)?;
    let outcome = match stage {
        StageArg::Sar2opt => train_sar2opt(&cfg.train, &cfg.model, &samples, &dir, resume)?,
        StageArg::Cloud => train_cloud_removal(&cfg.train, &cfg.model, &samples, &dir, resume)?,
    };
    summarize(name, &outcome);
    Ok(())
}

fn eval_samples(cfg: &RunConfig) -> Result<Vec<SamplePair>> {
    let samples = load_dataset(cfg.data_root(), cfg.data.split_seed, cfg.data.eval_split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no evaluation samples in {}", cfg.data_root().display())));
    }
    Ok(samples)
}

fn eval(cfg: &RunConfig, ckpt: &Path, grid: bool, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.output_dir().join("eval"));
    let mut model = load_model(ckpt)?;
    let samples = eval_samples(cfg)?;
    let report = evaluate(&mut model, &samples, &cfg.eval, &path_str(ckpt))?;
    snapshot(&dir, "eval", json!({ "ckpt": path_str(ckpt), "grid": grid, "out": path_str(&dir) }), cfg)?;
    write_file(&dir.join("report.csv"), &report.to_csv())?;
    if grid {
        let mut rows = Vec::new();
        for s in &samples {
            let input = if model.needs_clouds() {
                s.cloudy.clone().expect("checked by evaluate")
            } else {
                s.sar.clone()
            };
            rows.push(vec![input, model.predict(s)?, s.optical.clone()]);
        }
        let labels: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (w, h) = export_grid(&rows, &labels, &dir.join("grid.png"))?;
        println!("wrote {}x{} grid with {} rows", w, h, rows.len());
    }
    println!(
        "{} images: psnr {} ssim {} psnr_cloudy {} psnr_noncloudy {}",
        report.rows.len(),
        fmt_metric(report.mean_psnr().mean),
        fmt_metric(report.mean_ssim().mean),
        fmt_metric(report.mean_psnr_cloudy().mean),
        fmt_metric(report.mean_psnr_noncloudy().mean)
    );
    println!("report {}", dir.join("report.csv").display());
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.output_dir().join("ablate"));
    let train_samples = load_dataset(cfg.data_root(), cfg.data.split_seed, cfg.data.train_split)?;
    let eval = eval_samples(cfg)?;
    snapshot(&dir, "ablate", json!({ "out": path_str(&dir) }), cfg)?;
    let table = ablate(&cfg.ablate, &cfg.train, &cfg.model, &cfg.eval, &train_samples, &eval, &dir)?;
    print!("{}", table.to_csv());
    let failed = table.rows.iter().filter(|r| r.report.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see {}", table.rows.len(), dir.join("ablation.csv").display());
    }
    Ok(())
}

fn infer(ckpt: &Path, sar: &Path, cloudy: Option<&Path>, output: &Path) -> Result<()> {
    let mut model = load_model(ckpt)?;
    let sar = load_image(sar, 1)?;
    let cloudy = cloudy.map(|p| load_image(p, 3)).transpose()?;
    if model.needs_clouds() && cloudy.is_none() {
        return Err(Error::Config(format!("{} is a cloud-removal checkpoint; pass --cloudy", ckpt.display())));
    }
    let sample = SamplePair {
        id: "input".into(),
        optical: Tensor::zeros([1, 3, sar.height(), sar.width()]),
        sar,
        cloudy,
        mask: None,
    };
    let pred = model.predict(&sample)?;
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Data(format!("{}: {e}", parent.display())))?;
    }
    save_image(output, &pred)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn grid(cfg: &RunConfig, ckpts: &[PathBuf], limit: usize, output: Option<PathBuf>) -> Result<()> {
    let path = output.unwrap_or_else(|| cfg.output_dir().join("grid.png"));
    let mut models = ckpts.iter().map(|c| load_model(c)).collect::<Result<Vec<_>>>()?;
    let samples: Vec<SamplePair> = eval_samples(cfg)?.into_iter().take(limit.max(1)).collect();
    let with_clouds = samples.iter().all(|s| s.cloudy.is_some());
    let mut rows = Vec::new();
    for s in &samples {
        let mut row = vec![s.sar.clone()];
        if with_clouds {
            row.push(s.cloudy.clone().expect("checked above"));
        }
        for m in &mut models {
            row.push(m.predict(s)?);
        }
        row.push(s.optical.clone());
        rows.push(row);
    }
    let labels: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (w, h) = export_grid(&rows, &labels, &path)?;
    let mut columns = vec!["sar".to_string()];
    if with_clouds {
        columns.push("cloudy".into());
    }
    columns.extend(ckpts.iter().map(|c| path_str(c)));
    columns.push("target".into());
    println!("wrote {}x{} grid {}; columns: {}", w, h, path.display(), columns.join(" | "));
    Ok(())
}
