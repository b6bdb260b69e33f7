//! The subcommands, as library functions returning their results.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use ucorr_core::checkpoint::Checkpoint;
use ucorr_core::graph::Graph;
use ucorr_core::loss::total_loss;
use ucorr_core::metrics::{best_f1_threshold, EvalOptions, EvalReport, MetricAccumulator};
use ucorr_core::model::build_model;
use ucorr_core::synth::{generate_window, Image, Sample};
use ucorr_core::train::{Batch, StepLog, Trainer};
use ucorr_core::{Model, Tensor, Variant};

use crate::config::Config;
use crate::dataset::{read_split, write_dataset, Manifest};
use crate::io::{atomic_write, depth_bytes, gray_png, prepare_output_dir, read_rgb, rgb_png};
use crate::panel::panel;
use crate::report::{ablation_json, ablation_tables, headline, key_values, metrics_table, render_ablation_table, to_json, AblationTable};

pub const LOG_HEADER: &str = "step,epoch,lr,total,wire,mae,msssim";

/// `run/config.toml`, `run/checkpoints/`, `run/logs/`, `run/reports/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn train_log(&self) -> PathBuf {
        self.logs().join("train.csv")
    }

    /// Latest checkpoint, rewritten after every epoch.
    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.uckp")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.uckp")
    }

    pub fn epoch_checkpoint(&self, epoch: u32) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:03}.uckp"))
    }

    /// Creates the layout and dumps the effective config.
    pub fn create(&self, cfg: &Config, force: bool) -> Result<()> {
        prepare_output_dir(&self.root, force)?;
        for d in [self.checkpoints(), self.logs(), self.reports()] {
            fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        }
        atomic_write(&self.config(), cfg.to_toml()?.as_bytes())
    }

    pub fn load_config(&self) -> Result<Config> {
        Config::load(&self.config())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Model described by `cfg` with weights from `ckpt`.
pub fn load_model(cfg: &Config, ckpt: &Checkpoint) -> Result<Model<f32>> {
    let mut model = build_model(&cfg.train.model, 0)?;
    ckpt.restore(model.params_mut(), None)?;
    Ok(model)
}

/// Makes rayon single-threaded; later calls are no-ops.
pub fn set_deterministic() {
    if rayon::ThreadPoolBuilder::new().num_threads(1).build_global().is_err() {
        warn!("thread pool already initialised; --deterministic has no effect on it");
    }
}

pub fn gen_data(cfg: &Config, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let manifest = write_dataset(&cfg.data, out)?;
    info!("wrote {}", manifest.summary_line());
    Ok(manifest)
}

fn check_shapes(cfg: &Config, samples: &[Sample], window: usize) -> Result<()> {
    let [h, w] = cfg.train.model.input_size;
    if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        bail!(
            "model expects {h}x{w} inputs but the data has {}x{} frames",
            s.height(),
            s.width()
        );
    }
    ensure!(!samples.is_empty(), "no samples with {window} consecutive frames");
    Ok(())
}

fn log_line(s: &StepLog) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        s.step, s.epoch, s.lr, s.loss.total, s.loss.wire, s.loss.depth_mae, s.loss.depth_msssim
    )
}

/// Trains on `samples` inside `run`, appending to its log and writing
/// checkpoints. Returns the trainer after the last step.
pub fn train_in_run(cfg: &Config, run: &RunDir, samples: &[Sample], resume: Option<&Checkpoint>) -> Result<Trainer> {
    let mut trainer = match resume {
        Some(c) => Trainer::resume(cfg.train.clone(), c)?,
        None => Trainer::new(cfg.train.clone())?,
    };
    let log_path = run.train_log();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{LOG_HEADER}")?;
    }
    let mut log = BufWriter::new(file);
    let mut io_error: Option<std::io::Error> = None;
    let every = cfg.train.checkpoint_every;
    while !trainer.finished() {
        let progressed = trainer.run_epoch(samples, |s| {
            if let Err(e) = writeln!(log, "{}", log_line(s)) {
                io_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_error.take() {
            return Err(e).context("writing training log");
        }
        log.flush()?;
        if !progressed {
            break;
        }
        let ckpt = trainer.checkpoint();
        if every > 0 && trainer.epoch() % every == 0 {
            save_checkpoint(&run.epoch_checkpoint(trainer.epoch()), &ckpt)?;
        }
        save_checkpoint(&run.last_checkpoint(), &ckpt)?;
    }
    let ckpt = trainer.checkpoint();
    save_checkpoint(&run.last_checkpoint(), &ckpt)?;
    save_checkpoint(&run.final_checkpoint(), &ckpt)?;
    Ok(trainer)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run: RunDir,
    pub steps: u64,
    pub val: Option<EvalReport>,
}

/// Trains a fresh run in `out`, or continues the run there from its last
/// checkpoint when `resume` is set (the run's own config is used then).
pub fn train(cfg: &Config, data: &Path, out: &Path, force: bool, resume: bool) -> Result<TrainOutcome> {
    let run = RunDir::new(out);
    let (cfg, ckpt) = if resume {
        let cfg = run.load_config()?;
        let ckpt = load_checkpoint(&run.last_checkpoint())?;
        info!("resuming {} at epoch {} step {}", out.display(), ckpt.epoch, ckpt.step);
        (cfg, Some(ckpt))
    } else {
        cfg.validate()?;
        (cfg.clone(), None)
    };
    let window = cfg.train.model.variant.arity();
    let samples = read_split(data, "train", window)?;
    check_shapes(&cfg, &samples, window)?;
    if !resume {
        run.create(&cfg, force)?;
    }
    info!("training {} on {} samples", cfg.train.model.variant, samples.len());
    let trainer = train_in_run(&cfg, &run, &samples, ckpt.as_ref())?;
    let steps = trainer.step();
    let model = trainer.into_model();

    let val = match read_split(data, "val", window) {
        Ok(v) if !v.is_empty() => {
            let r = evaluate_model(&model, &v, &cfg.eval)?;
            write_report(&run.reports(), "val", &r)?;
            Some(r)
        }
        _ => None,
    };
    Ok(TrainOutcome { run, steps, val })
}

/// Runs `predict` on every sample (in parallel) and accumulates metrics in
/// sample order. `predict` returns wire probabilities and depth, `H x W`.
pub fn evaluate_with<F>(samples: &[Sample], opts: &EvalOptions, predict: F) -> Result<EvalReport>
where
    F: Fn(&Sample) -> Result<(Vec<f32>, Vec<f32>)> + Sync,
{
    let parts: Vec<MetricAccumulator> = samples
        .par_iter()
        .map(|s| -> Result<MetricAccumulator> {
            let (prob, depth) = predict(s)?;
            let mut acc = MetricAccumulator::new();
            acc.add_image(&prob, &s.wire_mask.data, &depth, &s.depth.data, (s.height(), s.width()), opts)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = MetricAccumulator::new();
    for p in parts {
        acc.merge(p);
    }
    Ok(acc.finish(opts)?)
}

/// Newest `arity` frames as 1x3xHxW tensors.
pub fn input_tensors(frames: &[Image], arity: usize) -> Result<Vec<Tensor<f32>>> {
    ensure!(frames.len() >= arity, "model needs {arity} frames, got {}", frames.len());
    Ok(frames[frames.len() - arity..].iter().map(Image::to_tensor).collect())
}

pub fn predict_sample(model: &Model<f32>, s: &Sample) -> Result<(Vec<f32>, Vec<f32>)> {
    let inputs = input_tensors(&s.frames, model.config().variant.arity())?;
    let (p, d) = model.predict(&inputs)?;
    Ok((p.data().to_vec(), d.data().to_vec()))
}

pub fn evaluate_model(model: &Model<f32>, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(samples, opts, |s| predict_sample(model, s))
}

/// Writes `<name>.txt`, `<name>.kv` and `<name>.json` into `dir`.
pub fn write_report(dir: &Path, name: &str, r: &EvalReport) -> Result<()> {
    atomic_write(&dir.join(format!("{name}.txt")), metrics_table(&[(name.to_string(), r)]).as_bytes())?;
    atomic_write(&dir.join(format!("{name}.kv")), key_values(r).as_bytes())?;
    atomic_write(&dir.join(format!("{name}.json")), serde_json::to_string_pretty(&to_json(r))?.as_bytes())
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Threshold maximising F1 on the validation split and the report at
    /// that threshold, when requested.
    pub tuned: Option<(f32, EvalReport)>,
}

pub struct EvalArgs<'a> {
    pub run: &'a Path,
    pub data: &'a Path,
    pub split: &'a str,
    pub checkpoint: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub tune_threshold: bool,
}

pub fn eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let run = RunDir::new(args.run);
    let cfg = run.load_config()?;
    let ckpt_path = args.checkpoint.map_or_else(|| run.final_checkpoint(), Path::to_path_buf);
    let model = load_model(&cfg, &load_checkpoint(&ckpt_path)?)?;
    let window = cfg.train.model.variant.arity();
    let samples = read_split(args.data, args.split, window)?;
    check_shapes(&cfg, &samples, window)?;
    let report = evaluate_model(&model, &samples, &cfg.eval)?;
    let out = args.out.map_or_else(|| run.reports(), Path::to_path_buf);
    write_report(&out, args.split, &report)?;

    let tuned = if args.tune_threshold {
        let val = read_split(args.data, "val", window)?;
        let mut acc = MetricAccumulator::new();
        for s in &val {
            let (p, d) = predict_sample(&model, s)?;
            acc.add_image(&p, &s.wire_mask.data, &d, &s.depth.data, (s.height(), s.width()), &cfg.eval)?;
        }
        let (scores, labels) = acc.scores_and_labels();
        match best_f1_threshold(scores, labels) {
            Some((t, _)) => {
                let opts = EvalOptions { threshold: t, ..cfg.eval };
                let r = evaluate_model(&model, &samples, &opts)?;
                write_report(&out, &format!("{}_tuned", args.split), &r)?;
                Some((t, r))
            }
            None => {
                warn!("validation split has no wire pixels; threshold not tuned");
                None
            }
        }
    } else {
        None
    };
    Ok(EvalOutcome { report, tuned })
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub results: Vec<(Variant, EvalReport)>,
    pub tables: Vec<AblationTable>,
    pub headline: Option<String>,
    pub text: String,
}

/// Trains every configured variant with the same budget and seed on one
/// shared sample set and compares them on `cfg.ablate.split`.
pub fn ablate(cfg: &Config, data: &Path, out: &Path, force: bool) -> Result<AblateOutcome> {
    cfg.validate()?;
    let window = cfg.ablate.window;
    let train = read_split(data, "train", window)?;
    let test = read_split(data, &cfg.ablate.split, window)?;
    check_shapes(cfg, &train, window)?;
    check_shapes(cfg, &test, window)?;
    prepare_output_dir(out, force)?;
    atomic_write(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let mut results = Vec::new();
    for &variant in &cfg.ablate.variants {
        let mut vcfg = cfg.clone();
        vcfg.train.model.variant = variant;
        let run = RunDir::new(out.join(variant.name()));
        run.create(&vcfg, false)?;
        let t0 = Instant::now();
        let trainer = train_in_run(&vcfg, &run, &train, None)?;
        let steps = trainer.step();
        let model = trainer.into_model();
        let report = evaluate_model(&model, &test, &cfg.eval)?;
        write_report(&run.reports(), &cfg.ablate.split, &report)?;
        info!(
            "{variant}: {steps} steps in {:.1}s, iou {:.4} f1 {:.4}",
            t0.elapsed().as_secs_f64(),
            report.iou,
            report.f1
        );
        results.push((variant, report));
    }

    let tables = ablation_tables(&results);
    let headline = headline(&results);
    let rows: Vec<(String, &EvalReport)> = results.iter().map(|(v, r)| (v.name().to_string(), r)).collect();
    let mut text = format!("all variants on `{}` ({} samples)\n", cfg.ablate.split, test.len());
    text += &metrics_table(&rows);
    for t in &tables {
        text.push('\n');
        text += &render_ablation_table(t);
    }
    if let Some(h) = &headline {
        text += &format!("\n{h}\n");
        info!("{h}");
    }
    let reports = out.join("reports");
    atomic_write(&reports.join("ablation.txt"), text.as_bytes())?;
    atomic_write(
        &reports.join("ablation.json"),
        serde_json::to_string_pretty(&ablation_json(&results, &tables))?.as_bytes(),
    )?;
    Ok(AblateOutcome { results, tables, headline, text })
}

#[derive(Debug)]
pub struct InferOutputs {
    pub wire: PathBuf,
    pub depth: PathBuf,
    pub panel: PathBuf,
}

/// Predicts on frames given oldest first. Exactly as many frames as the
/// model takes, all the same size.
pub fn infer(run: &Path, checkpoint: Option<&Path>, frames: &[PathBuf], out: &Path) -> Result<InferOutputs> {
    let run = RunDir::new(run);
    let cfg = run.load_config()?;
    let ckpt_path = checkpoint.map_or_else(|| run.final_checkpoint(), Path::to_path_buf);
    let model = load_model(&cfg, &load_checkpoint(&ckpt_path)?)?;
    let arity = cfg.train.model.variant.arity();
    ensure!(
        frames.len() == arity,
        "{} takes {arity} frames, got {}",
        cfg.train.model.variant,
        frames.len()
    );
    let images = frames.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
    let first = &images[0];
    if let Some((p, img)) = frames.iter().zip(&images).find(|(_, i)| !i.same_dims(first)) {
        bail!(
            "frame size mismatch: {} is {}x{}, {} is {}x{}",
            frames[0].display(),
            first.width,
            first.height,
            p.display(),
            img.width,
            img.height
        );
    }
    model.config().check_size(first.height, first.width)?;
    let (p, d) = model.predict(&input_tensors(&images, arity)?)?;
    let (h, w) = (first.height, first.width);
    let prob = Image::new(h, w, 1, p.data().to_vec())?;
    let depth = Image::new(h, w, 1, d.data().to_vec())?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outputs = InferOutputs {
        wire: out.join("wire.png"),
        depth: out.join("depth.utf"),
        panel: out.join("panel.png"),
    };
    atomic_write(&outputs.wire, &gray_png(&prob)?)?;
    atomic_write(&outputs.depth, &depth_bytes(&depth)?)?;
    let view = panel(images.last().expect("at least one frame"), &prob, &depth, cfg.data.scene.far_plane);
    atomic_write(&outputs.panel, &rgb_png(&view)?)?;
    Ok(outputs)
}

#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub parameters: usize,
    pub forward_ms: f64,
    pub train_step_ms: f64,
}

/// Times inference and full training steps of the configured model on
/// generated samples.
pub fn bench(cfg: &Config, steps: usize) -> Result<BenchResult> {
    cfg.validate()?;
    ensure!(steps > 0, "bench needs at least one step");
    let arity = cfg.train.model.variant.arity();
    let samples = (0..cfg.train.batch_size)
        .map(|i| generate_window(&cfg.data.scene, i as u64, arity))
        .collect::<ucorr_core::Result<Vec<_>>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, arity)?;
    let mut trainer = Trainer::new(cfg.train.clone())?;

    let t0 = Instant::now();
    for _ in 0..steps {
        let mut g = Graph::new();
        let out = trainer.model().forward(&mut g, &batch.frames)?;
        total_loss(&mut g, &out, &batch.wire, &batch.depth, &cfg.train.loss)?;
    }
    let forward_ms = t0.elapsed().as_secs_f64() * 1e3 / steps as f64;
    let t0 = Instant::now();
    for _ in 0..steps {
        trainer.train_batch(&batch)?;
    }
    let train_step_ms = t0.elapsed().as_secs_f64() * 1e3 / steps as f64;
    Ok(BenchResult {
        parameters: trainer.model().num_parameters(),
        forward_ms,
        train_step_ms,
    })
}
