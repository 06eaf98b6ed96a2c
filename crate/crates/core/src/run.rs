//! End-to-end training runs with on-disk artifacts.
//!
//! An output directory holds `config.toml`, `metrics.jsonl` (one
//! [`StepMetrics`] object per line), optional `eval.jsonl`, periodic
//! `checkpoints/step_NNNNNN.ckpt`, `final.ckpt`, `loss.svg` and, when the
//! dataset has a test split, `report.json`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::eval::{eval_run, write_report, EvalReport};
use crate::model::Model;
use crate::plot::{line_chart, Series};
use crate::train::{StepMetrics, Trainer};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Checkpoint to continue from; its configuration wins except for `max_steps`.
    pub resume: Option<PathBuf>,
    /// Evaluate the EMA weights on the test split every this many steps (0: never).
    pub eval_every: u64,
    /// Evaluation batch size; the training batch size when zero.
    pub eval_batch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub config: RunConfig,
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub report: Option<EvalReport>,
}

/// Training and (if present) test splits named by `cfg.data`.
pub fn load_splits(cfg: &RunConfig) -> Result<(Manifest, Dataset, Option<Dataset>)> {
    let dir = &cfg.data.dir;
    let manifest = Manifest::load(dir)?;
    let train = manifest.load_split(dir, &cfg.data.train_split)?;
    let test = if manifest.splits.iter().any(|s| s.name == cfg.data.test_split) {
        Some(manifest.load_split(dir, &cfg.data.test_split)?)
    } else {
        None
    };
    Ok((manifest, train, test))
}

fn keep_metrics_through(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let m: StepMetrics = serde_json::from_str(&line)?;
        if m.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads a metrics stream back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?))
        .collect()
}

fn evaluate(model: &Model<f32>, test: &Dataset, cfg: &RunConfig, batch: usize) -> Result<EvalReport> {
    let bs = if batch == 0 { cfg.train.batch_size } else { batch };
    let (mut report, _) = eval_run(model, test, &cfg.schedule, bs)?;
    report.config_hash = Some(cfg.hash());
    report.seed = Some(cfg.train.seed);
    Ok(report)
}

/// Trains `cfg` (32-bit) to `cfg.train.max_steps`, writing artifacts into `opts.out_dir`.
pub fn train_run(cfg: RunConfig, opts: &TrainOptions, log: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.jsonl");

    let (cfg, mut trainer, train, test) = match &opts.resume {
        Some(path) => {
            let loaded = checkpoint::load::<f32>(path)?;
            let mut c = loaded.header.config.clone();
            c.train.max_steps = cfg.train.max_steps;
            c.data = cfg.data.clone();
            let (_, train, test) = load_splits(&c)?;
            let mut t = loaded.trainer(&train)?;
            t.cfg.max_steps = c.train.max_steps;
            keep_metrics_through(&metrics_path, t.step)?;
            log(&format!("resumed from {} at step {}", path.display(), t.step));
            (c, t, train, test)
        }
        None => {
            cfg.validate()?;
            let (_, train, test) = load_splits(&cfg)?;
            let model = Model::<f32>::new(cfg.net.clone(), cfg.schedule.variant, cfg.train.seed)?;
            let t = Trainer::new(model, cfg.schedule, cfg.train.clone(), &train)?;
            File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            (cfg, t, train, test)
        }
    };
    cfg.save(&out.join("config.toml"))?;
    log(&format!(
        "{} parameters, {} training records, config {}",
        trainer.model.param_count(),
        train.len(),
        &cfg.hash()[..12]
    ));

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let eval_path = out.join("eval.jsonl");
    let every = cfg.train.checkpoint_every;
    while trainer.step < trainer.cfg.max_steps {
        let m = match trainer.train_step(&train) {
            Ok(m) => m,
            Err(e @ Error::Diverged { .. }) => {
                let p = out.join("diverged.ckpt");
                checkpoint::save(&p, &trainer, &cfg)?;
                log(&format!("{e}; state saved to {}", p.display()));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        serde_json::to_writer(&mut metrics, &m)?;
        metrics.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
        if every > 0 && m.step % every == 0 {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let p = out.join("checkpoints").join(format!("step_{:06}.ckpt", m.step));
            checkpoint::save(&p, &trainer, &cfg)?;
        }
        if let (Some(test), true) = (&test, opts.eval_every > 0 && m.step % opts.eval_every == 0) {
            let r = evaluate(&trainer.ema_model(), test, &cfg, opts.eval_batch)?;
            let line = serde_json::json!({
                "step": m.step,
                "exact_match": r.exact_match,
                "per_cell_accuracy": r.per_cell_accuracy,
            });
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&eval_path)
                .map_err(|e| Error::io(&eval_path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&eval_path, e))?;
            log(&format!("step {}: test exact-match {:.4}", m.step, r.exact_match));
        }
        if m.step % 50 == 0 || m.step == trainer.cfg.max_steps {
            log(&format!(
                "step {}: loss {:.4} + {:.4}, train exact-match {:.3}",
                m.step, m.loss_answer, m.loss_halt, m.train_exact_match
            ));
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    drop(metrics);

    let final_checkpoint = out.join("final.ckpt");
    checkpoint::save(&final_checkpoint, &trainer, &cfg)?;
    let history = read_metrics(&metrics_path)?;
    let svg = line_chart(
        "training loss",
        "step",
        "loss",
        &[
            Series::new(
                "answer",
                history.iter().map(|m| (m.step as f64, m.loss_answer)).collect(),
            ),
            Series::new("halt", history.iter().map(|m| (m.step as f64, m.loss_halt)).collect()),
        ],
    );
    let svg_path = out.join("loss.svg");
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;

    let report = match &test {
        Some(test) => {
            let r = evaluate(&trainer.ema_model(), test, &cfg, opts.eval_batch)?;
            write_report(&out.join("report.json"), &r)?;
            log(&format!("final test exact-match {:.4}", r.exact_match));
            Some(r)
        }
        None => None,
    };
    Ok(TrainSummary {
        steps: trainer.step,
        config: cfg,
        final_checkpoint,
        report,
    })
}
