use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use trm::ablate::{self, Grid};
use trm::checkpoint;
use trm::config::{pinned_net_fields, resolve_output, RunConfig};
use trm::data::arc::{arc_build_dataset, arc_load};
use trm::data::maze::{maze_splits, MazeGenConfig};
use trm::data::sudoku::{sudoku_splits, SudokuGenConfig};
use trm::data::{sha256_hex, write_splits, Dataset, Manifest};
use trm::eval::{eval_run, outcomes_csv, write_report};
use trm::model::MixerKind;
use trm::recursion::Variant;
use trm::run::{train_run, TrainOptions};
use trm::{Error, Result};

#[derive(Parser)]
#[command(name = "trm", version, about = "Tiny recursive reasoning models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (JSON-lines splits plus manifest).
    GenData(GenData),
    /// Train a model; writes metrics, checkpoints and a final report.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Run a grid of (variant, n, T, layers) cells and tabulate them.
    Ablate(Ablate),
    /// Print a checkpoint's header.
    InspectCheckpoint(Inspect),
}

#[derive(Args)]
struct GenData {
    #[command(subcommand)]
    task: GenTask,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum GenTask {
    Sudoku {
        #[arg(long, default_value_t = 4)]
        size: usize,
        /// Training puzzles.
        #[arg(long)]
        count: usize,
        /// Test puzzles (defaults to --count).
        #[arg(long)]
        test_count: Option<usize>,
        /// Copies per training puzzle, the first one unaugmented.
        #[arg(long, default_value_t = 1)]
        augment: usize,
        #[arg(long)]
        min_clues: Option<usize>,
        #[arg(long)]
        max_clues: Option<usize>,
        #[command(flatten)]
        common: GenCommon,
    },
    Maze {
        #[arg(long, default_value_t = 12)]
        size: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        test_count: Option<usize>,
        /// Dihedral copies per training maze (at most 8).
        #[arg(long, default_value_t = 1)]
        augment: usize,
        #[arg(long)]
        min_path: Option<usize>,
        #[command(flatten)]
        common: GenCommon,
    },
    Arc {
        /// Training tasks: a JSON file, a directory of them, or a combined map.
        #[arg(long)]
        train: PathBuf,
        /// Evaluation tasks; their demonstrations join training.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = 8)]
        augment: usize,
        #[arg(long)]
        permute_background: bool,
        #[command(flatten)]
        common: GenCommon,
    },
}

#[derive(Args, Serialize)]
struct GenCommon {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Overwrite an existing dataset.
    #[arg(long)]
    #[serde(skip)]
    force: bool,
}

#[derive(Args)]
struct Train {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "T", alias = "t")]
    t: Option<usize>,
    #[arg(long)]
    n_sup: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_parser = parse_mixer)]
    mixer: Option<MixerKind>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_halting: bool,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    #[arg(long, default_value_t = 0)]
    eval_batch: usize,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; the checkpoint's own when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Use the raw weights instead of the EMA shadow.
    #[arg(long)]
    no_ema: bool,
    /// Supervision steps at test time.
    #[arg(long)]
    n_sup: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample outcomes CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Recorded in the report; evaluation itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Ablate {
    /// TOML grid: a `[base]` run configuration and `[[cells]]`.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Tabulate the static columns without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct Inspect {
    path: PathBuf,
    /// Print the whole header as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_mixer(s: &str) -> std::result::Result<MixerKind, String> {
    match s {
        "mixer" => Ok(MixerKind::Mixer),
        "attention" => Ok(MixerKind::Attention),
        _ => Err(format!("unknown mixer `{s}` (mixer, attention)")),
    }
}

/// Prints to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn gen_data(task: GenTask) -> Result<()> {
    let hash = sha256_hex(&serde_json::to_vec(&task)?);
    let (train, test, common): (Dataset, Dataset, &GenCommon) = match &task {
        GenTask::Sudoku {
            size,
            count,
            test_count,
            augment,
            min_clues,
            max_clues,
            common,
        } => {
            let mut cfg = SudokuGenConfig::new(*size, count + test_count.unwrap_or(*count), common.seed);
            cfg.clue_range = (
                min_clues.unwrap_or(cfg.clue_range.0),
                max_clues.unwrap_or(cfg.clue_range.1),
            );
            let (a, b) = sudoku_splits(&cfg, *count, *augment)?;
            (a, b, common)
        }
        GenTask::Maze {
            size,
            count,
            test_count,
            augment,
            min_path,
            common,
        } => {
            let mut cfg = MazeGenConfig::desk(count + test_count.unwrap_or(*count), common.seed);
            if *size != cfg.h {
                cfg.h = *size;
                cfg.w = *size;
                cfg.min_path_len = (110.0 * (*size as f64) / 30.0).ceil() as usize;
            }
            if let Some(p) = min_path {
                cfg.min_path_len = *p;
            }
            let (a, b) = maze_splits(&cfg, *count, *augment)?;
            (a, b, common)
        }
        GenTask::Arc {
            train,
            eval,
            augment,
            permute_background,
            common,
        } => {
            let (a, b) = arc_build_dataset(
                &arc_load(train)?,
                &arc_load(eval)?,
                *augment,
                common.seed,
                *permute_background,
            )?;
            (a, b, common)
        }
    };
    let out = resolve_output(&common.out);
    let m = write_splits(
        &out,
        common.seed,
        &hash,
        &[("train", &train), ("test", &test)],
        common.force,
    )?;
    for s in &m.splits {
        log(&format!("{}: {} records ({})", s.name, s.count, &s.sha256[..12]));
    }
    log(&format!("wrote {}", out.display()));
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, Vec<String>)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok((RunConfig::from_toml(&text)?, pinned_net_fields(&text)?))
        }
        None => Ok((RunConfig::default(), Vec::new())),
    }
}

fn train(a: Train) -> Result<()> {
    let (mut cfg, pinned) = load_config(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data.dir = d;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    let s = &mut cfg.schedule;
    if let Some(v) = a.variant {
        s.variant = v;
    }
    s.n = a.n.unwrap_or(s.n);
    s.t = a.t.unwrap_or(s.t);
    s.n_sup = a.n_sup.unwrap_or(s.n_sup);
    let net = &mut cfg.net;
    net.n_layers = a.layers.unwrap_or(net.n_layers);
    net.hidden_d = a.hidden.unwrap_or(net.hidden_d);
    net.variant = a.mixer.unwrap_or(net.variant);
    let t = &mut cfg.train;
    t.max_steps = a.steps.unwrap_or(t.max_steps);
    t.batch_size = a.batch.unwrap_or(t.batch_size);
    t.lr = a.lr.unwrap_or(t.lr);
    t.warmup_steps = a.warmup.unwrap_or(t.warmup_steps);
    t.weight_decay = a.weight_decay.unwrap_or(t.weight_decay);
    t.ema_decay = a.ema_decay.unwrap_or(t.ema_decay);
    t.seed = a.seed.unwrap_or(t.seed);
    t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
    if a.no_halting {
        t.halting = false;
    }
    if a.resume.is_none() {
        let manifest = Manifest::load(&cfg.data.dir)?;
        cfg.fit_to_data(&manifest, &pinned)?;
        cfg.validate()?;
    }
    let opts = TrainOptions {
        out_dir: cfg.resolved_output(),
        resume: a.resume,
        eval_every: a.eval_every,
        eval_batch: a.eval_batch,
    };
    let summary = train_run(cfg, &opts, &mut |l| log(l))?;
    log(&format!(
        "trained {} steps; final checkpoint {}",
        summary.steps,
        summary.final_checkpoint.display()
    ));
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let loaded = checkpoint::load::<f32>(&a.checkpoint)?;
    let cfg = &loaded.header.config;
    let dir = a.data.unwrap_or_else(|| cfg.data.dir.clone());
    let data = Manifest::load(&dir)?.load_split(&dir, &a.split)?;
    let model = loaded.model(!a.no_ema)?;
    let mut schedule = cfg.schedule;
    if let Some(k) = a.n_sup {
        schedule.n_sup = k;
    }
    let (mut report, outcomes) = eval_run(&model, &data, &schedule, a.batch)?;
    report.config_hash = Some(loaded.header.config_hash.clone());
    report.seed = Some(a.seed.unwrap_or(loaded.header.seed));
    match &a.out {
        Some(p) => {
            write_report(&resolve_output(p), &report)?;
            log(&format!(
                "exact-match {:.4} on {} samples",
                report.exact_match, report.samples
            ));
        }
        None => emit(&serde_json::to_string_pretty(&report)?),
    }
    if let Some(p) = &a.csv {
        let p = resolve_output(p);
        std::fs::write(&p, outcomes_csv(&outcomes)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let text = std::fs::read_to_string(&a.grid).map_err(|e| Error::Config(format!("{}: {e}", a.grid.display())))?;
    let mut grid = Grid::from_toml(&text)?;
    let pinned: Vec<String> = {
        let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        match doc.get("base") {
            Some(base) => pinned_net_fields(&toml::to_string(base).map_err(|e| Error::Config(e.to_string()))?)?,
            None => Vec::new(),
        }
    };
    if let Some(d) = a.data {
        grid.base.data.dir = d;
    }
    if let Some(s) = a.seed {
        grid.base.train.seed = s;
    }
    if let Some(s) = a.steps {
        grid.base.train.max_steps = s;
    }
    let out = resolve_output(&a.out);
    let outcome = if grid.cells.is_empty() {
        ablate::Outcome {
            rows: Vec::new(),
            curves: Vec::new(),
        }
    } else {
        let manifest = Manifest::load(&grid.base.data.dir)?;
        grid.base.fit_to_data(&manifest, &pinned)?;
        if a.dry_run {
            ablate::Outcome {
                rows: ablate::plan(&grid)?,
                curves: Vec::new(),
            }
        } else {
            let (_, train, test) = trm::run::load_splits(&grid.base)?;
            let test = test.ok_or_else(|| Error::Data("dataset has no test split".into()))?;
            ablate::run(&grid, &train, &test, log)?
        }
    };
    ablate::write_outputs(&out, &outcome)?;
    emit(ablate::markdown(&outcome.rows).trim_end());
    Ok(())
}

fn inspect(a: Inspect) -> Result<()> {
    let h = checkpoint::read_header(&a.path)?;
    if a.json {
        emit(&serde_json::to_string_pretty(&h)?);
        return Ok(());
    }
    let s = &h.config.schedule;
    let net = &h.config.net;
    let lines = [
        format!("format       {}", h.format),
        format!("dtype        {:?}", h.dtype),
        format!("step         {}", h.step),
        format!("seed         {}", h.seed),
        format!("config hash  {}", h.config_hash),
        format!(
            "variant      {} (n={}, T={}, N_sup={})",
            s.variant.as_str(),
            s.n,
            s.t,
            s.n_sup
        ),
        format!(
            "network      {:?}, {} layers, D={}, L={}, V={}",
            net.variant, net.n_layers, net.hidden_d, net.seq_len, net.vocab_size
        ),
        format!("parameters   {}", h.param_count),
        format!("params hash  {}", h.params_digest),
        format!("ema hash     {}", h.ema_digest),
        format!("arrays       {}", h.arrays.len()),
    ];
    emit(&lines.join("\n"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(g) => gen_data(g.task),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
