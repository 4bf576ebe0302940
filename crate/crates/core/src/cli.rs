//! Command-line workflows behind the `avtrack` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, read_metadata, save_checkpoint};
use crate::config::Config;
use crate::data::{gen_collection, gen_sequence, read_collection, read_sequence, write_sequence, GenConfig};
use crate::distill::{build_student, TeacherEnsemble};
use crate::error::{Error, Result};
use crate::eval::{bench_fps, boxes_of, count_flops, count_params, track_sequence, BenchReport, CostReport, EvalReport};
use crate::geom::Rect;
use crate::head::FrameRecord;
use crate::model::{ModelConfig, TrackerModel};
use crate::tensor::ParamStore;
use crate::train::{Distiller, LossBreakdown, Trainer};

/// Element type used by every command.
type F = f32;

#[derive(Debug, Parser)]
#[command(name = "avtrack", version, about = "Adaptive ViT single-object tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded synthetic sequences.
    GenData(GenArgs),
    /// Train a tracker from scratch.
    Train(TrainArgs),
    /// Distill a student from frozen teacher checkpoints.
    Distill(DistillArgs),
    /// Track one sequence and write per-frame records.
    Track(TrackArgs),
    /// Compute precision and success.
    Eval(EvalArgs),
    /// Measure tracking speed and report model cost.
    Bench(BenchArgs),
    /// Print a checkpoint's configuration and tensor table.
    Inspect(InspectArgs),
}

/// Flags that override configuration keys.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"])]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = ["jsd", "mse"])]
    pub md_mode: Option<String>,
    #[arg(long)]
    pub student_blocks: Option<usize>,
    #[arg(long, value_parser = ["none", "all-on", "all-off"])]
    pub force_gates: Option<String>,
    /// Any other key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("profile", self.profile.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("md_mode", self.md_mode.clone());
        push("student_blocks", self.student_blocks.map(|v| v.to_string()));
        push("force_gates", self.force_gates.clone());
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                key: s.clone(),
                line: 0,
                msg: "expected KEY=VALUE".into(),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn load(&self) -> Result<Config> {
        let cfg = Config::load(self.config.as_deref(), &self.overrides()?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory; one subdirectory per sequence.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training sequences; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Per-step loss table.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated teacher checkpoints.
    #[arg(long, value_delimiter = ',', required = true)]
    pub teachers: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Record table; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["none", "all-on", "all-off"])]
    pub force_gates: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sequence directory or a directory of sequences.
    #[arg(long)]
    pub data: PathBuf,
    /// Record table from `track`, for a single sequence.
    #[arg(long, conflicts_with = "checkpoint")]
    pub pred: Option<PathBuf>,
    /// Track every sequence with this checkpoint.
    #[arg(long, required_unless_present = "pred")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["none", "all-on", "all-off"])]
    pub force_gates: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence to time; a seeded synthetic one when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Frames of the synthetic sequence.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, value_parser = ["none", "all-on", "all-off", "half"])]
    pub force_gates: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Worker cap from `AVTRACK_THREADS`, defaulting to the available cores.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("AVTRACK_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(avail, |n| n.min(avail.max(1)))
}

/// Execute a parsed command; returns what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Distill(a) => distill(&a),
        Command::Track(a) => track(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

fn gen_data(a: &GenArgs) -> Result<String> {
    let cfg = a.cfg.load()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let n = cfg.sequences;
    let workers = worker_count().min(n.max(1));
    let results: Vec<Result<String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (cfg, out) = (&cfg, &a.out);
                s.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| {
                            let ds = gen_sequence(&GenConfig {
                                seed: cfg.gen.seed.wrapping_add(cfg.seed).wrapping_add(i as u64),
                                ..cfg.gen.clone()
                            })?;
                            write_sequence(&ds, &out.join(&ds.name))?;
                            Ok(ds.name)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut names = results.into_iter().collect::<Result<Vec<_>>>()?;
    names.sort();
    Ok(format!("wrote {} sequences to {}\n", names.len(), a.out.display()))
}

fn training_data(cfg: &Config, dir: Option<&Path>) -> Result<Vec<crate::data::SequenceDataset>> {
    match dir.or(cfg.data_dir.as_deref()) {
        Some(d) => read_collection(d),
        None => gen_collection(
            &GenConfig {
                seed: cfg.gen.seed.wrapping_add(cfg.seed),
                ..cfg.gen.clone()
            },
            cfg.sequences,
        ),
    }
}

fn write_log(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => Ok(()),
    }
}

fn train(a: &TrainArgs) -> Result<String> {
    let cfg = a.cfg.load()?;
    let seqs = training_data(&cfg, a.data.as_deref())?;
    let mut t = Trainer::<F>::new(&cfg, &seqs)?;
    let mut log = format!("{}\n", LossBreakdown::CSV_HEADER);
    let mut last = None;
    t.run(|step, lr, r| {
        let _ = writeln!(log, "{}", r.csv_line(step, lr));
        last = Some(*r);
    })?;
    write_log(a.log.as_deref(), &log)?;
    save_checkpoint(&a.out, &cfg, &t.store)?;
    let tail = last.map_or(String::new(), |r| format!(", final loss {:.6}", r.total));
    Ok(format!("trained {} steps{tail}; wrote {}\n", cfg.steps, a.out.display()))
}

fn load_model(path: &Path) -> Result<(Config, TrackerModel, ParamStore<F>)> {
    let (cfg, store) = load_checkpoint::<F>(path)?;
    let model = TrackerModel::bind(&cfg.model, &store)?;
    Ok((cfg, model, store))
}

fn distill(a: &DistillArgs) -> Result<String> {
    let mut cfg = a.cfg.load()?;
    let teachers = a
        .teachers
        .iter()
        .map(|p| load_model(p).map(|(_, m, s)| (m, s)))
        .collect::<Result<Vec<_>>>()?;
    let tcfg: ModelConfig = teachers[0].0.cfg.clone();
    cfg.model = ModelConfig {
        backbone: build_student(&tcfg.backbone, cfg.student_blocks)?,
        ..tcfg
    };
    let seqs = training_data(&cfg, a.data.as_deref())?;
    let ens = TeacherEnsemble::new(teachers)?;
    let mut d = Distiller::<F>::new(&cfg, ens, &seqs)?;
    let mut log = format!("{}\n", LossBreakdown::CSV_HEADER);
    d.run(|step, lr, r| {
        let _ = writeln!(log, "{}", r.csv_line(step, lr));
    })?;
    write_log(a.log.as_deref(), &log)?;
    save_checkpoint(&a.out, &cfg, &d.store)?;
    Ok(format!(
        "distilled a {}-block student from {} teacher(s) over {} steps ({}); wrote {}\n",
        cfg.model.backbone.depth,
        a.teachers.len(),
        cfg.steps,
        cfg.md_mode.name(),
        a.out.display()
    ))
}

fn force_of(cfg: &Config, flag: Option<&str>) -> Result<crate::vit::ForceGates> {
    match flag {
        Some("half") => Ok(crate::vit::ForceGates::half(cfg.model.backbone.adaptive_blocks())),
        Some(f) => crate::vit::ForceGates::parse(f),
        None => cfg.force(),
    }
}

fn track(a: &TrackArgs) -> Result<String> {
    let (cfg, model, store) = load_model(&a.checkpoint)?;
    let ds = read_sequence(&a.data)?;
    let recs = track_sequence(&model, &store, &ds, &force_of(&cfg, a.force_gates.as_deref())?)?;
    let mut out = format!("{}\n", FrameRecord::CSV_HEADER);
    for r in &recs {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    match &a.out {
        Some(p) => {
            fs::write(p, &out).map_err(|e| Error::io(p, e))?;
            Ok(format!("tracked {} frames; wrote {}\n", recs.len(), p.display()))
        }
        None => Ok(out),
    }
}

/// Boxes from a record table written by `track`, ordered by frame.
pub fn parse_records(text: &str, path: &Path) -> Result<Vec<Rect>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "empty record table".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let idx = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("missing column `{name}`"),
        })
    };
    let [fi, xi, yi, wi, hi] = [idx("frame")?, idx("x")?, idx("y")?, idx("w")?, idx("h")?];
    let mut rows = Vec::new();
    for (i, l) in lines {
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        if f.len() != cols.len() {
            return Err(bad(format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(format!("`{}` is not a number", f[k])));
        let frame = f[fi].parse::<usize>().map_err(|_| bad(format!("`{}` is not a frame index", f[fi])))?;
        rows.push((frame, Rect::new(num(xi)?, num(yi)?, num(wi)?, num(hi)?)));
    }
    rows.sort_by_key(|r| r.0);
    Ok(rows.into_iter().map(|r| r.1).collect())
}

fn eval(a: &EvalArgs) -> Result<String> {
    let mut out = format!("sequence,{}\n", EvalReport::CSV_HEADER);
    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    if let Some(pred) = &a.pred {
        let ds = read_sequence(&a.data)?;
        let text = fs::read_to_string(pred).map_err(|e| Error::io(pred, e))?;
        let p = parse_records(&text, pred)?;
        let _ = writeln!(out, "{},{}", ds.name, EvalReport::compute(&p, &ds.boxes)?.csv_line());
        all_p = p;
        all_g = ds.boxes;
    } else if let Some(ck) = &a.checkpoint {
        let (cfg, model, store) = load_model(ck)?;
        let force = force_of(&cfg, a.force_gates.as_deref())?;
        for ds in read_collection(&a.data)? {
            let p = boxes_of(&track_sequence(&model, &store, &ds, &force)?);
            let _ = writeln!(out, "{},{}", ds.name, EvalReport::compute(&p, &ds.boxes)?.csv_line());
            all_p.extend(p);
            all_g.extend(ds.boxes);
        }
    }
    let _ = writeln!(out, "all,{}", EvalReport::compute(&all_p, &all_g)?.csv_line());
    Ok(out)
}

fn bench(a: &BenchArgs) -> Result<String> {
    let (cfg, model, store) = load_model(&a.checkpoint)?;
    let ds = match &a.data {
        Some(d) => read_sequence(d)?,
        None => gen_sequence(&GenConfig {
            length: a.frames + 1,
            seed: cfg.gen.seed.wrapping_add(cfg.seed),
            ..cfg.gen.clone()
        })?,
    };
    let r = bench_fps(&model, &store, &ds, a.warmup, &force_of(&cfg, a.force_gates.as_deref())?)?;
    let c = count_flops(&cfg.model);
    Ok(format!(
        "{}\n{}\n\n{}\n{}\n",
        BenchReport::CSV_HEADER,
        r.csv_line(),
        CostReport::CSV_HEADER,
        c.csv_line()
    ))
}

fn inspect(a: &InspectArgs) -> Result<String> {
    let meta = read_metadata(&a.checkpoint)?;
    let mut out = String::new();
    let _ = writeln!(out, "# config");
    out.push_str(&meta.config.to_text());
    let _ = writeln!(out, "\n# tensors\nname,dtype,shape,offset,trainable");
    for t in &meta.tensors {
        let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            t.name,
            t.dtype.name(),
            shape.join("x"),
            t.offset,
            t.trainable
        );
    }
    let tracking = meta.count(|n| !n.starts_with("vir_critic."));
    let (pmin, pmax) = count_params(&meta.config.model, true);
    let _ = writeln!(out, "\n# parameters");
    let _ = writeln!(out, "tracking,{tracking}");
    let _ = writeln!(out, "critic,{}", meta.count(|n| n.starts_with("vir_critic.")));
    let _ = writeln!(out, "params_min,{pmin}");
    let _ = writeln!(out, "params_max,{pmax}");
    Ok(out)
}
