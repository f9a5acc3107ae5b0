use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use boxforge::env::{write_trace_jsonl, EpisodeConfig, SceneData};
use boxforge::pipeline::adjust::gt_length;
use boxforge::pipeline::eval::to_tsv;
use boxforge::pipeline::{
    adjust_box, adjust_dataset, adjust_dataset_parallel, eval_report, pseudo_label_flow,
    save_annotations, AdjustReport, Adjuster, Dataset, OracleConfig, PipelineError, RunConfig,
    ScoreSet, Split,
};
use boxforge::qnet::{load_checkpoint, save_checkpoint, Metadata, QNetwork};
use boxforge::rl::train;

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Parser)]
#[command(name = "boxforge", version, about = "Refine quadrilateral text annotations with a trained box-adjustment agent")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark: scenes, annotations and a manifest.
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest per-coordinate offset between annotated and optimal boxes.
        #[arg(long, default_value_t = 4)]
        perturb: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode JSON lines followed by a summary line.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Adjust a dataset's annotations with a trained agent.
    Adjust {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Parallel workers; 1 keeps the run single-threaded.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Adjust a dataset's annotations by greedy one-pixel grid search.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run config; only its `oracle` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Adjust externally produced detections as pseudo-labels.
    Pseudo {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory holding the images the detections refer to.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare two adjustment reports: starting confidence of `--before`
    /// against final confidence of `--after`.
    Eval {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        label: Option<String>,
    },
    /// Write the per-step trajectory of one annotation as JSON lines.
    Trace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        /// Which of the image's annotations to trace.
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
}

const META_ENV: &str = "env";
const META_ORACLE: &str = "oracle";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn metadata(cfg: &RunConfig) -> Result<Metadata> {
    let mut meta = Metadata::new();
    meta.insert(META_ENV.into(), serde_json::to_string(&cfg.env)?);
    meta.insert(META_ORACLE.into(), serde_json::to_string(&cfg.oracle)?);
    meta.insert("trainer.seed".into(), cfg.trainer.seed.to_string());
    Ok(meta)
}

/// Network plus the episode and oracle settings it was trained with.
fn load_agent(path: &Path) -> Result<(QNetwork, EpisodeConfig, OracleConfig)> {
    let (net, meta) = load_checkpoint(path)?;
    let section = |key: &str| {
        meta.get(key)
            .ok_or_else(|| PipelineError::Config(format!("checkpoint lacks `{key}` settings")))
    };
    let env: EpisodeConfig = serde_json::from_str(section(META_ENV)?)
        .map_err(|e| PipelineError::Config(format!("checkpoint env settings: {e}")))?;
    let oracle: OracleConfig = serde_json::from_str(section(META_ORACLE)?)
        .map_err(|e| PipelineError::Config(format!("checkpoint oracle settings: {e}")))?;
    Ok((net, env, oracle))
}

fn checkpoint_path(out: &Path, episode: usize) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".ep{episode}"));
    out.with_file_name(name)
}

fn finish_adjust(
    out_records: &[boxforge::pipeline::AnnotationRecord],
    report: &AdjustReport,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<()> {
    save_annotations(out_records, out)?;
    if let Some(p) = report_path {
        write_json(report, p)?;
    }
    let s = &report.summary;
    eprintln!(
        "{}: {} records, conf {:.4} -> {:.4} (gain {:+.4}), improved {:.1}%, {:.2} steps",
        report.method,
        s.records,
        s.mean_conf_before,
        s.mean_conf_after,
        s.mean_conf_gain,
        100.0 * s.improved_fraction,
        s.mean_steps
    );
    if !report.missing_images.is_empty() {
        eprintln!("warning: {} records without an image passed through unchanged", report.missing_images.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            count,
            seed,
            perturb,
            out,
        } => {
            let ds = Dataset::generate(count, seed, perturb)?;
            ds.write(&out)?;
            eprintln!("wrote {count} scenes ({} held out) to {}", ds.test_ids.len(), out.display());
        }
        Cmd::Train {
            data,
            config,
            out,
            metrics,
            split,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_env_overrides()?;
            let ds = Dataset::load(&data)?;
            let scenes = ds.scene_list(split);
            let mut oracle = cfg.oracle.build()?;
            let meta = metadata(&cfg)?;
            let every = cfg.trainer.checkpoint_every;
            let (net, m) = train(&cfg.trainer, &cfg.env, &cfg.net, &scenes, &mut oracle, |rec, net| {
                if every > 0 && (rec.episode + 1) % every == 0 {
                    save_checkpoint(net, &meta, checkpoint_path(&out, rec.episode + 1))?;
                }
                Ok(())
            })?;
            save_checkpoint(&net, &meta, &out)?;
            if let Some(p) = metrics {
                let mut w = create(&p)?;
                m.write_jsonl(&mut w)?;
                w.flush()?;
            }
            eprintln!(
                "trained {} episodes ({} env steps, {} gradient steps), checkpoint at {}",
                m.episodes.len(),
                m.env_steps,
                m.grad_steps,
                out.display()
            );
        }
        Cmd::Adjust {
            data,
            ckpt,
            out,
            report,
            workers,
            split,
        } => {
            let (net, env, ocfg) = load_agent(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let records = ds.annotations_in(split);
            let adjuster = Adjuster::Agent { net: &net, cfg: env };
            let (adjusted, rep) = if workers > 1 {
                adjust_dataset_parallel(&adjuster, &records, &ds.scenes, workers, || ocfg.build())?
            } else {
                adjust_dataset(&adjuster, &records, &ds.scenes, &mut ocfg.build()?)?
            };
            finish_adjust(&adjusted, &rep, &out, report.as_deref())?;
        }
        Cmd::Grid {
            data,
            rounds,
            out,
            report,
            config,
            split,
        } => {
            let ocfg = match config {
                Some(p) => RunConfig::load(p)?.oracle,
                None => OracleConfig::default(),
            };
            let ds = Dataset::load(&data)?;
            let records = ds.annotations_in(split);
            let (adjusted, rep) = adjust_dataset(&Adjuster::Grid { rounds }, &records, &ds.scenes, &mut ocfg.build()?)?;
            finish_adjust(&adjusted, &rep, &out, report.as_deref())?;
        }
        Cmd::Pseudo {
            detections,
            ckpt,
            out,
            data,
            report,
        } => {
            let (net, env, ocfg) = load_agent(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let (adjusted, rep) = pseudo_label_flow(&detections, &net, &env, &ds.scenes, &mut ocfg.build()?)?;
            finish_adjust(&adjusted, &rep, &out, report.as_deref())?;
        }
        Cmd::Eval {
            before,
            after,
            json,
            label,
        } => {
            let read = |p: &Path| -> Result<AdjustReport> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) };
            let (b, a) = (read(&before)?, read(&after)?);
            let label = label.unwrap_or_else(|| a.method.clone());
            let summary = eval_report(&label, &ScoreSet::before_of(&b), &ScoreSet::after_of(&a))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", to_tsv(&summary));
            }
        }
        Cmd::Trace {
            data,
            ckpt,
            id,
            out,
            record,
        } => {
            let (net, env, ocfg) = load_agent(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let scene: &SceneData = ds.scenes.get(&id).ok_or_else(|| PipelineError::MissingImage(id.clone()))?;
            let r = ds
                .annotations
                .iter()
                .filter(|r| r.image_id == id)
                .nth(record)
                .ok_or_else(|| PipelineError::InvalidArgument(format!("{id} has no annotation #{record}")))?;
            let adj = adjust_box(&net, scene, r.quad, gt_length(r), &env, &mut ocfg.build()?)?;
            let mut w = create(&out)?;
            write_trace_jsonl(&adj.trace, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
