//! Command-line interface: dataset synthesis, training, evaluation,
//! cluster reporting and embedding export.
//!
//! Exit codes: 0 success, 2 for configuration/usage errors, 1 for runtime
//! failures. `KMAP_SEED` overrides the configured seed everywhere.

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, synth, Split};
use crate::error::{KmapError, Result};
use crate::train::{self, Trainer};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "kmap", version, about = "Stateful multi-task student modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted behavioral archetypes.
    Synth {
        /// JSON file with the synthetic-dataset parameters.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for events.jsonl and labels.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        /// Training configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Hyperparameter preset (`ednet` or `junyi`) used when no config
        /// file is given; flags in the config file win otherwise.
        #[arg(long)]
        preset: Option<String>,
        /// Events JSONL; overrides the `data` field of the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Drop students with fewer events than this.
        #[arg(long, default_value_t = 0)]
        min_events: usize,
    },
    /// Evaluate a checkpoint: ranking metrics per material type plus AUCs.
    Eval(EvalArgs),
    /// Report cluster assignments and centroid distances per student.
    Clusters(AnalysisArgs),
    /// Export mean student embeddings and behavioral summaries as CSV.
    ExportEmbeddings(AnalysisArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to rank: `test` or `train`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Override the number of negative candidates.
    #[arg(long)]
    k_eval: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    min_events: usize,
}

#[derive(Args)]
struct AnalysisArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    min_events: usize,
}

/// True for errors caused by bad input rather than a failing run.
fn is_config_error(err: &KmapError) -> bool {
    matches!(
        err,
        KmapError::Invalid(_) | KmapError::Parse { .. } | KmapError::Json(_) | KmapError::Io(_)
    )
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with success
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if is_config_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Train {
            config,
            preset,
            data,
            out,
            min_events,
        } => cmd_train(config.as_deref(), preset.as_deref(), data.as_deref(), &out, min_events),
        Command::Eval(args) => cmd_eval(args),
        Command::Clusters(args) => cmd_clusters(args),
        Command::ExportEmbeddings(args) => cmd_export(args),
    }
}

fn write_or_stdout(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
        }
    }
    Ok(())
}

fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let mut spec: synth::SyntheticSpec = serde_json::from_str(&text)?;
    if let Ok(s) = std::env::var("KMAP_SEED") {
        spec.seed = s
            .parse()
            .map_err(|_| KmapError::invalid(format!("KMAP_SEED=`{s}` is not an integer")))?;
    }
    let (events, labels) = synth::generate(&spec)?;
    std::fs::create_dir_all(out_dir)?;
    data::write_events(&out_dir.join("events.jsonl"), &events)?;
    synth::write_labels(&out_dir.join("labels.csv"), &labels)?;
    eprintln!(
        "wrote {} events for {} students to {}",
        events.len(),
        spec.n_students,
        out_dir.display()
    );
    Ok(())
}

fn resolve_config(
    config_path: Option<&Path>,
    preset: Option<&str>,
    data: Option<&Path>,
) -> Result<TrainConfig> {
    let mut config = match (config_path, preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => {
            return Err(KmapError::invalid(
                "train needs --config or --preset (ednet|junyi)",
            ))
        }
    };
    if config_path.is_some() {
        if let Some(name) = preset {
            let preset_cfg = TrainConfig::preset(name)?;
            config.dims = preset_cfg.dims;
            config.lr = preset_cfg.lr;
        }
    }
    if let Some(d) = data {
        config.data = Some(d.display().to_string());
    }
    config.apply_env_seed()?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(
    config_path: Option<&Path>,
    preset: Option<&str>,
    data: Option<&Path>,
    out_dir: &Path,
    min_events: usize,
) -> Result<()> {
    let config = resolve_config(config_path, preset, data)?;
    let data_path = config
        .data
        .clone()
        .ok_or_else(|| KmapError::invalid("no dataset: pass --data or set `data` in the config"))?;
    let (vocab, segments) = train::load_dataset(Path::new(&data_path), &config, min_events)?;
    let summary = train::train(&config, &segments, &vocab, out_dir, |line| {
        eprintln!("{line}")
    })?;
    eprintln!(
        "finished {} epochs; checkpoint at {}",
        summary.epochs,
        out_dir.join("checkpoint.json").display()
    );
    Ok(())
}

fn load_trainer(ckpt_path: &Path, data_path: &Path, min_events: usize) -> Result<(Trainer, Vec<Vec<data::SegmentBatch>>)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut config = ckpt.config.clone();
    config.apply_env_seed()?;
    let (vocab, segments) = train::load_dataset(data_path, &config, min_events)?;
    if vocab != ckpt.vocab {
        return Err(KmapError::invalid(
            "dataset vocabulary does not match the checkpoint (different ids or ordering)",
        ));
    }
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    Ok((trainer, segments))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let split = match args.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => {
            return Err(KmapError::invalid(format!(
                "--split must be `test` or `train`, got `{other}`"
            )))
        }
    };
    let (trainer, segments) = load_trainer(&args.ckpt, &args.data, args.min_events)?;
    let k_eval = args.k_eval.unwrap_or(trainer.config.k_eval);
    let report = trainer.evaluate(&segments, split, k_eval, trainer.config.seed)?;
    let k = report.cutoff;
    let rank_json = |m: &Option<train::RankMetrics>| match m {
        Some(m) => json!({
            format!("hr@{k}"): m.hr,
            format!("ndcg@{k}"): m.ndcg,
            "mrr": m.mrr,
            "steps": m.steps,
        }),
        None => serde_json::Value::Null,
    };
    let out = json!({
        "assessed": rank_json(&report.assessed),
        "non_assessed": rank_json(&report.non_assessed),
        "auc_perf": report.auc_perf,
        "auc_type": report.auc_type,
    });
    write_or_stdout(
        args.out.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&out)?),
    )
}

fn cmd_clusters(args: AnalysisArgs) -> Result<()> {
    let (mut trainer, segments) = load_trainer(&args.ckpt, &args.data, args.min_events)?;
    let outcome = trainer.profiling_pass(&segments)?;
    let mut csv = String::from("student_id,cluster,d_ic,d_nc\n");
    for (i, &student) in outcome.students.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            trainer.vocab.student_id(student),
            outcome.assignments[i],
            outcome.d_ic[i],
            outcome.d_nc[i]
        ));
    }
    write_or_stdout(args.out.as_deref(), &csv)
}

fn cmd_export(args: AnalysisArgs) -> Result<()> {
    let (mut trainer, segments) = load_trainer(&args.ckpt, &args.data, args.min_events)?;
    let outcome = trainer.profiling_pass(&segments)?;
    let d_s = outcome.v_bar[0].len();
    let d_h = outcome.b_bar[0].len();
    let mut header = String::from("student_id");
    for i in 1..=d_s {
        header.push_str(&format!(",v_{i}"));
    }
    for i in 1..=d_h {
        header.push_str(&format!(",b_{i}"));
    }
    header.push('\n');
    let mut csv = header;
    for (i, &student) in outcome.students.iter().enumerate() {
        csv.push_str(trainer.vocab.student_id(student));
        for v in &outcome.v_bar[i] {
            csv.push_str(&format!(",{v:.9}"));
        }
        for b in &outcome.b_bar[i] {
            csv.push_str(&format!(",{b:.9}"));
        }
        csv.push('\n');
    }
    write_or_stdout(args.out.as_deref(), &csv)
}
