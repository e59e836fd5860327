//! Command-line surface. Exit codes: 0 success, 1 failed checks, 2 bad
//! arguments or runtime errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datastore::checkpoint::{read_checkpoint, write_checkpoint};
use crate::datastore::names::read_names;
use crate::datastore::synth::{synth_dataset, SynthSpec};
use crate::datastore::{
    at_path, atomic_write, load_language_table, read_labels, read_matrix, DatasetBundle, Dtype,
    ExperimentConfig,
};
use crate::error::{Error, Result};
use crate::eval::{alignment_divergence, evaluate, semantic_retrieval_profile};
use crate::pseudolabel::{class_pseudolabels, sample_pseudolabels, AssignmentLevel, PosteriorMatrix};
use crate::trainer::gradcheck::{gradcheck, DEFAULT_INSTANCES, DEFAULT_STEP};
use crate::trainer::train;

/// Tolerance above which `gradcheck` reports failure.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "langguide", version, about = "Language-guided metric learning over frozen features")]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an embedding head from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset bundle.
    Eval(EvalArgs),
    /// Assign top-k pretrain-class pseudolabels from classifier posteriors.
    Pseudolabel(PseudolabelArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Semantic retrieval profile and language alignment of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Write a synthetic hierarchy fixture.
    Synth(SynthArgs),
}

#[derive(clap::Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Level {
    Class,
    Sample,
}

#[derive(clap::Args, Debug, Serialize)]
struct PseudolabelArgs {
    #[arg(long)]
    posteriors: PathBuf,
    /// Pretrain class names; defaults to pretrain_names.txt next to the posteriors.
    #[arg(long)]
    names: Option<PathBuf>,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Level::Class)]
    level: Level,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(clap::Args, Debug, Serialize)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Language table matrix file (names read from the `.names` sibling);
    /// defaults to the bundle's `lang_class` table.
    #[arg(long)]
    lang: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    top_n: usize,
    #[arg(long, default_value_t = 5)]
    top_classes: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(clap::Args, Debug, Serialize)]
struct SynthArgs {
    /// Generator parameters; unset fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

enum Outcome {
    Ok,
    ChecksFailed,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::ChecksFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pseudolabel(a) => cmd_pseudolabel(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn write_run_record<A: Serialize>(out: &Path, command: &str, args: &A) -> Result<()> {
    let mut text = format!("command = {command:?}\n\n[args]\n");
    text.push_str(&toml::to_string(args).map_err(|e| Error::Config(e.to_string()))?);
    atomic_write(&out.join("run.toml"), text.as_bytes())
}

fn cmd_train(a: TrainArgs) -> Result<Outcome> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let data = DatasetBundle::load(&cfg.data)?;
    fs::create_dir_all(&cfg.output).map_err(at_path(&cfg.output))?;
    atomic_write(&cfg.output.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let out = train(&cfg.train, &data)?;
    write_checkpoint(&cfg.output.join("checkpoint.lgck"), &out.checkpoint, &cfg.train)?;
    write_checkpoint(&cfg.output.join("last.lgck"), &out.last, &cfg.train)?;
    atomic_write(&cfg.output.join("history.csv"), out.history.to_csv().as_bytes())?;
    log::info!("best epoch {} of {}", out.best_epoch, out.history.epochs.len());
    if let Some(test) = &cfg.test_data {
        let test = DatasetBundle::load(test)?;
        let emb = out.checkpoint.embed(&test.features)?;
        let report = evaluate(&emb, &test.labels, &[1, 2, 4, 8], cfg.train.seed)?;
        atomic_write(&cfg.output.join("test_eval.toml"), report.to_toml().as_bytes())?;
        println!("test R@1 {:.4}", report.recall_at(1).unwrap_or(f64::NAN));
    }
    Ok(Outcome::Ok)
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let (head, _) = read_checkpoint(&a.checkpoint)?;
    let data = DatasetBundle::load(&a.data)?;
    let emb = head.embed(&data.features)?;
    let report = evaluate(&emb, &data.labels, &a.ks, a.seed)?;
    fs::create_dir_all(&a.out).map_err(at_path(&a.out))?;
    atomic_write(&a.out.join("eval.toml"), report.to_toml().as_bytes())?;
    write_run_record(&a.out, "eval", &a)?;
    print!("{}", report.to_toml());
    Ok(Outcome::Ok)
}

fn cmd_pseudolabel(a: PseudolabelArgs) -> Result<Outcome> {
    let names_path = a.names.clone().unwrap_or_else(|| {
        a.posteriors
            .parent()
            .unwrap_or(Path::new("."))
            .join("pretrain_names.txt")
    });
    let names = read_names(&names_path)?
        .iter()
        .map(|n| crate::datastore::clean_name(n))
        .collect();
    let post = PosteriorMatrix::new(read_matrix(&a.posteriors)?, names)?;
    let assign = match a.level {
        Level::Class => {
            let labels = read_labels(&a.labels)?;
            class_pseudolabels(&post, &labels, a.k)?
        }
        Level::Sample => sample_pseudolabels(&post, a.k)?,
    };
    debug_assert!(matches!(assign.level, AssignmentLevel::Class | AssignmentLevel::Sample));
    fs::create_dir_all(&a.out).map_err(at_path(&a.out))?;
    atomic_write(&a.out.join("pseudolabels.tsv"), assign.to_report().as_bytes())?;
    write_run_record(&a.out, "pseudolabel", &a)?;
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let report = gradcheck(a.loss.as_deref(), a.instances, a.step, a.seed)?;
    print!("{}", report.to_table());
    Ok(if report.passes(GRADCHECK_TOLERANCE) {
        Outcome::Ok
    } else {
        Outcome::ChecksFailed
    })
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<Outcome> {
    let (head, _) = read_checkpoint(&a.checkpoint)?;
    let data = DatasetBundle::load(&a.data)?;
    let table = match &a.lang {
        Some(p) => load_language_table(p, &p.with_extension("names"), data.primer.clone())?,
        None => data
            .class_tables
            .get("lang_class")
            .cloned()
            .ok_or_else(|| Error::GuidanceInputMissing("lang_class table in bundle".into()))?,
    };
    let emb = head.embed(&data.features)?;
    let profile = semantic_retrieval_profile(&emb, &data.labels, &data.class_names, &table, a.top_n, a.top_classes)?;
    let div = alignment_divergence(&emb, &data.labels, &data.class_names, &table, a.gamma, a.temperature)?;
    fs::create_dir_all(&a.out).map_err(at_path(&a.out))?;
    atomic_write(&a.out.join("profile.csv"), profile.to_csv().as_bytes())?;
    atomic_write(
        &a.out.join("alignment.toml"),
        format!("alignment_divergence = {div:e}\n").as_bytes(),
    )?;
    write_run_record(&a.out, "analyze", &a)?;
    println!("alignment_divergence {div:.6}");
    Ok(Outcome::Ok)
}

fn cmd_synth(a: SynthArgs) -> Result<Outcome> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(at_path(p))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                detail: e.to_string(),
            })?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let out = synth_dataset(&spec)?;
    out.train.save(&a.out.join("train"), Dtype::F32)?;
    out.test.save(&a.out.join("test"), Dtype::F32)?;
    let mut text = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
    text.push_str(&format!("\n# hierarchy_agreement = {:.4}\n", out.hierarchy_agreement));
    atomic_write(&a.out.join("synth.toml"), text.as_bytes())?;
    write_run_record(&a.out, "synth", &a)?;
    println!(
        "wrote {} train and {} test samples to {}",
        out.train.len(),
        out.test.len(),
        a.out.display()
    );
    Ok(Outcome::Ok)
}
