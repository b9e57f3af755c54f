use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use morse_core::checkpoint::Checkpoint;
use morse_core::eval::{
    adaptation_noise_seed, evaluate_embeddings, run_ablation, sparsity_sweep, AblationVariant, EvalReport, Sides,
};
use morse_core::kg::{SOURCE_TRAIN, TARGET_TEST, TARGET_TRAIN, TARGET_VALID};
use morse_core::sampler::{pool_stats, sample_pool, write_pool, PoolKind};
use morse_core::synthetic::{write_benchmark, BenchmarkShape};
use morse_core::train::{adapt_freeze_seeded, finetune, meta_train_observed, TrainLog};
use morse_core::{InductiveSplit, ModelParams, ScoreKind, TargetData, Vocab};
use serde::Serialize;

use crate::config::{Budget, RunConfig};
use crate::error::CliError;
use crate::output::{Manifest, OutDir};

#[derive(Debug, Parser)]
#[command(name = "morse", version, about = "Inductive knowledge graph embedding via meta-knowledge transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the meta-training task pool from the source graph and dump it.
    SampleTasks(RunArgs),
    /// Meta-train on the source graph and write a checkpoint.
    MetaTrain(RunArgs),
    /// Evaluate a checkpoint on the target graph, optionally fine-tuning first.
    Evaluate(EvaluateArgs),
    /// Fine-tune a checkpoint on the target graph, then evaluate frozen and fine-tuned.
    Finetune(FinetuneArgs),
    /// Train and evaluate the full model and its ablated variants.
    Ablate(AblateArgs),
    /// Frozen evaluation on increasingly sparse target graphs.
    SparsitySweep(SweepArgs),
    /// Print a model's configuration and parameter counts as JSON.
    ModelInfo(ModelInfoArgs),
    /// Write a deterministic WordNet-like benchmark directory.
    SyntheticBenchmark(SyntheticArgs),
}

/// Flags shared by every command that resolves a run configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub budget: Option<Budget>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub bases: Option<usize>,
    #[arg(long, value_parser = parse_score_kind)]
    pub score_kind: Option<ScoreKind>,
    #[arg(long)]
    pub inverse_edges: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training task pool size.
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub validation_tasks: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Negatives per positive during training.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Candidates per ranked record during evaluation.
    #[arg(long)]
    pub eval_negatives: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, value_parser = parse_sides)]
    pub sides: Option<Sides>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Benchmark directory with source/ and target/ triple files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fine-tune for this many epochs before the second evaluation; 0 evaluates frozen only.
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "finetune-epochs", required = true)]
    pub finetune_epochs: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Subset of variants to run; the default runs all four.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<AblationVariant>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Trained checkpoint; without one the command meta-trains first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub keep_ratios: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ModelInfoArgs {
    /// Describe a trained checkpoint; otherwise describe a fresh model from the configuration.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Relation count for a fresh model.
    #[arg(long, default_value_t = 9)]
    pub relations: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_score_kind(s: &str) -> Result<ScoreKind, String> {
    s.parse().map_err(|e: morse_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse().map_err(|e: morse_core::Error| e.to_string())
}

fn parse_sides(s: &str) -> Result<Sides, String> {
    match s {
        "head" => Ok(Sides::Head),
        "tail" => Ok(Sides::Tail),
        "both" => Ok(Sides::Both),
        _ => Err(format!("expected head, tail or both, got `{s}`")),
    }
}

impl ConfigArgs {
    /// Defaults, then file, then flags; validated before returning.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::resolve(self.config.as_deref(), self.budget)?;
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.seed => c.seed);
        set!(self.dim => c.model.dim);
        set!(self.layers => c.model.layers);
        set!(self.bases => c.model.num_bases);
        set!(self.score_kind => c.model.score_kind);
        if self.inverse_edges {
            c.model.add_inverse_edges = true;
        }
        set!(self.epochs => c.train.epochs);
        set!(self.tasks => c.train.task_pool_size);
        set!(self.validation_tasks => c.train.validation_tasks);
        set!(self.batch_size => c.train.batch_size);
        set!(self.lr => c.train.learning_rate);
        set!(self.gamma => c.loss.gamma);
        set!(self.negatives => c.loss.k);
        set!(self.eval_negatives => c.eval.num_negatives);
        set!(self.repeats => c.eval.repeats);
        set!(self.sides => c.eval.sides);
        if self.workers == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SampleTasks(a) => sample_tasks(&a),
        Command::MetaTrain(a) => train_command(&a),
        Command::Evaluate(a) => evaluate_command(&a.checkpoint, &a.data, &a.out, a.finetune_epochs, &a.config, "evaluate"),
        Command::Finetune(a) => {
            evaluate_command(&a.checkpoint, &a.data, &a.out, Some(a.finetune_epochs), &a.config, "finetune")
        }
        Command::Ablate(a) => ablate(&a),
        Command::SparsitySweep(a) => sweep(&a),
        Command::ModelInfo(a) => model_info(&a),
        Command::SyntheticBenchmark(a) => {
            write_benchmark(&a.out, &BenchmarkShape::wordnet_v1(), a.seed)?;
            eprintln!("wrote synthetic benchmark to {}", a.out.display());
            Ok(())
        }
    }
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[morse] {}", msg.as_ref());
}

fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    [SOURCE_TRAIN, TARGET_TRAIN, TARGET_VALID, TARGET_TEST]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}

/// Fails fast on a missing directory; nothing has been computed yet.
fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(morse_core::Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        )
        .into())
    }
}

fn load_split(dir: &Path) -> Result<InductiveSplit, CliError> {
    require_dir(dir)?;
    let split = InductiveSplit::load(dir)?;
    progress(format!(
        "source: {} entities, {} triples, {} relations; target: {} entities, {} triples, {} test",
        split.source.entity_count(),
        split.source.triples().len(),
        split.source.relation_count(),
        split.target_support.entity_count(),
        split.target_support.triples().len(),
        split.target_test.len()
    ));
    Ok(split)
}

fn write_manifest(out: &OutDir, command: &str, config: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    out.write_json("manifest.json", &Manifest::new(command, config, inputs)?)?;
    Ok(())
}

fn sample_tasks(a: &RunArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    let split = load_split(&a.data)?;
    let sampler = config.train_config().task_sampler();
    let t0 = Instant::now();
    let tasks = sample_pool(
        &split.source,
        &sampler,
        PoolKind::Train,
        config.train.task_pool_size,
        a.config.workers,
    )?;
    for task in &tasks {
        task.check()?;
    }
    let stats = pool_stats(&tasks);
    progress(format!("sampled {} tasks in {:.1}s", tasks.len(), t0.elapsed().as_secs_f64()));

    let out = OutDir::create(&a.out)?;
    let mut buf = Vec::new();
    write_pool(&mut buf, &tasks, split.source.relation_labels()).expect("in-memory write");
    out.write("tasks.tsv", buf)?;
    out.write_json("pool_stats.json", &stats)?;
    write_manifest(&out, "sample-tasks", &config, &dataset_files(&a.data))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    parameter_count: usize,
    source_entities: usize,
    source_triples: usize,
    epoch_losses: &'a [f64],
    validation_mrr: &'a [f64],
    selected_epoch: usize,
    steps: usize,
}

/// Meta-train under `config`, reporting each epoch on stderr.
fn train_model(
    split: &InductiveSplit,
    config: &RunConfig,
    workers: usize,
    label: &str,
) -> Result<(ModelParams, TrainLog), CliError> {
    let model = config.model_config(split.source.relation_count());
    model.validate()?;
    let t0 = Instant::now();
    let (params, log) = meta_train_observed(&split.source, &model, &config.train_config(), workers, |epoch, log| {
        progress(format!(
            "{label} epoch {epoch}/{}: loss {:.4}, validation MRR {:.4} ({:.0}s)",
            config.train.epochs,
            log.epoch_losses.last().copied().unwrap_or(f64::NAN),
            log.validation_mrr.last().copied().unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        ))
    })?;
    Ok((params, log))
}

fn write_training(out: &OutDir, split: &InductiveSplit, params: &ModelParams, log: &TrainLog, prefix: &str) -> Result<(), CliError> {
    let checkpoint = Checkpoint {
        params: params.clone(),
        relation_labels: split.source.relation_labels().to_vec(),
    };
    out.write(&format!("{prefix}checkpoint.json"), checkpoint.to_json()?)?;
    out.write(&format!("{prefix}train_steps.csv"), log.steps_csv())?;
    out.write_json(
        &format!("{prefix}train_summary.json"),
        &TrainSummary {
            parameter_count: params.parameter_count(),
            source_entities: split.source.entity_count(),
            source_triples: split.source.triples().len(),
            epoch_losses: &log.epoch_losses,
            validation_mrr: &log.validation_mrr,
            selected_epoch: log.selected_epoch,
            steps: log.step_losses.len(),
        },
    )?;
    Ok(())
}

fn train_command(a: &RunArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    let split = load_split(&a.data)?;
    let (params, log) = train_model(&split, &config, a.config.workers, "meta-train")?;
    let out = OutDir::create(&a.out)?;
    write_training(&out, &split, &params, &log, "")?;
    write_manifest(&out, "meta-train", &config, &dataset_files(&a.data))
}

fn frozen_report(
    params: &ModelParams,
    target: &TargetData,
    config: &RunConfig,
    label: &str,
    workers: usize,
) -> Result<EvalReport, CliError> {
    let emb = adapt_freeze_seeded(params, &target.support, adaptation_noise_seed(config.seed))?;
    let mut report = evaluate_embeddings(&emb, params, &target.test, &config.protocol(), label, workers)?;
    report.excluded_triples += target.dropped_test;
    progress(format!(
        "{label}: MRR {:.4}, Hits@10 {:.4} over {} records",
        report.mrr,
        report.hits_at(10).unwrap_or(f64::NAN),
        report.records
    ));
    Ok(report)
}

fn evaluate_command(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    finetune_epochs: Option<usize>,
    args: &ConfigArgs,
    command: &str,
) -> Result<(), CliError> {
    let mut config = args.resolve()?;
    if let Some(e) = finetune_epochs {
        config.finetune.epochs = e;
    }
    require_dir(data)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let target = TargetData::load(data, &Vocab::from_labels(ckpt.relation_labels.iter())?)?;
    ckpt.check_relations(target.support.relation_labels())?;

    let mut reports = vec![frozen_report(&ckpt.params, &target, &config, "frozen", args.workers)?];
    let out_dir = OutDir::create(out)?;
    if config.finetune.epochs > 0 {
        let t0 = Instant::now();
        let (tuned, log) = finetune(&ckpt.params, &target.support, &config.finetune_config())?;
        progress(format!(
            "fine-tuned {} epochs in {:.1}s, final loss {:.4}",
            config.finetune.epochs,
            t0.elapsed().as_secs_f64(),
            log.epoch_losses.last().copied().unwrap_or(f64::NAN)
        ));
        reports.push(frozen_report(&tuned, &target, &config, "finetuned", args.workers)?);
        out_dir.write("finetune_steps.csv", log.steps_csv())?;
    }
    out_dir.write_json("eval_report.json", &reports)?;
    let mut inputs = vec![checkpoint.to_owned()];
    inputs.extend(dataset_files(data).into_iter().skip(1));
    write_manifest(&out_dir, command, &config, &inputs)
}

fn hits_header(levels: &[usize]) -> String {
    levels.iter().map(|n| format!(",hits@{n}")).collect()
}

fn hits_cells(report: &EvalReport, levels: &[usize]) -> String {
    levels
        .iter()
        .map(|n| format!(",{}", report.hits_at(*n).unwrap_or(f64::NAN)))
        .collect()
}

#[derive(Serialize)]
struct AblationEntry<'a> {
    rank: usize,
    variant: &'static str,
    selected_epoch: usize,
    epoch_losses: &'a [f64],
    validation_mrr: &'a [f64],
    report: &'a EvalReport,
}

fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let config = a.run.config.resolve()?;
    let split = load_split(&a.run.data)?;
    let variants = if a.variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let model = config.model_config(split.source.relation_count());
    model.validate()?;
    let out = OutDir::create(&a.run.out)?;
    let mut outcomes = Vec::new();
    for v in variants {
        let t0 = Instant::now();
        let outcome = run_ablation(v, &split, &model, &config.train_config(), &config.protocol(), a.run.config.workers)?;
        progress(format!(
            "{v}: MRR {:.4}, Hits@10 {:.4} ({:.0}s)",
            outcome.report.mrr,
            outcome.report.hits_at(10).unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        ));
        write_training(&out, &split, &outcome.params, &outcome.log, &format!("{v}_"))?;
        outcomes.push(outcome);
    }
    // Rank by MRR, best first; equal MRRs keep the listed order.
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&i, &j| outcomes[j].report.mrr.total_cmp(&outcomes[i].report.mrr));

    let levels = &config.eval.hits_levels;
    let mut csv = format!("rank,variant,mrr{},selected_epoch\n", hits_header(levels));
    let mut entries = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let o = &outcomes[i];
        csv.push_str(&format!(
            "{},{},{}{},{}\n",
            rank + 1,
            o.variant,
            o.report.mrr,
            hits_cells(&o.report, levels),
            o.log.selected_epoch
        ));
        entries.push(AblationEntry {
            rank: rank + 1,
            variant: o.variant.name(),
            selected_epoch: o.log.selected_epoch,
            epoch_losses: &o.log.epoch_losses,
            validation_mrr: &o.log.validation_mrr,
            report: &o.report,
        });
    }
    out.write("ablation.csv", csv)?;
    out.write_json("ablation.json", &entries)?;
    write_manifest(&out, "ablate", &config, &dataset_files(&a.run.data))
}

fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut config = a.run.config.resolve()?;
    if !a.keep_ratios.is_empty() {
        config.sparsity.keep_ratios = a.keep_ratios.clone();
        config.validate()?;
    }
    let split = load_split(&a.run.data)?;
    let out = OutDir::create(&a.run.out)?;
    let mut inputs = dataset_files(&a.run.data);
    let params = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_relations(split.source.relation_labels())?;
            inputs.insert(0, path.clone());
            ckpt.params
        }
        None => {
            let (params, log) = train_model(&split, &config, a.run.config.workers, "meta-train")?;
            write_training(&out, &split, &params, &log, "")?;
            params
        }
    };
    let rows = sparsity_sweep(
        &params,
        &split,
        &config.sparsity.keep_ratios,
        &config.protocol(),
        config.seed,
        a.run.config.workers,
    )?;
    let levels = &config.eval.hits_levels;
    let mut csv = format!(
        "keep_ratio,support_triples,entities,test_triples,excluded_test,mrr{}\n",
        hits_header(levels)
    );
    for row in &rows {
        progress(format!(
            "keep {}: {} triples, Hits@10 {:.4}",
            row.keep_ratio,
            row.support_triples,
            row.report.hits_at(10).unwrap_or(f64::NAN)
        ));
        csv.push_str(&format!(
            "{},{},{},{},{},{}{}\n",
            row.keep_ratio,
            row.support_triples,
            row.entities,
            row.report.test_triples,
            row.excluded_test,
            row.report.mrr,
            hits_cells(&row.report, levels)
        ));
    }
    out.write("sparsity.csv", csv)?;
    out.write_json("sparsity.json", &rows)?;
    write_manifest(&out, "sparsity-sweep", &config, &inputs)
}

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    parameters: usize,
}

#[derive(Serialize)]
struct ModelInfo {
    model: morse_core::ModelConfig,
    parameter_count: usize,
    tensors: Vec<TensorInfo>,
}

fn model_info(a: &ModelInfoArgs) -> Result<(), CliError> {
    let params = match &a.checkpoint {
        Some(path) => Checkpoint::load(path)?.params,
        None => {
            let config = a.config.resolve()?;
            let model = config.model_config(a.relations);
            model.validate()?;
            morse_core::model::init_params(&model, &mut morse_core::rng::seeded(config.seed))?
        }
    };
    let info = ModelInfo {
        model: params.config.clone(),
        parameter_count: params.parameter_count(),
        tensors: params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                shape: t.shape().to_vec(),
                parameters: t.numel(),
            })
            .collect(),
    };
    // A closed pipe on stdout is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&info).expect("info serializes"));
    Ok(())
}
