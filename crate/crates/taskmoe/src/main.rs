//! Command-line entry point: train, adapt, analyze.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use taskmoe::analysis::{
    arg, correlate_routes, run_disable_experiment, CorrelationReport, DisableMode, DisablePlan,
    RouteLog,
};
use taskmoe::checkpoint::Checkpoint;
use taskmoe::corpus::{
    build_feature_table, few_shot_subsample, generate_suite, partition, MetaPartition, SuiteSpec,
    TaskDataset, Vocab,
};
use taskmoe::error::{Error, Result};
use taskmoe::model::{Model, ModelConfig};
use taskmoe::repr::{
    fisher_pca_reprs, ft_text_emb, random_repr, text_emb, FisherConfig, Provenance, TextMode,
};
use taskmoe::routing::{
    export_routes, routes_from_matrix, select_tensor, Mode, RouterConfig, RouterNetwork,
    RouterVariant, SelectionFn, TaskEmbeddingTable,
};
use taskmoe::rngutil::{derived_seed, stream_rng, Stream};
use taskmoe::training::{
    adapt_few_shot, eval_zero_shot, grid_fine_tune, restore_state, state_checkpoint,
    train_one_stage, train_two_stage, AdaptConfig, BaselineMode, Stage, TrainConfig,
};
use taskmoe::Tensor64;

#[derive(Parser)]
#[command(name = "taskmoe", about = "Task-level mixture-of-experts trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a task-MoE model on a synthetic (or ingested) task suite.
    Train(TrainArgs),
    /// Adapt a trained checkpoint to held-out tasks (few-shot or zero-shot).
    Adapt(AdaptArgs),
    /// Produce correlation, disabling, or dynamics reports for a run.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// vanilla | inst1 | inst2 | task1 | task2 | average
    #[arg(long)]
    baseline: Option<String>,
    /// one | two
    #[arg(long)]
    stage: Option<String>,
    /// random | textavg | textbos | fttext | fisher
    #[arg(long)]
    repr: Option<String>,
    #[arg(long, default_value_t = false)]
    freeze_repr: bool,
    /// Reserved worker cap; runs are single-threaded for bit-exactness.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Validate the config and build the suite, then run 0 steps.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// fewshot | zeroshot
    #[arg(long)]
    mode: String,
    #[arg(long, default_value = "runs/adapt")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the grid-search step count.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// correlate | disable | dynamics
    #[arg(long)]
    which: String,
    #[arg(long, default_value = "runs/analyze")]
    out: PathBuf,
    /// Target feature for disabling plans.
    #[arg(long)]
    feature: Option<String>,
    /// Cumulative number of experts to disable.
    #[arg(long, default_value_t = 3)]
    topk: usize,
    /// top | least | random
    #[arg(long, default_value = "top")]
    mode: String,
    /// Route-log JSON written by `train` (defaults next to the checkpoint).
    #[arg(long)]
    route_log: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    permutations: usize,
    #[arg(long, default_value_t = 0.01)]
    p_threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Full run configuration; every field has a default so `{}` is valid.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    router_variant: RouterVariant,
    router_heads: usize,
    repr_dim: usize,
    repr: String,
    train: TrainConfig,
    adapt: AdaptConfig,
    suite: SuiteSpec,
    n_meta_test: usize,
    fisher: FisherConfig,
    ft_steps: usize,
    ft_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            router_variant: RouterVariant::Mlp,
            router_heads: 4,
            repr_dim: 64,
            repr: "random".into(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            suite: SuiteSpec::default(),
            n_meta_test: 6,
            fisher: FisherConfig::default(),
            ft_steps: 50,
            ft_lr: 1e-3,
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
    inputs: Vec<(PathBuf, String)>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn write_manifest(manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(&manifest.out)?;
    std::fs::write(
        manifest.out.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

fn parse_baseline(s: &str) -> Result<BaselineMode> {
    match s {
        "vanilla" => Ok(BaselineMode::Vanilla),
        "inst1" => Ok(BaselineMode::InstRandomK(1)),
        "inst2" => Ok(BaselineMode::InstRandomK(2)),
        "task1" => Ok(BaselineMode::TaskRandomK(1)),
        "task2" => Ok(BaselineMode::TaskRandomK(2)),
        "average" => Ok(BaselineMode::Average),
        other => Err(Error::config(format!("unknown baseline '{other}'"))),
    }
}

fn parse_provenance(s: &str) -> Result<Provenance> {
    match s {
        "random" => Ok(Provenance::Random),
        "textavg" => Ok(Provenance::TextEmbAvg),
        "textbos" => Ok(Provenance::TextEmbBos),
        "fttext" => Ok(Provenance::FtTextEmbAvg),
        "fisher" => Ok(Provenance::FisherPca),
        other => Err(Error::config(format!("unknown representation '{other}'"))),
    }
}

fn build_suite(cfg: &RunConfig, seed: u64) -> Result<(Vec<TaskDataset>, MetaPartition)> {
    let tasks = generate_suite(&cfg.suite, derived_seed(seed, 0x5017E))?;
    let part = partition(&tasks, cfg.n_meta_test, derived_seed(seed, 0xF00D))?;
    Ok((tasks, part))
}

fn build_representations(
    provenance: Provenance,
    cfg: &RunConfig,
    model: &Model,
    vocab: &Vocab,
    tasks: &[&TaskDataset],
    seed: u64,
) -> Result<Vec<Tensor64>> {
    let d = cfg.repr_dim;
    let uniform = model.config.uniform_routing();
    match provenance {
        Provenance::Random => (0..tasks.len())
            .map(|k| random_repr(d, derived_seed(seed, k as u64)))
            .collect(),
        Provenance::TextEmbAvg | Provenance::TextEmbBos => {
            let mode = if provenance == Provenance::TextEmbAvg {
                TextMode::Avg
            } else {
                TextMode::Bos
            };
            check_repr_dim(d, model)?;
            tasks
                .iter()
                .map(|t| text_emb(t, model, vocab, &uniform, mode))
                .collect()
        }
        Provenance::FtTextEmbAvg | Provenance::FtTextEmbBos => {
            let mode = if provenance == Provenance::FtTextEmbAvg {
                TextMode::Avg
            } else {
                TextMode::Bos
            };
            check_repr_dim(d, model)?;
            tasks
                .iter()
                .map(|t| ft_text_emb(t, model, vocab, &uniform, mode, cfg.ft_steps, cfg.ft_lr))
                .collect()
        }
        Provenance::FisherPca => Ok(fisher_pca_reprs(
            model,
            tasks,
            vocab,
            &uniform,
            d,
            &cfg.fisher,
            derived_seed(seed, 0xF15E),
        )?
        .into_iter()
        .map(|r| r.vector)
        .collect()),
    }
}

fn check_repr_dim(d: usize, model: &Model) -> Result<()> {
    if d != model.config.d_model {
        return Err(Error::config(format!(
            "text-embedding representations have dimension {} (d_model); repr_dim is {d}",
            model.config.d_model
        )));
    }
    Ok(())
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::config(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.suite.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(&args.config)?;
    if let Some(b) = &args.baseline {
        cfg.train.baseline = parse_baseline(b)?;
    }
    if let Some(s) = &args.stage {
        cfg.train.stage = match s.as_str() {
            "one" => Stage::One,
            "two" => Stage::Two,
            other => return Err(Error::config(format!("unknown stage '{other}'"))),
        };
    }
    if let Some(r) = &args.repr {
        cfg.repr = r.clone();
    }
    if args.freeze_repr {
        cfg.train.freeze_task_repr = true;
    }
    let provenance = parse_provenance(&cfg.repr)?;
    let seed = args.seed;

    write_manifest(&RunManifest {
        command: "train".into(),
        config: Some(args.config.clone()),
        seed,
        out: args.out.clone(),
        inputs: vec![(args.config.clone(), sha256_file(&args.config)?)],
    })?;

    let vocab = Vocab::core();
    if cfg.model.vocab_size < vocab.len() {
        return Err(Error::config(format!(
            "model vocab_size {} is smaller than the corpus vocabulary {}",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    let (tasks, part) = build_suite(&cfg, seed)?;
    let meta_train: Vec<&TaskDataset> = part.meta_train.iter().map(|&i| &tasks[i]).collect();
    eprintln!(
        "suite: {} tasks ({} meta-train / {} meta-test)",
        tasks.len(),
        part.meta_train.len(),
        part.meta_test.len()
    );
    if args.dry_run {
        eprintln!("dry run: config valid, no training steps executed");
        return Ok(());
    }

    let mut model = Model::new(cfg.model.clone(), &mut stream_rng(seed, Stream::Init))?;
    let pretrained_base = model.clone();
    let mut router = RouterNetwork::new(
        RouterConfig {
            variant: cfg.router_variant,
            d: cfg.repr_dim,
            n_layers: cfg.model.n_layers,
            m_experts: cfg.model.m_experts,
            n_heads: cfg.router_heads,
        },
        &mut stream_rng(derived_seed(seed, 1), Stream::Init),
    )?;
    let reprs = build_representations(
        provenance,
        &cfg,
        &model,
        &vocab,
        &meta_train,
        derived_seed(seed, 0x5EED),
    )?;
    let mut table = TaskEmbeddingTable::from_vectors(&reprs)?;

    let outcomes = match cfg.train.stage {
        Stage::One => vec![train_one_stage(
            &mut model,
            &mut router,
            &mut table,
            &meta_train,
            &vocab,
            &cfg.train,
            seed,
        )?],
        Stage::Two => {
            let (a, b) = train_two_stage(
                &mut model,
                &mut router,
                &mut table,
                &meta_train,
                &vocab,
                &cfg.train,
                &pretrained_base,
                seed,
            )?;
            vec![a, b]
        }
    };

    // Artifacts: checkpoint, route export, JSONL training log, route log.
    let tau_final = cfg.train.schedule.tau_end;
    let extra = serde_json::json!({
        "run_config": cfg,
        "seed": seed,
        "task_names": tasks.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
        "meta_train": part.meta_train,
        "meta_test": part.meta_test,
        "tau_final": tau_final,
    });
    let ck = state_checkpoint(&model, &router, &table, extra);
    ck.save(args.out.join("checkpoint.bin"))?;

    let mut log = std::fs::File::create(args.out.join("train_log.jsonl"))?;
    use std::io::Write;
    for outcome in &outcomes {
        for line in &outcome.log_lines {
            writeln!(log, "{line}")?;
        }
    }

    let final_log = &outcomes.last().unwrap().route_log;
    std::fs::write(
        args.out.join("route_log.json"),
        serde_json::to_string(final_log)?,
    )?;

    let mut entries = Vec::new();
    let baseline = taskmoe::training::BaselineRouter::new(
        cfg.train.baseline,
        cfg.model.n_layers,
        cfg.model.m_experts,
        meta_train.len(),
        seed,
    )?;
    let mut route_rng = stream_rng(derived_seed(seed, 0xE0), Stream::Routing);
    for (k, _) in meta_train.iter().enumerate() {
        let logits = router.forward_tensor(table.row(k))?;
        let weights = match baseline.weights(k, &mut route_rng)? {
            Some(w) => w,
            None => select_tensor(&logits, cfg.train.selection_fn, tau_final, None, Mode::Eval)?,
        };
        entries.extend(routes_from_matrix(k, &weights, &logits));
    }
    export_routes(
        args.out.join("routes.csv"),
        &entries,
        cfg.train.total_steps,
        tau_final,
        cfg.train.selection_fn,
    )?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

/// Reload model, router, and table from a training checkpoint.
fn load_state(path: &Path) -> Result<(Checkpoint, Model, RouterNetwork, TaskEmbeddingTable, RunConfig, u64)> {
    if !path.exists() {
        return Err(Error::config(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let extra = ck
        .header
        .get("extra")
        .cloned()
        .ok_or_else(|| Error::data("checkpoint has no run metadata"))?;
    let cfg: RunConfig = serde_json::from_value(
        extra
            .get("run_config")
            .cloned()
            .ok_or_else(|| Error::data("checkpoint has no run_config"))?,
    )?;
    let seed = extra.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);

    let mut model = Model::new(cfg.model.clone(), &mut stream_rng(seed, Stream::Init))?;
    let mut router = RouterNetwork::new(
        RouterConfig {
            variant: cfg.router_variant,
            d: cfg.repr_dim,
            n_layers: cfg.model.n_layers,
            m_experts: cfg.model.m_experts,
            n_heads: cfg.router_heads,
        },
        &mut stream_rng(derived_seed(seed, 1), Stream::Init),
    )?;
    let table_store = ck.load_store("table")?;
    let rows: Vec<Tensor64> = table_store
        .ids()
        .map(|id| {
            let t = table_store.get(id);
            Tensor64::new(vec![t.numel()], t.data().to_vec())
        })
        .collect::<Result<_>>()?;
    let mut table = TaskEmbeddingTable::from_vectors(&rows)?;
    restore_state(&ck, &mut model, &mut router, &mut table)?;
    Ok((ck, model, router, table, cfg, seed))
}

fn meta_test_tasks(
    ck: &Checkpoint,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<TaskDataset>, Vec<usize>, Vec<usize>)> {
    let (tasks, part) = build_suite(cfg, seed)?;
    let extra = ck.header.get("extra").cloned().unwrap_or_default();
    let recorded: Option<Vec<usize>> = extra
        .get("meta_test")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let meta_test = recorded.unwrap_or(part.meta_test.clone());
    Ok((tasks, part.meta_train, meta_test))
}

fn cmd_adapt(args: &AdaptArgs) -> Result<()> {
    let (ck, model, router, _table, mut cfg, train_seed) = load_state(&args.checkpoint)?;
    if let Some(s) = args.steps {
        cfg.adapt.steps = s;
        cfg.adapt.validate_every = cfg.adapt.validate_every.min(s.max(1));
        if s % cfg.adapt.validate_every != 0 {
            cfg.adapt.validate_every = s;
        }
    }
    let vocab = Vocab::core();
    let (tasks, _, meta_test) = meta_test_tasks(&ck, &cfg, train_seed)?;
    let provenance = parse_provenance(&cfg.repr)?;
    let tau = cfg.train.schedule.tau_end;

    write_manifest(&RunManifest {
        command: format!("adapt --mode {}", args.mode),
        config: None,
        seed: args.seed,
        out: args.out.clone(),
        inputs: vec![(args.checkpoint.clone(), sha256_file(&args.checkpoint)?)],
    })?;

    let mut baseline_scores = Vec::new();
    let mut method_scores = Vec::new();
    let mut rows: Vec<serde_json::Value> = Vec::new();
    for (i, &idx) in meta_test.iter().enumerate() {
        let sub = few_shot_subsample(&tasks[idx], derived_seed(args.seed, i as u64))?;
        match args.mode.as_str() {
            "fewshot" => {
                let repr = build_representations(
                    provenance,
                    &cfg,
                    &model,
                    &vocab,
                    &[&sub],
                    derived_seed(args.seed, 0x5EED + i as u64),
                )?
                .remove(0);
                let learned = adapt_few_shot(
                    &model,
                    &router,
                    &vocab,
                    &sub,
                    &repr,
                    cfg.train.selection_fn,
                    tau,
                    &cfg.adapt,
                    derived_seed(args.seed, 0xAD + i as u64),
                )?;
                let direct = grid_fine_tune(
                    &model,
                    &vocab,
                    &sub,
                    &model.config.uniform_routing(),
                    &cfg.adapt,
                    derived_seed(args.seed, 0xBA + i as u64),
                )?;
                rows.push(serde_json::json!({
                    "task": sub.name,
                    "mode": "fewshot",
                    "cells": learned.cells,
                    "best_cell": learned.best_cell,
                    "dev_metric": learned.dev_metric,
                    "test_metric": learned.test_metric,
                    "baseline_test_metric": direct.test_metric,
                }));
                baseline_scores.push((sub.name.clone(), direct.test_metric));
                method_scores.push((sub.name.clone(), learned.test_metric));
            }
            "zeroshot" => {
                if cfg.repr_dim != cfg.model.d_model {
                    return Err(Error::config(format!(
                        "zero-shot routing embeds the template in model space; \
                         train with repr_dim = d_model ({} here, repr_dim is {})",
                        cfg.model.d_model, cfg.repr_dim
                    )));
                }
                let template: String = sub
                    .train
                    .iter()
                    .take(4)
                    .map(|e| e.x.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                if template.trim().is_empty() {
                    return Err(Error::config(format!(
                        "task '{}' has no template text for zero-shot routing",
                        sub.name
                    )));
                }
                let (metric, weights) = eval_zero_shot(
                    &model,
                    &router,
                    &vocab,
                    &sub,
                    &template,
                    cfg.train.selection_fn,
                    tau,
                )?;
                // Seeded random-route control for the trend report.
                let control_logits = Tensor64::randn(
                    &[cfg.model.n_layers, cfg.model.m_experts],
                    1.0,
                    &mut stream_rng(derived_seed(args.seed, i as u64), Stream::Routing),
                );
                let control_weights = select_tensor(
                    &control_logits,
                    cfg.train.selection_fn,
                    tau,
                    None,
                    Mode::Eval,
                )?;
                let control =
                    taskmoe::analysis::eval_task(&model, &vocab, &sub, &control_weights)?;
                rows.push(serde_json::json!({
                    "task": sub.name,
                    "mode": "zeroshot",
                    "test_metric": metric,
                    "random_route_metric": control,
                    "routes": weights.data(),
                }));
                baseline_scores.push((sub.name.clone(), control));
                method_scores.push((sub.name.clone(), metric));
            }
            other => return Err(Error::config(format!("unknown adapt mode '{other}'"))),
        }
    }

    std::fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("adapt.csv"))?;
    w.write_record(["task", "baseline", "method", "relative_gain_percent"])?;
    for ((name, b), (_, m)) in baseline_scores.iter().zip(&method_scores) {
        let gain = if *b > 0.0 {
            format!("{:.6}", (m - b) / b * 100.0)
        } else {
            String::new()
        };
        w.write_record([
            name.clone(),
            format!("{b:.6}"),
            format!("{m:.6}"),
            gain,
        ])?;
    }
    match arg(&baseline_scores, &method_scores) {
        Ok(report) => {
            w.write_record(["ARG", "", "", &format!("{:.6}", report.percent)])?;
        }
        Err(e) => eprintln!("warning: ARG not computable: {e}"),
    }
    w.flush()?;
    std::fs::write(
        args.out.join("adapt.jsonl"),
        rows.iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join("\n")
            + "\n",
    )?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn compute_correlation(
    model: &Model,
    router: &RouterNetwork,
    table: &TaskEmbeddingTable,
    tasks: &[TaskDataset],
    meta_train: &[usize],
    cfg: &RunConfig,
    args: &AnalyzeArgs,
) -> Result<(CorrelationReport, Tensor64)> {
    let n = model.config.n_layers;
    let m = model.config.m_experts;
    let train_tasks: Vec<&TaskDataset> = meta_train.iter().map(|&i| &tasks[i]).collect();
    let features = build_feature_table(&train_tasks)?;
    // Eval-mode soft routes at the final temperature.
    let mut routes = Tensor64::zeros(&[n * m, train_tasks.len()]);
    for k in 0..train_tasks.len() {
        let logits = router.forward_tensor(table.row(k))?;
        let weights = select_tensor(
            &logits,
            SelectionFn::Softmax,
            cfg.train.schedule.tau_end,
            None,
            Mode::Eval,
        )?;
        for cell in 0..n * m {
            routes.set(cell, k, weights.data()[cell]);
        }
    }
    let report = correlate_routes(
        &routes,
        n,
        m,
        &features,
        args.p_threshold,
        args.permutations,
        derived_seed(args.seed, 0xC0),
    )?;
    Ok((report, routes))
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    write_manifest(&RunManifest {
        command: format!("analyze --which {}", args.which),
        config: None,
        seed: args.seed,
        out: args.out.clone(),
        inputs: vec![(args.checkpoint.clone(), sha256_file(&args.checkpoint)?)],
    })?;
    match args.which.as_str() {
        "correlate" => {
            let (ck, model, router, table, cfg, seed) = load_state(&args.checkpoint)?;
            let (tasks, meta_train, _) = meta_test_tasks(&ck, &cfg, seed)?;
            let (report, _) =
                compute_correlation(&model, &router, &table, &tasks, &meta_train, &cfg, args)?;
            report.export(&args.out)?;
        }
        "disable" => {
            let (ck, model, router, table, cfg, seed) = load_state(&args.checkpoint)?;
            let (tasks, meta_train, _) = meta_test_tasks(&ck, &cfg, seed)?;
            let feature = args
                .feature
                .clone()
                .ok_or_else(|| Error::config("--feature is required for disabling"))?;
            let mode = DisableMode::from_str(&args.mode)?;
            let (report, _) =
                compute_correlation(&model, &router, &table, &tasks, &meta_train, &cfg, args)?;
            let plan = DisablePlan::build(
                &report,
                &feature,
                mode,
                args.topk,
                derived_seed(args.seed, 0xD1),
            )?;
            let vocab = Vocab::core();
            let train_tasks: Vec<&TaskDataset> =
                meta_train.iter().map(|&i| &tasks[i]).collect();
            let features = build_feature_table(&train_tasks)?;
            let flagged = features
                .feature_row(&feature)
                .ok_or_else(|| Error::config(format!("unknown feature '{feature}'")))?
                .to_vec();
            // Mean metric over the feature's own tasks at each K.
            let mut series = vec![0.0; args.topk + 1];
            let mut counted = 0usize;
            for (k, task) in train_tasks.iter().enumerate() {
                if flagged[k] == 0 {
                    continue;
                }
                let logits = router.forward_tensor(table.row(k))?;
                let per_k = run_disable_experiment(
                    &model,
                    &vocab,
                    task,
                    &logits,
                    cfg.train.selection_fn,
                    cfg.train.schedule.tau_end,
                    &plan,
                )?;
                for (i, v) in per_k.iter().enumerate() {
                    series[i] += v;
                }
                counted += 1;
            }
            if counted == 0 {
                return Err(Error::data(format!(
                    "no meta-train task has feature '{feature}'"
                )));
            }
            for v in &mut series {
                *v /= counted as f64;
            }
            std::fs::create_dir_all(&args.out)?;
            taskmoe::analysis::export_disable_csv(
                args.out.join("disable.csv"),
                &plan,
                &series,
            )?;
        }
        "dynamics" => {
            let path = args.route_log.clone().unwrap_or_else(|| {
                args.checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("route_log.json")
            });
            if !path.exists() {
                return Err(Error::config(format!(
                    "route log not found: {}",
                    path.display()
                )));
            }
            let log: RouteLog = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if log.snapshots.is_empty() {
                return Err(Error::data("no snapshots in the route log"));
            }
            log.export_csv(&args.out)?;
        }
        other => return Err(Error::config(format!("unknown analysis '{other}'"))),
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Adapt(args) => cmd_adapt(args),
        Cmd::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
