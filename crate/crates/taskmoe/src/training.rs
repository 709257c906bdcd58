//! Training orchestration: heterogeneous batching, baseline routing
//! modes, one-/two-stage MoE training with temperature annealing,
//! metric-based validation, few-shot grid search, and zero-shot routing.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{eval_examples, eval_task, RouteLog};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Example, TaskDataset, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, Routing, EOS_ID};
use crate::optim::AdamState;
use crate::params::{ParamBinder, ParamId, N_GROUPS};
use crate::repr::{text_emb_text, TextMode};
use crate::routing::{
    select_tensor, select_var, Mode, RouterNetwork, SelectionFn, TaskEmbeddingTable,
    TemperatureSchedule,
};
use crate::rngutil::{derived_seed, stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

type S = crate::F;
type Tensor64 = Tensor<S>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum BaselineMode {
    /// Learned routing (no baseline).
    None,
    /// Single-expert transformer: expert 0 everywhere.
    Vanilla,
    /// Fresh uniform choice of k experts per layer on every forward pass.
    InstRandomK(usize),
    /// One seeded choice of k experts per layer per task, fixed for the
    /// whole run.
    TaskRandomK(usize),
    /// Every expert active with weight 1/m.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub router_lr: f64,
    pub task_repr_lr: f64,
    pub validate_every: u64,
    pub selection_fn: SelectionFn,
    pub schedule: TemperatureSchedule,
    pub stage: Stage,
    pub freeze_task_repr: bool,
    pub baseline: BaselineMode,
    pub clip_norm: Option<f64>,
    /// Stage-2 starting temperature (near-uniform routing).
    pub stage2_tau0: f64,
    /// Keep fine-tuning the router during stage 2 (vs. frozen logits).
    pub stage2_train_router: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            base_lr: 1e-3,
            router_lr: 1e-3,
            task_repr_lr: 1e-2,
            validate_every: 200,
            selection_fn: SelectionFn::Gumbel,
            schedule: TemperatureSchedule::default(),
            stage: Stage::One,
            freeze_task_repr: false,
            baseline: BaselineMode::None,
            clip_norm: None,
            stage2_tau0: 100.0,
            stage2_train_router: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.router_lr <= 0.0 || self.task_repr_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.total_steps > 0 {
            if self.validate_every == 0 || self.total_steps % self.validate_every != 0 {
                return Err(Error::config(format!(
                    "validate_every {} must divide total_steps {}",
                    self.validate_every, self.total_steps
                )));
            }
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        if self.stage2_tau0 <= 0.0 {
            return Err(Error::config("stage2_tau0 must be positive"));
        }
        self.schedule.validate()?;
        match self.baseline {
            BaselineMode::InstRandomK(k) | BaselineMode::TaskRandomK(k) if k == 0 => {
                Err(Error::config("random-k baselines need k >= 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub mean_dev_metric: f64,
    pub mean_dev_loss: f64,
}

/// Index of the record with the best mean dev metric; ties go to the
/// earliest step. Selection is by metric, never by loss.
pub fn select_best(records: &[CheckpointRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if r.mean_dev_metric > records[b].mean_dev_metric => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Uniform draw of `batch_size` (task, example) pairs from the pooled
/// concatenation of every task's training split.
pub fn heterogeneous_batch(
    tasks: &[&TaskDataset],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, Example)>> {
    let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::data("no training examples in any task"));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut idx = rng.gen_range(0..total);
        let mut task = 0usize;
        while idx >= sizes[task] {
            idx -= sizes[task];
            task += 1;
        }
        out.push((task, tasks[task].train[idx].clone()));
    }
    Ok(out)
}

fn random_k_row(m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut experts: Vec<usize> = (0..m).collect();
    experts.shuffle(rng);
    let mut row = vec![0.0; m];
    for &j in &experts[..k] {
        row[j] = 1.0 / k as f64;
    }
    row
}

/// Resolved baseline routing for one run. Task-level random routes are
/// sampled once at construction and never change; instance-level routes
/// are re-sampled on every call.
#[derive(Clone, Debug)]
pub struct BaselineRouter {
    pub mode: BaselineMode,
    n: usize,
    m: usize,
    fixed: Vec<Tensor64>,
}

impl BaselineRouter {
    pub fn new(
        mode: BaselineMode,
        n_layers: usize,
        m_experts: usize,
        n_tasks: usize,
        seed: u64,
    ) -> Result<BaselineRouter> {
        match mode {
            BaselineMode::InstRandomK(k) | BaselineMode::TaskRandomK(k) => {
                if k == 0 || k > m_experts {
                    return Err(Error::config(format!(
                        "random-k baseline needs 1 <= k <= {m_experts}, got {k}"
                    )));
                }
            }
            _ => {}
        }
        let mut fixed = Vec::new();
        if let BaselineMode::TaskRandomK(k) = mode {
            let mut rng = stream_rng(seed, Stream::Routing);
            for _ in 0..n_tasks {
                let mut data = Vec::with_capacity(n_layers * m_experts);
                for _ in 0..n_layers {
                    data.extend(random_k_row(m_experts, k, &mut rng));
                }
                fixed.push(Tensor::new(vec![n_layers, m_experts], data)?);
            }
        }
        Ok(BaselineRouter {
            mode,
            n: n_layers,
            m: m_experts,
            fixed,
        })
    }

    /// Routing weights for one forward pass, or `None` when routing is
    /// learned.
    pub fn weights(&self, task_id: usize, rng: &mut ChaCha8Rng) -> Result<Option<Tensor64>> {
        match self.mode {
            BaselineMode::None => Ok(None),
            BaselineMode::Vanilla => {
                let mut d = Tensor64::zeros(&[self.n, self.m]);
                for i in 0..self.n {
                    d.set(i, 0, 1.0);
                }
                Ok(Some(d))
            }
            BaselineMode::Average => Ok(Some(Tensor::full(
                &[self.n, self.m],
                1.0 / self.m as f64,
            ))),
            BaselineMode::InstRandomK(k) => {
                let mut data = Vec::with_capacity(self.n * self.m);
                for _ in 0..self.n {
                    data.extend(random_k_row(self.m, k, rng));
                }
                Ok(Some(Tensor::new(vec![self.n, self.m], data)?))
            }
            BaselineMode::TaskRandomK(_) => {
                let d = self
                    .fixed
                    .get(task_id)
                    .ok_or_else(|| {
                        Error::config(format!("no fixed routes for task {task_id}"))
                    })?
                    .clone();
                Ok(Some(d))
            }
        }
    }
}

/// One validation pass: eval-mode routes per task, greedy-decoded dev
/// metric and teacher-forced dev loss, averaged over tasks (unweighted).
pub struct ValidationReport {
    pub mean_metric: f64,
    pub mean_loss: f64,
    pub per_task_metric: Vec<f64>,
    /// Eval-mode decision matrix per task (instance-random: last drawn).
    pub routes: Vec<Tensor64>,
}

#[allow(clippy::too_many_arguments)]
pub fn validate(
    model: &Model,
    router: &RouterNetwork,
    table: &TaskEmbeddingTable,
    tasks: &[&TaskDataset],
    vocab: &Vocab,
    baseline: &BaselineRouter,
    selection: SelectionFn,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ValidationReport> {
    if tasks.is_empty() {
        return Err(Error::data("no tasks to validate"));
    }
    let mut per_task_metric = Vec::with_capacity(tasks.len());
    let mut routes = Vec::with_capacity(tasks.len());
    let mut loss_sum = 0.0;
    for (k, task) in tasks.iter().enumerate() {
        let weights = match baseline.weights(k, rng)? {
            Some(w) => w,
            None => {
                let logits = router.forward_tensor(table.row(k))?;
                select_tensor(&logits, selection, tau, None, Mode::Eval)?
            }
        };
        if task.dev.is_empty() {
            return Err(Error::data(format!("task '{}' has no dev split", task.name)));
        }
        per_task_metric.push(eval_examples(
            model,
            vocab,
            &task.dev,
            task.metric,
            &weights,
        )?);
        let mut task_loss = 0.0;
        for e in &task.dev {
            let (input, target) = encode_pair(vocab, e, model.config.max_seq_len)?;
            let tape: Tape<S> = Tape::new();
            let binder = ParamBinder::new(&tape);
            let (_, loss) =
                model.forward(&binder, &input, &target, &Routing::Const(&weights))?;
            task_loss += loss.value().data()[0];
        }
        loss_sum += task_loss / task.dev.len() as f64;
        routes.push(weights);
    }
    Ok(ValidationReport {
        mean_metric: per_task_metric.iter().sum::<f64>() / tasks.len() as f64,
        mean_loss: loss_sum / tasks.len() as f64,
        per_task_metric,
        routes,
    })
}

fn encode_pair(
    vocab: &Vocab,
    e: &Example,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut input = vocab.encode(&e.x)?;
    input.truncate(max_len);
    let mut target = vocab.encode(&e.y)?;
    target.push(EOS_ID);
    target.truncate(max_len);
    if input.is_empty() || target.is_empty() {
        return Err(Error::data("example with no tokens"));
    }
    Ok((input, target))
}

/// Snapshot model + router + task table into one checkpoint.
pub fn state_checkpoint(
    model: &Model,
    router: &RouterNetwork,
    table: &TaskEmbeddingTable,
    extra: serde_json::Value,
) -> Checkpoint {
    let header = serde_json::json!({
        "config": model.config,
        "adapter_bottleneck": model.adapters.as_ref().map(|a| a.bottleneck),
        "router_config": router.config,
        "table_dim": table.dim(),
        "table_len": table.len(),
        "extra": extra,
    });
    let mut ck = Checkpoint::new(header);
    ck.push_store("model", &model.store);
    ck.push_store("router", &router.store);
    ck.push_store("table", &table.store);
    ck
}

/// Restore the stores captured by [`state_checkpoint`] into live objects
/// with the same layout.
pub fn restore_state(
    ck: &Checkpoint,
    model: &mut Model,
    router: &mut RouterNetwork,
    table: &mut TaskEmbeddingTable,
) -> Result<()> {
    let m = ck.load_store("model")?;
    let r = ck.load_store("router")?;
    let t = ck.load_store("table")?;
    for (loaded, live) in [(&m, &model.store), (&r, &router.store), (&t, &table.store)] {
        if loaded.len() != live.len() {
            return Err(Error::data("checkpoint does not match the live layout"));
        }
        for (a, b) in loaded.ids().zip(live.ids()) {
            if loaded.name(a) != live.name(b) {
                return Err(Error::data(format!(
                    "checkpoint tensor '{}' does not match expected '{}'",
                    loaded.name(a),
                    live.name(b)
                )));
            }
        }
    }
    model.store = m;
    router.store = r;
    table.store = t;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<CheckpointRecord>,
    pub best: Option<usize>,
    /// Full state at the best validation (metric tie → earliest step).
    pub best_checkpoint: Option<Checkpoint>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub route_log: RouteLog,
    /// One JSON record per validation, ready for a JSONL log.
    pub log_lines: Vec<serde_json::Value>,
}

struct LoopSettings {
    schedule: TemperatureSchedule,
    selection: SelectionFn,
    stage_tag: &'static str,
}

/// Joint optimization of experts, router, and task embeddings on
/// heterogeneous batches with temperature annealing. On return, the live
/// state holds the best-validation checkpoint (or the final state when no
/// validation ran).
pub fn train_one_stage(
    model: &mut Model,
    router: &mut RouterNetwork,
    table: &mut TaskEmbeddingTable,
    tasks: &[&TaskDataset],
    vocab: &Vocab,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let settings = LoopSettings {
        schedule: config.schedule,
        selection: config.selection_fn,
        stage_tag: "one",
    };
    train_loop(model, router, table, tasks, vocab, config, &settings, seed)
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut Model,
    router: &mut RouterNetwork,
    table: &mut TaskEmbeddingTable,
    tasks: &[&TaskDataset],
    vocab: &Vocab,
    config: &TrainConfig,
    settings: &LoopSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    if tasks.is_empty() {
        return Err(Error::data("no tasks to train on"));
    }
    if table.len() < tasks.len() && config.baseline == BaselineMode::None {
        return Err(Error::config(format!(
            "task table has {} rows for {} tasks",
            table.len(),
            tasks.len()
        )));
    }
    if config.freeze_task_repr {
        table.set_all_frozen(true);
    }
    let baseline = BaselineRouter::new(
        config.baseline,
        model.config.n_layers,
        model.config.m_experts,
        tasks.len(),
        seed,
    )?;
    let mut batch_rng = stream_rng(seed, Stream::Batch);
    let mut route_rng = stream_rng(seed, Stream::Routing);
    let mut gumbel_rng = stream_rng(seed, Stream::Gumbel);

    let mut adam_model = AdamState::new(&model.store);
    let mut adam_router = AdamState::new(&router.store);
    let mut adam_table = AdamState::new(&table.store);
    let lrs: [f64; N_GROUPS] = [config.base_lr, config.router_lr, config.task_repr_lr];

    let mut outcome = TrainOutcome {
        records: Vec::new(),
        best: None,
        best_checkpoint: None,
        initial_loss: None,
        final_loss: None,
        route_log: RouteLog::new(
            model.config.n_layers,
            model.config.m_experts,
            tasks.iter().map(|t| t.name.clone()).collect(),
        ),
        log_lines: Vec::new(),
    };

    for step in 0..config.total_steps {
        let tau = settings.schedule.at(step);
        let batch = heterogeneous_batch(tasks, config.batch_size, &mut batch_rng)?;

        let tape: Tape<S> = Tape::new();
        let model_binder = ParamBinder::new(&tape);
        let router_binder = ParamBinder::new(&tape);
        let table_binder = ParamBinder::new(&tape);

        // One decision matrix per distinct task in the batch; reused so
        // router gradients accumulate across its examples.
        let mut decisions: HashMap<usize, crate::tape::Var<'_, S>> = HashMap::new();
        let mut loss_acc: Option<crate::tape::Var<'_, S>> = None;
        for (task_id, example) in &batch {
            let (input, target) = encode_pair(vocab, example, model.config.max_seq_len)?;
            let loss = match baseline.weights(*task_id, &mut route_rng)? {
                Some(w) => {
                    model
                        .forward(&model_binder, &input, &target, &Routing::Const(&w))?
                        .1
                }
                None => {
                    let d = match decisions.get(task_id) {
                        Some(d) => *d,
                        None => {
                            let t_k = table.bind(&table_binder, *task_id);
                            let logits = router.forward(&router_binder, t_k)?;
                            let d = select_var(
                                logits,
                                settings.selection,
                                tau,
                                Some(&mut gumbel_rng),
                                Mode::Train,
                            )?;
                            decisions.insert(*task_id, d);
                            d
                        }
                    };
                    model
                        .forward(&model_binder, &input, &target, &Routing::Node(d))?
                        .1
                }
            };
            loss_acc = Some(match loss_acc {
                Some(acc) => acc.add(loss),
                None => loss,
            });
        }
        let loss = loss_acc.unwrap().scale(1.0 / batch.len() as f64);
        let loss_value = loss.value().data()[0];
        if !loss_value.is_finite() {
            return Err(Error::numeric(format!(
                "stage {} diverged at step {step}: loss = {loss_value}",
                settings.stage_tag
            )));
        }
        if outcome.initial_loss.is_none() {
            outcome.initial_loss = Some(loss_value);
        }
        outcome.final_loss = Some(loss_value);

        let grads = tape.backward(loss)?;
        let mut g_model = model_binder.collect_grads(&grads);
        let mut g_router = router_binder.collect_grads(&grads);
        let mut g_table = table_binder.collect_grads(&grads);
        if let Some(c) = config.clip_norm {
            clip_grads(&mut [&mut g_model, &mut g_router, &mut g_table], c);
        }
        adam_model.step(&mut model.store, &g_model, &lrs)?;
        adam_router.step(&mut router.store, &g_router, &lrs)?;
        adam_table.step(&mut table.store, &g_table, &lrs)?;

        if (step + 1) % config.validate_every == 0 {
            let report = validate(
                model,
                router,
                table,
                tasks,
                vocab,
                &baseline,
                settings.selection,
                tau,
                &mut route_rng,
            )?;
            outcome
                .route_log
                .log_dynamics(step + 1, tau, &report.routes)?;
            outcome.log_lines.push(serde_json::json!({
                "stage": settings.stage_tag,
                "step": step + 1,
                "tau": tau,
                "train_loss": loss_value,
                "mean_dev_metric": report.mean_metric,
                "mean_dev_loss": report.mean_loss,
                "per_task_metric": report.per_task_metric,
            }));
            let record = CheckpointRecord {
                step: step + 1,
                mean_dev_metric: report.mean_metric,
                mean_dev_loss: report.mean_loss,
            };
            outcome.records.push(record);
            let best = select_best(&outcome.records);
            if best != outcome.best {
                outcome.best = best;
                outcome.best_checkpoint = Some(state_checkpoint(
                    model,
                    router,
                    table,
                    serde_json::json!({"step": step + 1, "stage": settings.stage_tag}),
                ));
            }
        }
    }

    if let Some(ck) = &outcome.best_checkpoint {
        restore_state(ck, model, router, table)?;
    }
    Ok(outcome)
}

fn clip_grads(groups: &mut [&mut Vec<(ParamId, Tensor64)>], max_norm: f64) {
    let mut sq = 0.0;
    for g in groups.iter() {
        for (_, t) in g.iter() {
            sq += t.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in groups.iter_mut() {
            for (_, t) in g.iter_mut() {
                *t = t.scale(k);
            }
        }
    }
}

/// Stage 1 trains everything jointly; stage 2 re-initializes the experts
/// from `pretrained_base` (plus fresh noise) and trains again while the
/// temperature anneals from near-uniform (`stage2_tau0`) down to the
/// schedule's end, softmaxing the stage-1 router's logits. The router
/// keeps fine-tuning unless `stage2_train_router` is off.
#[allow(clippy::too_many_arguments)]
pub fn train_two_stage(
    model: &mut Model,
    router: &mut RouterNetwork,
    table: &mut TaskEmbeddingTable,
    tasks: &[&TaskDataset],
    vocab: &Vocab,
    config: &TrainConfig,
    pretrained_base: &Model,
    seed: u64,
) -> Result<(TrainOutcome, TrainOutcome)> {
    config.validate()?;
    let stage1 = train_one_stage(model, router, table, tasks, vocab, config, seed)?;

    let mut reinit_rng = stream_rng(derived_seed(seed, 2), Stream::Init);
    model.reinit_experts_from(pretrained_base, &mut reinit_rng)?;

    let frozen_router = !config.stage2_train_router;
    if frozen_router {
        for id in router.store.ids().collect::<Vec<_>>() {
            router.store.set_frozen(id, true);
        }
    }
    // Stage 2 always routes through an annealed softmax of the logits so
    // routing moves smoothly from near-average to near-discrete.
    let settings = LoopSettings {
        schedule: TemperatureSchedule {
            tau0: config.stage2_tau0,
            tau_end: config.schedule.tau_end,
            total_steps: config.schedule.total_steps,
        },
        selection: SelectionFn::Softmax,
        stage_tag: "two",
    };
    let stage2 = train_loop(
        model,
        router,
        table,
        tasks,
        vocab,
        config,
        &settings,
        derived_seed(seed, 3),
    );
    if frozen_router {
        for id in router.store.ids().collect::<Vec<_>>() {
            router.store.set_frozen(id, false);
        }
    }
    Ok((stage1, stage2?))
}

/// Few-shot grid search defaults (desk-scale step counts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub steps: u64,
    pub validate_every: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lrs: vec![1e-5, 2e-5, 5e-5],
            batch_sizes: vec![2, 4, 8],
            steps: 200,
            validate_every: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptCell {
    pub lr: f64,
    pub batch_size: usize,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptResult {
    pub cells: Vec<AdaptCell>,
    pub best_cell: usize,
    pub dev_metric: f64,
    pub test_metric: f64,
    pub routes: Tensor64,
}

/// Route the unseen task's representation through the learned router,
/// then grid-search fine-tuning of the selected experts on its training
/// split. Each cell runs in isolation from the same starting state with a
/// derived seed; the best dev cell's tuned model scores the test split.
#[allow(clippy::too_many_arguments)]
pub fn adapt_few_shot(
    model: &Model,
    router: &RouterNetwork,
    vocab: &Vocab,
    task: &TaskDataset,
    representation: &Tensor64,
    selection: SelectionFn,
    tau: f64,
    config: &AdaptConfig,
    seed: u64,
) -> Result<AdaptResult> {
    if task.train.is_empty() || task.dev.is_empty() || task.test.is_empty() {
        return Err(Error::data(format!(
            "task '{}' needs train, dev, and test splits for adaptation",
            task.name
        )));
    }
    let logits = router.forward_tensor(representation)?;
    let weights = select_tensor(&logits, selection, tau, None, Mode::Eval)?;
    grid_fine_tune(model, vocab, task, &weights, config, seed)
}

/// The grid-search inner loop with explicit routing weights; also used
/// directly for direct-fine-tuning baselines (e.g. uniform routes).
pub fn grid_fine_tune(
    model: &Model,
    vocab: &Vocab,
    task: &TaskDataset,
    weights: &Tensor64,
    config: &AdaptConfig,
    seed: u64,
) -> Result<AdaptResult> {
    if task.train.is_empty() || task.dev.is_empty() || task.test.is_empty() {
        return Err(Error::data(format!(
            "task '{}' needs train, dev, and test splits for adaptation",
            task.name
        )));
    }
    if config.lrs.is_empty() || config.batch_sizes.is_empty() {
        return Err(Error::config("adaptation grid is empty"));
    }
    let weights = weights.clone();
    let refs = [task];
    let mut cells = Vec::new();
    let mut tuned_models: Vec<Model> = Vec::new();
    for (cell, (lr, batch_size)) in config
        .lrs
        .iter()
        .flat_map(|lr| config.batch_sizes.iter().map(move |b| (*lr, *b)))
        .enumerate()
    {
        let cell_seed = derived_seed(seed, cell as u64);
        let mut m = model.clone();
        let mut rng = stream_rng(cell_seed, Stream::Batch);
        let mut adam = AdamState::new(&m.store);
        let mut best_dev = f64::NEG_INFINITY;
        let mut best_state: Option<Checkpoint> = None;
        for step in 0..config.steps {
            let batch = heterogeneous_batch(&refs, batch_size, &mut rng)?;
            let tape: Tape<S> = Tape::new();
            let binder = ParamBinder::new(&tape);
            let mut acc: Option<crate::tape::Var<'_, S>> = None;
            for (_, e) in &batch {
                let (input, target) = encode_pair(vocab, e, m.config.max_seq_len)?;
                let (_, loss) = m.forward(&binder, &input, &target, &Routing::Const(&weights))?;
                acc = Some(match acc {
                    Some(a) => a.add(loss),
                    None => loss,
                });
            }
            let loss = acc.unwrap().scale(1.0 / batch.len() as f64);
            if !loss.value().data()[0].is_finite() {
                return Err(Error::numeric(format!(
                    "adaptation cell {cell} diverged at step {step}"
                )));
            }
            let grads = tape.backward(loss)?;
            adam.step(&mut m.store, &binder.collect_grads(&grads), &[lr, lr, lr])?;
            if (step + 1) % config.validate_every == 0 || step + 1 == config.steps {
                let dev = eval_examples(&m, vocab, &task.dev, task.metric, &weights)?;
                if dev > best_dev {
                    best_dev = dev;
                    best_state = Some(m.to_checkpoint(serde_json::json!({"cell": cell})));
                }
            }
        }
        if let Some(ck) = &best_state {
            m = Model::from_checkpoint(ck)?;
        }
        cells.push(AdaptCell {
            lr,
            batch_size,
            dev_metric: best_dev,
        });
        tuned_models.push(m);
    }
    // Strictly-better wins, so metric ties keep the earliest grid cell.
    let mut best_cell = 0usize;
    for (i, c) in cells.iter().enumerate() {
        if c.dev_metric > cells[best_cell].dev_metric {
            best_cell = i;
        }
    }
    let test_metric = eval_task(&tuned_models[best_cell], vocab, task, &weights)?;
    Ok(AdaptResult {
        dev_metric: cells[best_cell].dev_metric,
        best_cell,
        cells,
        test_metric,
        routes: weights,
    })
}

/// Zero-shot: embed the task's instruction template (TextEmb-AVG, no
/// labels), route it, and evaluate the test split without any updates.
pub fn eval_zero_shot(
    model: &Model,
    router: &RouterNetwork,
    vocab: &Vocab,
    task: &TaskDataset,
    template: &str,
    selection: SelectionFn,
    tau: f64,
) -> Result<(f64, Tensor64)> {
    let uniform = model.config.uniform_routing();
    let emb = text_emb_text(template, model, vocab, &uniform, TextMode::Avg)?;
    let logits = router.forward_tensor(&emb)?;
    let weights = select_tensor(&logits, selection, tau, None, Mode::Eval)?;
    let metric = eval_task(model, vocab, task, &weights)?;
    Ok((metric, weights))
}
