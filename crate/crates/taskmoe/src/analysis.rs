//! Evaluation metrics, average relative gain, route-feature correlation,
//! expert-disabling experiments, and routing-dynamics logging.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CategoryKind, Example, FeatureTable, Metric, TaskDataset, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, EOS_ID};
use crate::routing::{disable_expert, select_tensor, Mode, SelectionFn};
use crate::rngutil::{stream_rng, Stream};
use crate::stats;
use crate::tensor::Tensor;

type Tensor64 = Tensor<crate::F>;

/// Score predictions against references with the task's metric.
pub fn score(predictions: &[String], references: &[String], metric: Metric) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::data("nothing to score"));
    }
    match metric {
        Metric::Accuracy | Metric::ExactMatch => Ok(exact_match_rate(predictions, references)),
        Metric::MacroF1 => macro_f1(predictions, references),
    }
}

fn exact_match_rate(predictions: &[String], references: &[String]) -> f64 {
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.trim() == r.trim())
        .count();
    hits as f64 / references.len() as f64
}

/// Macro-averaged F1 over the union of predicted and reference labels.
/// A class absent from both precision and recall contributes F1 = 0.
pub fn macro_f1(predictions: &[String], references: &[String]) -> Result<f64> {
    if predictions.len() != references.len() || references.is_empty() {
        return Err(Error::data("macro f1 needs matched, non-empty label lists"));
    }
    let classes: BTreeSet<&str> = references
        .iter()
        .chain(predictions)
        .map(|s| s.trim())
        .collect();
    let mut total = 0.0;
    for class in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fnn = 0usize;
        for (p, r) in predictions.iter().zip(references) {
            let p = p.trim() == *class;
            let r = r.trim() == *class;
            match (p, r) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fnn;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / classes.len() as f64)
}

/// Average relative gain of `method` over `baseline`, as a percentage.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgReport {
    pub percent: f64,
    /// Per-task relative gain in percent, in baseline order.
    pub per_task: Vec<(String, f64)>,
    /// Tasks dropped because their baseline score was zero.
    pub excluded: Vec<String>,
}

/// Mean over tasks of (method − baseline)/baseline × 100. Tasks are
/// matched by name, so the result is order-independent; zero-baseline
/// tasks are excluded with a warning on stderr.
pub fn arg(baseline: &[(String, f64)], method: &[(String, f64)]) -> Result<ArgReport> {
    if baseline.len() != method.len() {
        return Err(Error::data(format!(
            "baseline covers {} tasks, method {}",
            baseline.len(),
            method.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, f64> = method
        .iter()
        .map(|(n, s)| (n.as_str(), *s))
        .collect();
    if by_name.len() != method.len() {
        return Err(Error::data("duplicate task names in method scores"));
    }
    let mut per_task = Vec::new();
    let mut excluded = Vec::new();
    for (name, b) in baseline {
        let m = *by_name
            .get(name.as_str())
            .ok_or_else(|| Error::data(format!("method has no score for task '{name}'")))?;
        if *b == 0.0 {
            eprintln!("warning: task '{name}' has a zero baseline score; excluded from ARG");
            excluded.push(name.clone());
            continue;
        }
        per_task.push((name.clone(), (m - b) / b * 100.0));
    }
    if per_task.is_empty() {
        return Err(Error::data("every task had a zero baseline score"));
    }
    let percent = per_task.iter().map(|(_, g)| g).sum::<f64>() / per_task.len() as f64;
    Ok(ArgReport {
        percent,
        per_task,
        excluded,
    })
}

/// Pearson r and permutation p for every (layer-expert cell, feature)
/// pair. `None` marks pairs where the correlation is undefined (zero
/// variance on either side).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub expert_labels: Vec<String>,
    pub feature_names: Vec<String>,
    /// `r[cell][feature]`, cells in layer-major order.
    pub r: Vec<Vec<Option<f64>>>,
    pub p: Vec<Vec<Option<f64>>>,
    pub p_threshold: f64,
    pub n_permutations: usize,
}

pub fn expert_label(layer: usize, expert: usize) -> String {
    format!("L{layer}E{expert}")
}

/// Correlate each cell of the routing grid with each task feature.
/// `routes` holds one column per task and one row per layer-expert cell
/// (layer-major), typically eval-mode soft weights.
pub fn correlate_routes(
    routes: &Tensor64,
    n_layers: usize,
    m_experts: usize,
    features: &FeatureTable,
    p_threshold: f64,
    n_permutations: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let (cells, n_tasks) = routes.dims2()?;
    if cells != n_layers * m_experts {
        return Err(Error::shape(format!(
            "routes have {cells} rows, expected {n_layers}x{m_experts}"
        )));
    }
    if features.task_names.len() != n_tasks {
        return Err(Error::shape(format!(
            "feature table covers {} tasks, routes {}",
            features.task_names.len(),
            n_tasks
        )));
    }
    let mut r = vec![vec![None; features.feature_names.len()]; cells];
    let mut p = vec![vec![None; features.feature_names.len()]; cells];
    for cell in 0..cells {
        let x: Vec<f64> = (0..n_tasks).map(|t| routes.at(cell, t)).collect();
        for (f, col) in features.matrix.iter().enumerate() {
            let y: Vec<f64> = col.iter().map(|&v| v as f64).collect();
            match stats::pearson(
                &x,
                &y,
                n_permutations,
                crate::rngutil::derived_seed(seed, (cell * features.feature_names.len() + f) as u64),
            ) {
                Ok((rv, pv)) => {
                    r[cell][f] = Some(rv);
                    p[cell][f] = Some(pv);
                }
                Err(_) => {
                    // Undefined (constant column); reported as empty cells.
                }
            }
        }
    }
    let expert_labels = (0..n_layers)
        .flat_map(|i| (0..m_experts).map(move |j| expert_label(i, j)))
        .collect();
    Ok(CorrelationReport {
        expert_labels,
        feature_names: features.feature_names.clone(),
        r,
        p,
        p_threshold,
        n_permutations,
    })
}

impl CorrelationReport {
    /// Raw r with entries at p ≥ threshold blanked, for the visual export.
    pub fn masked_r(&self) -> Vec<Vec<Option<f64>>> {
        self.r
            .iter()
            .zip(&self.p)
            .map(|(rr, pp)| {
                rr.iter()
                    .zip(pp)
                    .map(|(r, p)| match (r, p) {
                        (Some(r), Some(p)) if *p < self.p_threshold => Some(*r),
                        _ => None,
                    })
                    .collect()
            })
            .collect()
    }

    /// Signed r of every defined cell for one feature, cell-major order.
    pub fn feature_column(&self, feature: &str) -> Result<Vec<((usize, usize), f64)>> {
        let f = self
            .feature_names
            .iter()
            .position(|n| n == feature)
            .ok_or_else(|| Error::config(format!("unknown feature '{feature}'")))?;
        let m = self
            .expert_labels
            .iter()
            .filter(|l| l.starts_with("L0"))
            .count();
        Ok(self
            .r
            .iter()
            .enumerate()
            .filter_map(|(cell, row)| row[f].map(|r| ((cell / m, cell % m), r)))
            .collect())
    }

    /// Write `r.csv`, `p.csv`, `masked_r.csv`, and `meta.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, grid) in [
            ("r.csv", &self.r),
            ("p.csv", &self.p),
            ("masked_r.csv", &self.masked_r()),
        ] {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["cell".to_string()];
            header.extend(self.feature_names.clone());
            w.write_record(&header)?;
            for (cell, row) in grid.iter().enumerate() {
                let mut rec = vec![self.expert_labels[cell].clone()];
                rec.extend(row.iter().map(|v| match v {
                    Some(v) => format!("{v:.17e}"),
                    None => String::new(),
                }));
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(path);
        }
        let meta = dir.join("meta.json");
        let mut f = std::fs::File::create(&meta)?;
        f.write_all(serde_json::to_string_pretty(&serde_json::json!({
            "p_threshold": self.p_threshold,
            "n_permutations": self.n_permutations,
            "expert_labels": self.expert_labels,
            "feature_names": self.feature_names,
        }))?
        .as_bytes())?;
        written.push(meta);
        Ok(written)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisableMode {
    TopK,
    LeastK,
    RandomK,
}

impl fmt::Display for DisableMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DisableMode::TopK => "top",
            DisableMode::LeastK => "least",
            DisableMode::RandomK => "random",
        };
        f.write_str(s)
    }
}

impl FromStr for DisableMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<DisableMode> {
        match s {
            "top" => Ok(DisableMode::TopK),
            "least" => Ok(DisableMode::LeastK),
            "random" => Ok(DisableMode::RandomK),
            other => Err(Error::config(format!("unknown disable mode '{other}'"))),
        }
    }
}

/// A resolved cumulative-disabling schedule: `experts[..k]` are the cells
/// turned off at step k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisablePlan {
    pub feature: String,
    pub mode: DisableMode,
    pub k: usize,
    pub experts: Vec<(usize, usize)>,
}

impl DisablePlan {
    /// Rank cells by their signed correlation with `feature` (descending
    /// for TopK, ascending for LeastK, seeded shuffle for RandomK) and
    /// keep the first `k`.
    pub fn build(
        report: &CorrelationReport,
        feature: &str,
        mode: DisableMode,
        k: usize,
        seed: u64,
    ) -> Result<DisablePlan> {
        if k < 1 {
            return Err(Error::config("disable plan needs k >= 1"));
        }
        let mut cells = report.feature_column(feature)?;
        match mode {
            DisableMode::TopK => {
                cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)))
            }
            DisableMode::LeastK => {
                cells.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            }
            DisableMode::RandomK => {
                use rand::seq::SliceRandom;
                let mut rng = stream_rng(seed, Stream::Analysis);
                cells.sort_by_key(|c| c.0);
                cells.shuffle(&mut rng);
            }
        }
        if cells.len() < k {
            return Err(Error::config(format!(
                "only {} cells have a defined correlation, need {k}",
                cells.len()
            )));
        }
        Ok(DisablePlan {
            feature: feature.to_string(),
            mode,
            k,
            experts: cells[..k].iter().map(|c| c.0).collect(),
        })
    }

    pub fn validate(&self, n_layers: usize, m_experts: usize) -> Result<()> {
        if self.k < 1 || self.experts.len() < self.k {
            return Err(Error::config("disable plan needs k >= 1 resolved experts"));
        }
        for &(i, j) in &self.experts {
            if i >= n_layers || j >= m_experts {
                return Err(Error::config(format!(
                    "expert ({i}, {j}) outside the {n_layers}x{m_experts} grid"
                )));
            }
        }
        Ok(())
    }
}

/// Greedy-decode every example and score against the references.
pub fn eval_examples(
    model: &Model,
    vocab: &Vocab,
    examples: &[Example],
    metric: Metric,
    weights: &Tensor64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    for e in examples {
        let input = vocab.encode(&e.x)?;
        let out = model.greedy_decode(&input, weights, model.config.max_seq_len, EOS_ID)?;
        predictions.push(vocab.decode(&out));
        references.push(e.y.clone());
    }
    score(&predictions, &references, metric)
}

/// Evaluate a task's test split under fixed routing weights.
pub fn eval_task(
    model: &Model,
    vocab: &Vocab,
    task: &TaskDataset,
    weights: &Tensor64,
) -> Result<f64> {
    eval_examples(model, vocab, &task.test, task.metric, weights)
}

/// Cumulatively disable the plan's experts in the task's routing logits,
/// re-evaluating (no retraining) after each step. Returns one metric per
/// K in 0..=k; the model and logits are left untouched.
pub fn run_disable_experiment(
    model: &Model,
    vocab: &Vocab,
    task: &TaskDataset,
    logits: &Tensor64,
    selection: SelectionFn,
    tau: f64,
    plan: &DisablePlan,
) -> Result<Vec<f64>> {
    plan.validate(model.config.n_layers, model.config.m_experts)?;
    let mut work = logits.clone();
    let mut out = Vec::with_capacity(plan.k + 1);
    for step in 0..=plan.k {
        if step > 0 {
            let (i, j) = plan.experts[step - 1];
            disable_expert(&mut work, i, j)?;
        }
        let weights = select_tensor(&work, selection, tau, None, Mode::Eval)?;
        out.push(eval_task(model, vocab, task, &weights)?);
    }
    Ok(out)
}

/// Export the K→metric series in a Table 4/5-style layout.
pub fn export_disable_csv(
    path: impl AsRef<Path>,
    plan: &DisablePlan,
    metrics: &[f64],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "mode", "feature", "disabled", "metric"])?;
    for (k, m) in metrics.iter().enumerate() {
        let disabled = plan.experts[..k]
            .iter()
            .map(|&(i, j)| expert_label(i, j))
            .collect::<Vec<_>>()
            .join(" ");
        w.write_record([
            k.to_string(),
            plan.mode.to_string(),
            plan.feature.clone(),
            disabled,
            format!("{m:.6}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One dynamics snapshot: every task's flattened decision matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSnapshot {
    pub step: u64,
    pub tau: f64,
    pub routes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteLog {
    pub n_layers: usize,
    pub m_experts: usize,
    pub task_names: Vec<String>,
    pub snapshots: Vec<RouteSnapshot>,
}

impl RouteLog {
    pub fn new(n_layers: usize, m_experts: usize, task_names: Vec<String>) -> RouteLog {
        RouteLog {
            n_layers,
            m_experts,
            task_names,
            snapshots: Vec::new(),
        }
    }

    /// Append a snapshot of every task's decision matrix at this step.
    pub fn log_dynamics(&mut self, step: u64, tau: f64, routes: &[Tensor64]) -> Result<()> {
        if routes.len() != self.task_names.len() {
            return Err(Error::shape(format!(
                "{} route matrices for {} tasks",
                routes.len(),
                self.task_names.len()
            )));
        }
        let mut flat = Vec::with_capacity(routes.len());
        for d in routes {
            if d.shape() != [self.n_layers, self.m_experts] {
                return Err(Error::shape(format!(
                    "route matrix is {:?}, expected [{}, {}]",
                    d.shape(),
                    self.n_layers,
                    self.m_experts
                )));
            }
            flat.push(d.data().to_vec());
        }
        self.snapshots.push(RouteSnapshot {
            step,
            tau,
            routes: flat,
        });
        Ok(())
    }

    /// One CSV per snapshot (`dynamics_step{step}.csv`): task rows,
    /// layer-expert columns.
    pub fn export_csv(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for snap in &self.snapshots {
            let path = dir.join(format!("dynamics_step{}.csv", snap.step));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["task".to_string(), "tau".to_string()];
            for i in 0..self.n_layers {
                for j in 0..self.m_experts {
                    header.push(expert_label(i, j));
                }
            }
            w.write_record(&header)?;
            for (t, row) in snap.routes.iter().enumerate() {
                let mut rec = vec![self.task_names[t].clone(), format!("{:.6}", snap.tau)];
                rec.extend(row.iter().map(|v| format!("{v:.17e}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine needs equal-length non-empty vectors"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine undefined for a zero vector"));
    }
    Ok(dot / (na * nb))
}

/// Mean cosine similarity of route vectors within vs. across task
/// categories, over all task pairs in the snapshot.
pub fn category_cosine_split(
    snapshot: &RouteSnapshot,
    kinds: &[CategoryKind],
) -> Result<(f64, f64)> {
    if kinds.len() != snapshot.routes.len() {
        return Err(Error::shape(format!(
            "{} kinds for {} route rows",
            kinds.len(),
            snapshot.routes.len()
        )));
    }
    let mut within = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    for i in 0..kinds.len() {
        for j in i + 1..kinds.len() {
            let c = cosine(&snapshot.routes[i], &snapshot.routes[j])?;
            if kinds[i] == kinds[j] {
                within.0 += c;
                within.1 += 1;
            } else {
                cross.0 += c;
                cross.1 += 1;
            }
        }
    }
    if within.1 == 0 || cross.1 == 0 {
        return Err(Error::data(
            "need at least one within-category and one cross-category pair",
        ));
    }
    Ok((within.0 / within.1 as f64, cross.0 / cross.1 as f64))
}
