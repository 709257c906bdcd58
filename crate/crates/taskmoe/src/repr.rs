//! Task representations: random vectors, (fine-tuned) text embeddings,
//! and adapter-Fisher embeddings reduced with PCA.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{TaskDataset, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, Routing};
use crate::optim::AdamState;
use crate::params::{ParamBinder, ParamId};
use crate::pca::pca_reduce;
use crate::rngutil::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

type S = crate::F;
type Tensor64 = Tensor<S>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Random,
    TextEmbAvg,
    TextEmbBos,
    FtTextEmbAvg,
    FtTextEmbBos,
    FisherPca,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Random => "random",
            Provenance::TextEmbAvg => "text_emb_avg",
            Provenance::TextEmbBos => "text_emb_bos",
            Provenance::FtTextEmbAvg => "ft_text_emb_avg",
            Provenance::FtTextEmbBos => "ft_text_emb_bos",
            Provenance::FisherPca => "fisher_pca",
        };
        f.write_str(s)
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Provenance> {
        match s {
            "random" => Ok(Provenance::Random),
            "text_emb_avg" => Ok(Provenance::TextEmbAvg),
            "text_emb_bos" => Ok(Provenance::TextEmbBos),
            "ft_text_emb_avg" => Ok(Provenance::FtTextEmbAvg),
            "ft_text_emb_bos" => Ok(Provenance::FtTextEmbBos),
            "fisher_pca" => Ok(Provenance::FisherPca),
            other => Err(Error::config(format!("unknown provenance '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRepresentation {
    pub task_id: usize,
    pub provenance: Provenance,
    pub vector: Tensor64,
}

impl TaskRepresentation {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.vector.numel() != d {
            return Err(Error::shape(format!(
                "representation for task {} has {} entries, expected {d}",
                self.task_id,
                self.vector.numel()
            )));
        }
        if !self.vector.all_finite() {
            return Err(Error::numeric(format!(
                "representation for task {} has non-finite entries",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// i.i.d. N(0, 0.02²) vector, deterministic per seed.
pub fn random_repr(d: usize, seed: u64) -> Result<Tensor64> {
    if d == 0 {
        return Err(Error::config("representation dimension must be >= 1"));
    }
    let mut rng = stream_rng(seed, Stream::Repr);
    Ok(Tensor::randn(&[d], 0.02, &mut rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    Avg,
    Bos,
}

fn example_tokens(
    task: &TaskDataset,
    i: usize,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<usize>> {
    let e = &task.train[i];
    let mut ids = vocab.encode(&e.x)?;
    ids.extend(vocab.encode(&e.y)?);
    ids.truncate(max_len);
    if ids.is_empty() {
        return Err(Error::data(format!(
            "task '{}': example {i} has no tokens",
            task.name
        )));
    }
    Ok(ids)
}

/// Encode each training example's concatenated x and y through the model
/// encoder; take the token mean (AVG) or position 0 (BOS), then average
/// over examples.
pub fn text_emb(
    task: &TaskDataset,
    model: &Model,
    vocab: &Vocab,
    weights: &Tensor64,
    mode: TextMode,
) -> Result<Tensor64> {
    if task.train.is_empty() {
        return Err(Error::data(format!(
            "task '{}': no training examples to embed",
            task.name
        )));
    }
    let d = model.config.d_model;
    let mut acc = Tensor64::zeros(&[d]);
    for i in 0..task.train.len() {
        let ids = example_tokens(task, i, vocab, model.config.max_seq_len)?;
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let enc = model
            .encode(&binder, &ids, &Routing::Const(weights), false)?
            .value();
        let row = match mode {
            TextMode::Bos => Tensor::new(vec![d], enc.row(0).to_vec())?,
            TextMode::Avg => {
                let mut mean = Tensor64::zeros(&[d]);
                for r in 0..enc.rows() {
                    for c in 0..d {
                        mean.data_mut()[c] += enc.at(r, c);
                    }
                }
                mean.scale(1.0 / enc.rows() as f64)
            }
        };
        acc.add_assign(&row);
    }
    Ok(acc.scale(1.0 / task.train.len() as f64))
}

/// Embed a single piece of text (e.g. a task's instruction template)
/// through the encoder; used by zero-shot routing, where no labeled
/// examples exist.
pub fn text_emb_text(
    text: &str,
    model: &Model,
    vocab: &Vocab,
    weights: &Tensor64,
    mode: TextMode,
) -> Result<Tensor64> {
    let mut ids = vocab.encode(text)?;
    ids.truncate(model.config.max_seq_len);
    if ids.is_empty() {
        return Err(Error::data("template text has no tokens"));
    }
    let d = model.config.d_model;
    let tape: Tape<S> = Tape::new();
    let binder = ParamBinder::new(&tape);
    let enc = model
        .encode(&binder, &ids, &Routing::Const(weights), false)?
        .value();
    match mode {
        TextMode::Bos => Tensor::new(vec![d], enc.row(0).to_vec()),
        TextMode::Avg => {
            let mut mean = Tensor64::zeros(&[d]);
            for r in 0..enc.rows() {
                for c in 0..d {
                    mean.data_mut()[c] += enc.at(r, c);
                }
            }
            Ok(mean.scale(1.0 / enc.rows() as f64))
        }
    }
}

/// One deterministic pass of single-example fine-tuning steps over the
/// task's training split (examples taken in rotation).
fn fine_tune(
    model: &mut Model,
    task: &TaskDataset,
    vocab: &Vocab,
    weights: &Tensor64,
    steps: usize,
    lr: f64,
    with_adapters: bool,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let mut adam = AdamState::new(&model.store);
    for step in 0..steps {
        let e = &task.train[step % task.train.len()];
        let input = vocab.encode(&e.x)?;
        let mut target = vocab.encode(&e.y)?;
        target.push(crate::model::EOS_ID);
        target.truncate(model.config.max_seq_len);
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let (_, loss) = model.forward_opt(
            &binder,
            &input,
            &target,
            &Routing::Const(weights),
            with_adapters,
        )?;
        let grads = tape.backward(loss)?;
        let pairs = binder.collect_grads(&grads);
        adam.step(&mut model.store, &pairs, &[lr, lr, lr])?;
    }
    Ok(())
}

/// Fine-tune a clone of the model on the task, then embed with the tuned
/// clone. The source model is untouched; zero steps reduce to [`text_emb`].
pub fn ft_text_emb(
    task: &TaskDataset,
    model: &Model,
    vocab: &Vocab,
    weights: &Tensor64,
    mode: TextMode,
    steps: usize,
    lr: f64,
) -> Result<Tensor64> {
    let mut tuned = model.clone();
    fine_tune(&mut tuned, task, vocab, weights, steps, lr, false)?;
    text_emb(task, &tuned, vocab, weights, mode)
}

/// Empirical Fisher diagonal from per-example gradients: the elementwise
/// mean of squared gradients.
pub fn fisher_diag_from_grads(grads: &[Tensor64]) -> Result<Tensor64> {
    let first = grads
        .first()
        .ok_or_else(|| Error::data("fisher diagonal needs at least one gradient"))?;
    let mut acc = Tensor64::zeros(first.shape());
    for g in grads {
        if g.shape() != first.shape() {
            return Err(Error::shape("per-example gradients disagree in shape"));
        }
        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += v * v;
        }
    }
    Ok(acc.scale(1.0 / grads.len() as f64))
}

/// Settings for the adapter-Fisher pipeline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FisherConfig {
    pub bottleneck: usize,
    pub tune_steps: usize,
    pub tune_lr: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            bottleneck: 8,
            tune_steps: 50,
            tune_lr: 1e-3,
        }
    }
}

/// Gradient of the per-example log-likelihood w.r.t. the adapter
/// parameters, flattened in adapter parameter order, one vector per
/// training example.
pub fn per_example_adapter_grads(
    model: &Model,
    task: &TaskDataset,
    vocab: &Vocab,
    weights: &Tensor64,
) -> Result<Vec<Tensor64>> {
    let adapter_ids: Vec<ParamId> = model
        .adapters
        .as_ref()
        .ok_or_else(|| Error::config("model has no adapters attached"))?
        .param_ids();
    let mut out = Vec::with_capacity(task.train.len());
    for e in &task.train {
        let input = vocab.encode(&e.x)?;
        let mut target = vocab.encode(&e.y)?;
        target.push(crate::model::EOS_ID);
        target.truncate(model.config.max_seq_len);
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let (_, loss) =
            model.forward_opt(&binder, &input, &target, &Routing::Const(weights), true)?;
        // cross_entropy averages over target tokens; scale back up so the
        // gradient is that of the summed log-likelihood of Eq. (2).
        let loss = loss.scale(target.len() as f64);
        let grads = tape.backward(loss)?;
        let by_id: std::collections::HashMap<usize, Tensor64> = binder
            .collect_grads(&grads)
            .into_iter()
            .map(|(id, g)| (id.0, g))
            .collect();
        let mut flat: Vec<f64> = Vec::new();
        for id in &adapter_ids {
            match by_id.get(&id.0) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat(0.0).take(model.store.get(*id).numel())),
            }
        }
        out.push(Tensor::new(vec![flat.len()], flat)?);
    }
    Ok(out)
}

/// Steps (1)-(2) of the Fisher pipeline for one task: attach fresh
/// adapters to a clone, fine-tune only the adapters, then return the
/// empirical Fisher diagonal over the adapter parameters.
pub fn adapter_fisher_diag(
    model: &Model,
    task: &TaskDataset,
    vocab: &Vocab,
    weights: &Tensor64,
    cfg: &FisherConfig,
    seed: u64,
) -> Result<Tensor64> {
    if task.train.is_empty() {
        return Err(Error::data(format!(
            "task '{}': no labeled examples for the Fisher diagonal",
            task.name
        )));
    }
    let mut tuned = model.clone();
    let mut rng = stream_rng(seed, Stream::Init);
    tuned.attach_adapters(cfg.bottleneck, &mut rng);
    let adapter_ids: std::collections::HashSet<usize> = tuned
        .adapters
        .as_ref()
        .unwrap()
        .param_ids()
        .iter()
        .map(|id| id.0)
        .collect();
    for id in tuned.store.ids().collect::<Vec<_>>() {
        if !adapter_ids.contains(&id.0) {
            tuned.store.set_frozen(id, true);
        }
    }
    fine_tune(&mut tuned, task, vocab, weights, cfg.tune_steps, cfg.tune_lr, true)?;
    let grads = per_example_adapter_grads(&tuned, task, vocab, weights)?;
    fisher_diag_from_grads(&grads)
}

/// Full Fisher pipeline over a task set: per-task diagonals, PCA down to
/// `d_out` (capped at task_count − 1 components, zero-padded back up), one
/// representation per task.
pub fn fisher_pca_reprs(
    model: &Model,
    tasks: &[&TaskDataset],
    vocab: &Vocab,
    weights: &Tensor64,
    d_out: usize,
    cfg: &FisherConfig,
    seed: u64,
) -> Result<Vec<TaskRepresentation>> {
    if tasks.len() < 2 {
        return Err(Error::config("fisher pca needs at least 2 tasks"));
    }
    let mut diags: Vec<Tensor64> = Vec::with_capacity(tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        let diag = adapter_fisher_diag(
            model,
            task,
            vocab,
            weights,
            cfg,
            crate::rngutil::derived_seed(seed, k as u64),
        )?;
        diags.push(diag);
    }
    let p = diags[0].numel();
    let mut rows = Tensor64::zeros(&[tasks.len(), p]);
    for (k, d) in diags.iter().enumerate() {
        for j in 0..p {
            rows.set(k, j, d.data()[j]);
        }
    }
    let eff = d_out.min(tasks.len() - 1);
    let scores = pca_reduce(&rows, eff)?;
    let mut out = Vec::with_capacity(tasks.len());
    for k in 0..tasks.len() {
        let mut v = Tensor64::zeros(&[d_out]);
        for c in 0..eff {
            v.data_mut()[c] = scores.at(k, c);
        }
        out.push(TaskRepresentation {
            task_id: k,
            provenance: Provenance::FisherPca,
            vector: v,
        });
    }
    Ok(out)
}

/// CSV export: task_id, provenance, then the vector entries.
pub fn export_reprs_csv(path: impl AsRef<Path>, reprs: &[TaskRepresentation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reprs {
        let mut rec = vec![r.task_id.to_string(), r.provenance.to_string()];
        rec.extend(r.vector.data().iter().map(|v| format!("{v:.17e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_reprs_csv(path: impl AsRef<Path>) -> Result<Vec<TaskRepresentation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::data("representation row needs id, provenance, values"));
        }
        let task_id: usize = rec[0]
            .parse()
            .map_err(|_| Error::data("bad task id in representation file"))?;
        let provenance = Provenance::from_str(&rec[1])?;
        let values: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::data("bad value in representation file"))
            })
            .collect::<Result<_>>()?;
        out.push(TaskRepresentation {
            task_id,
            provenance,
            vector: Tensor::new(vec![values.len()], values)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, CategoryKind, Example, Metric, TaskDataset, TaskFeatures};
    use crate::model::ModelConfig;
    use crate::rngutil::seeded_rng;
    use tempfile::tempdir;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            m_experts: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 35,
            max_seq_len: 16,
            noise_variance: 1e-8,
        }
    }

    fn tiny_model(seed: u64) -> Model {
        Model::new(tiny_config(), &mut seeded_rng(seed)).unwrap()
    }

    fn toy_task(name: &str, pairs: &[(&str, &str)]) -> TaskDataset {
        TaskDataset {
            name: name.to_string(),
            category: Category {
                kind: CategoryKind::Other,
                sub: "toy".to_string(),
            },
            metric: Metric::ExactMatch,
            is_classification: false,
            label_set: vec![],
            features: TaskFeatures::default(),
            train: pairs
                .iter()
                .map(|&(x, y)| Example {
                    x: x.to_string(),
                    y: y.to_string(),
                })
                .collect(),
            dev: vec![],
            test: vec![],
            rule: None,
        }
    }

    fn store_snapshot(model: &Model) -> Vec<Vec<f64>> {
        model
            .store
            .ids()
            .map(|id| model.store.get(id).data().to_vec())
            .collect()
    }

    #[test]
    fn random_repr_is_deterministic_and_scaled() {
        let a = random_repr(100_000, 7).unwrap();
        let b = random_repr(100_000, 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = random_repr(100_000, 8).unwrap();
        assert_ne!(a.data(), c.data());
        let mean: f64 = a.data().iter().sum::<f64>() / a.numel() as f64;
        let var: f64 =
            a.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / a.numel() as f64;
        let std = var.sqrt();
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((0.018..0.022).contains(&std), "std {std}");
        assert!(random_repr(0, 1).is_err());
    }

    #[test]
    fn single_token_avg_matches_direct_encoding() {
        let model = tiny_model(11);
        let vocab = Vocab::core();
        let w = model.config.uniform_routing();
        let task = toy_task("one", &[("a", "")]);
        let emb = text_emb(&task, &model, &vocab, &w, TextMode::Avg).unwrap();
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let ids = vocab.encode("a").unwrap();
        let enc = model
            .encode(&binder, &ids, &Routing::Const(&w), false)
            .unwrap()
            .value();
        for c in 0..model.config.d_model {
            assert!((emb.data()[c] - enc.at(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn bos_mode_takes_position_zero() {
        let model = tiny_model(11);
        let vocab = Vocab::core();
        let w = model.config.uniform_routing();
        let task = toy_task("t", &[("a b c", "d")]);
        let emb = text_emb(&task, &model, &vocab, &w, TextMode::Bos).unwrap();
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let ids = vocab.encode("a b c d").unwrap();
        let enc = model
            .encode(&binder, &ids, &Routing::Const(&w), false)
            .unwrap()
            .value();
        for c in 0..model.config.d_model {
            assert!((emb.data()[c] - enc.at(0, c)).abs() < 1e-15);
        }
        let avg = text_emb(&task, &model, &vocab, &w, TextMode::Avg).unwrap();
        assert_ne!(emb.data(), avg.data());
    }

    #[test]
    fn text_emb_example_mean_and_invariances() {
        let model = tiny_model(3);
        let vocab = Vocab::core();
        let w = model.config.uniform_routing();
        let t1 = toy_task("t1", &[("a b", "c")]);
        let t2 = toy_task("t2", &[("d e f", "g")]);
        let both = toy_task("both", &[("a b", "c"), ("d e f", "g")]);
        let e1 = text_emb(&t1, &model, &vocab, &w, TextMode::Avg).unwrap();
        let e2 = text_emb(&t2, &model, &vocab, &w, TextMode::Avg).unwrap();
        let eb = text_emb(&both, &model, &vocab, &w, TextMode::Avg).unwrap();
        for c in 0..model.config.d_model {
            let hand = 0.5 * (e1.data()[c] + e2.data()[c]);
            assert!((eb.data()[c] - hand).abs() < 1e-12);
        }

        let swapped = toy_task("swap", &[("d e f", "g"), ("a b", "c")]);
        let es = text_emb(&swapped, &model, &vocab, &w, TextMode::Avg).unwrap();
        for c in 0..model.config.d_model {
            assert!((eb.data()[c] - es.data()[c]).abs() < 1e-12);
        }

        let doubled = toy_task(
            "dup",
            &[("a b", "c"), ("d e f", "g"), ("a b", "c"), ("d e f", "g")],
        );
        let ed = text_emb(&doubled, &model, &vocab, &w, TextMode::Avg).unwrap();
        for c in 0..model.config.d_model {
            assert!((eb.data()[c] - ed.data()[c]).abs() < 1e-12);
        }

        assert!(text_emb(&toy_task("empty", &[]), &model, &vocab, &w, TextMode::Avg).is_err());
    }

    #[test]
    fn ft_text_emb_zero_steps_is_plain_and_source_is_untouched() {
        let model = tiny_model(5);
        let vocab = Vocab::core();
        let w = model.config.uniform_routing();
        let task = toy_task("t", &[("a b", "b a"), ("c d", "d c")]);
        let before = store_snapshot(&model);

        let plain = text_emb(&task, &model, &vocab, &w, TextMode::Avg).unwrap();
        let zero = ft_text_emb(&task, &model, &vocab, &w, TextMode::Avg, 0, 1e-3).unwrap();
        assert_eq!(plain.data(), zero.data());

        let tuned = ft_text_emb(&task, &model, &vocab, &w, TextMode::Avg, 3, 1e-3).unwrap();
        assert_ne!(plain.data(), tuned.data());
        assert!(tuned.all_finite());

        assert_eq!(before, store_snapshot(&model));
    }

    #[test]
    fn fisher_diag_hand_values() {
        let g1 = Tensor::<f64>::new(vec![2], vec![0.5, -1.0]).unwrap();
        let g2 = Tensor::<f64>::new(vec![2], vec![3.0, 0.0]).unwrap();
        let d = fisher_diag_from_grads(&[g1.clone(), g2]).unwrap();
        // (0.25 + 9)/2 and (1 + 0)/2.
        assert!((d.data()[0] - 4.625).abs() < 1e-12);
        assert!((d.data()[1] - 0.5).abs() < 1e-12);
        let single = fisher_diag_from_grads(&[g1]).unwrap();
        assert!((single.data()[0] - 0.25).abs() < 1e-12);
        assert!((single.data()[1] - 1.0).abs() < 1e-12);
        assert!(fisher_diag_from_grads(&[]).is_err());
    }

    #[test]
    fn fisher_diag_matches_logistic_closed_form() {
        // Binary logistic toy: logits [0, w] with w = 0 and target class 1.
        // d(-log p)/dw = softmax(w)_1 - 1 = -0.5, so the Fisher diagonal
        // from this single example is 0.25.
        let tape: Tape<f64> = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[1, 1]));
        let logits = crate::tape::Var::concat_cols(&[zero, w]);
        let loss = logits.cross_entropy(&[1], None).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.wrt(w).unwrap().clone();
        assert!((gw.data()[0] + 0.5).abs() < 1e-12);
        let diag = fisher_diag_from_grads(&[gw]).unwrap();
        assert!((diag.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn per_example_grads_touch_only_adapters() {
        let mut model = tiny_model(21);
        model.attach_adapters(4, &mut seeded_rng(1));
        let vocab = Vocab::core();
        let w = model.config.uniform_routing();
        let task = toy_task("t", &[("a b c", "c b a"), ("d e", "e d")]);
        let grads = per_example_adapter_grads(&model, &task, &vocab, &w).unwrap();
        assert_eq!(grads.len(), 2);
        let p: usize = model
            .adapters
            .as_ref()
            .unwrap()
            .param_ids()
            .iter()
            .map(|id| model.store.get(*id).numel())
            .sum();
        assert_eq!(grads[0].numel(), p);
        // Fresh adapters have zero up-projections, so gradients w.r.t. the
        // down-projections vanish while the up gradients do not.
        assert!(grads.iter().any(|g| g.data().iter().any(|v| *v != 0.0)));
        let diag = fisher_diag_from_grads(&grads).unwrap();
        assert!(diag.data().iter().all(|v| *v >= 0.0));

        let plain = tiny_model(21);
        assert!(per_example_adapter_grads(&plain, &task, &vocab, &w).is_err());
    }

    #[test]
    fn adapter_fisher_diag_is_deterministic_and_nonnegative() {
        let model = tiny_model(9);
        let vocab = Vocab::core();
        let w = model.config.uniform_routing();
        let task = toy_task("t", &[("a b", "b a"), ("c d e", "e d c")]);
        let cfg = FisherConfig {
            bottleneck: 4,
            tune_steps: 5,
            tune_lr: 1e-3,
        };
        let before = store_snapshot(&model);
        let d1 = adapter_fisher_diag(&model, &task, &vocab, &w, &cfg, 17).unwrap();
        let d2 = adapter_fisher_diag(&model, &task, &vocab, &w, &cfg, 17).unwrap();
        assert_eq!(d1.data(), d2.data());
        assert_eq!(before, store_snapshot(&model));

        let expected_p =
            model.config.n_layers * (2 * model.config.d_model * cfg.bottleneck + cfg.bottleneck);
        assert_eq!(d1.numel(), expected_p);
        assert!(d1.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
        assert!(d1.data().iter().any(|v| *v > 0.0));

        let d3 = adapter_fisher_diag(&model, &task, &vocab, &w, &cfg, 18).unwrap();
        assert_ne!(d1.data(), d3.data());
    }

    #[test]
    fn fisher_pca_caps_components_and_pads() {
        let model = tiny_model(2);
        let vocab = Vocab::core();
        let w = model.config.uniform_routing();
        let tasks = [
            toy_task("t0", &[("a b", "b a")]),
            toy_task("t1", &[("c d", "yes")]),
            toy_task("t2", &[("e f g", "g")]),
            toy_task("t3", &[("h i", "h h")]),
        ];
        let refs: Vec<&TaskDataset> = tasks.iter().collect();
        let cfg = FisherConfig {
            bottleneck: 2,
            tune_steps: 4,
            tune_lr: 1e-3,
        };
        let d_out = 8;
        let reprs = fisher_pca_reprs(&model, &refs, &vocab, &w, d_out, &cfg, 123).unwrap();
        assert_eq!(reprs.len(), 4);
        for (k, r) in reprs.iter().enumerate() {
            assert_eq!(r.task_id, k);
            assert_eq!(r.provenance, Provenance::FisherPca);
            r.validate(d_out).unwrap();
            // Only tasks - 1 = 3 components are identifiable; the rest pad
            // with zeros.
            assert!(r.vector.data()[3..].iter().all(|v| *v == 0.0));
        }
        // Scores are centered per component.
        for c in 0..3 {
            let mean: f64 =
                reprs.iter().map(|r| r.vector.data()[c]).sum::<f64>() / reprs.len() as f64;
            assert!(mean.abs() < 1e-8, "component {c} mean {mean}");
        }
        assert!(reprs.iter().any(|r| r.vector.data()[0] != 0.0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("reprs.csv");
        let reprs = vec![
            TaskRepresentation {
                task_id: 0,
                provenance: Provenance::Random,
                vector: Tensor::new(vec![3], vec![0.1, -2.5e-17, 3.0]).unwrap(),
            },
            TaskRepresentation {
                task_id: 7,
                provenance: Provenance::FisherPca,
                vector: Tensor::new(vec![3], vec![1.0 / 3.0, 0.0, -1.0]).unwrap(),
            },
        ];
        export_reprs_csv(&path, &reprs).unwrap();
        let loaded = import_reprs_csv(&path).unwrap();
        assert_eq!(loaded, reprs);
        assert!(Provenance::from_str("text_emb_avg").is_ok());
        assert!(Provenance::from_str("bogus").is_err());
    }
}
