//! Synthetic task suite, few-shot subsampling, meta-partitioning, manual
//! feature tables, and JSONL ingestion.
//!
//! All tasks are text-to-text over a small fixed vocabulary of
//! whitespace-separated symbol tokens, so no tokenizer is involved.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil::{derived_seed, stream_rng, Stream};

const LETTERS: [&str; 10] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
const N_KEYS: usize = 8;

/// Fixed symbol vocabulary shared by every task. Ids 0..3 are the special
/// tokens used by the model.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn core() -> Vocab {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        tokens.extend(LETTERS.iter().map(|s| s.to_string()));
        tokens.extend(["even", "odd", "yes", "no"].map(String::from));
        tokens.extend(["[", "]"].map(String::from));
        for i in 0..N_KEYS {
            tokens.push(format!("k{i}"));
        }
        for i in 0..N_KEYS {
            tokens.push(format!("v{i}"));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::data(format!("unknown token '{t}'")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    ExactMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKind {
    Classification,
    Qa,
    Generation,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub kind: CategoryKind,
    pub sub: String,
}

/// Ground-truth skill flags per task (Table-3 style taxonomy).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskFeatures {
    pub extractive: bool,
    pub sentence_completion: bool,
    pub linguistic: bool,
    pub commonsense: bool,
    pub coreference: bool,
    pub multi_hop: bool,
    pub implicit_knowledge: bool,
    pub synthesize: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub x: String,
    pub y: String,
}

/// The generating rule of a synthetic task; used by the brute-force
/// solvability check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Rule {
    Parity { target: String },
    Majority { labels: Vec<String> },
    PatternPresence { pattern: [String; 2] },
    CopySpan,
    FirstToken,
    LastToken,
    Lookup { table: BTreeMap<String, String> },
    Reverse,
    Sort,
    Duplicate,
}

impl Rule {
    pub fn apply(&self, x: &str) -> String {
        let toks: Vec<&str> = x.split_whitespace().collect();
        match self {
            Rule::Parity { target } => {
                let count = toks.iter().filter(|&&t| t == target).count();
                if count % 2 == 0 { "even" } else { "odd" }.to_string()
            }
            Rule::Majority { labels } => {
                let mut best = labels[0].as_str();
                let mut best_count = 0usize;
                for l in labels {
                    let c = toks.iter().filter(|&&t| t == l).count();
                    if c > best_count {
                        best_count = c;
                        best = l;
                    }
                }
                best.to_string()
            }
            Rule::PatternPresence { pattern } => {
                let hit = toks
                    .windows(2)
                    .any(|w| w[0] == pattern[0] && w[1] == pattern[1]);
                if hit { "yes" } else { "no" }.to_string()
            }
            Rule::CopySpan => {
                let open = toks.iter().position(|&t| t == "[").unwrap_or(0);
                let close = toks.iter().position(|&t| t == "]").unwrap_or(toks.len());
                toks[open + 1..close].join(" ")
            }
            Rule::FirstToken => toks.first().copied().unwrap_or("").to_string(),
            Rule::LastToken => toks.last().copied().unwrap_or("").to_string(),
            Rule::Lookup { table } => toks
                .iter()
                .find_map(|t| table.get(*t))
                .cloned()
                .unwrap_or_default(),
            Rule::Reverse => {
                let mut r = toks.clone();
                r.reverse();
                r.join(" ")
            }
            Rule::Sort => {
                let mut r = toks.clone();
                r.sort_unstable();
                r.join(" ")
            }
            Rule::Duplicate => format!("{} {}", toks.join(" "), toks.join(" ")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub category: Category,
    pub metric: Metric,
    pub is_classification: bool,
    pub label_set: Vec<String>,
    pub features: TaskFeatures,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Present for synthetic tasks only.
    pub rule: Option<Rule>,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&Example> = HashSet::new();
        for (split, examples) in [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ] {
            for e in examples {
                if e.x.trim().is_empty() || e.y.trim().is_empty() {
                    return Err(Error::data(format!(
                        "task '{}': empty text in {split} split",
                        self.name
                    )));
                }
                if !seen.insert(e) {
                    return Err(Error::data(format!(
                        "task '{}': example appears in more than one split (split leak)",
                        self.name
                    )));
                }
            }
        }
        if self.is_classification && self.label_set.len() < 2 {
            return Err(Error::data(format!(
                "task '{}': classification needs at least 2 labels",
                self.name
            )));
        }
        Ok(())
    }

    pub fn mean_input_tokens(&self) -> f64 {
        mean_tokens(self.train.iter().map(|e| e.x.as_str()))
    }

    pub fn mean_output_tokens(&self) -> f64 {
        mean_tokens(self.train.iter().map(|e| e.y.as_str()))
    }
}

fn mean_tokens<'a>(texts: impl Iterator<Item = &'a str>) -> f64 {
    let mut total = 0usize;
    let mut count = 0usize;
    for t in texts {
        total += t.split_whitespace().count();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

/// Which synthetic families to generate and how big each task is.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SuiteSpec {
    /// (family name, task count) pairs.
    pub families: Vec<(String, usize)>,
    pub min_len: usize,
    pub max_len: usize,
    pub train_per_task: usize,
    pub dev_per_task: usize,
    pub test_per_task: usize,
}

pub const FAMILY_NAMES: [&str; 10] = [
    "parity",
    "majority",
    "pattern",
    "copy_span",
    "first_token",
    "last_token",
    "lookup",
    "reverse",
    "sort",
    "duplicate",
];

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            families: FAMILY_NAMES.iter().map(|f| (f.to_string(), 3)).collect(),
            min_len: 4,
            max_len: 9,
            train_per_task: 48,
            dev_per_task: 32,
            test_per_task: 32,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        let kinds: HashSet<CategoryKind> = self
            .families
            .iter()
            .map(|(f, _)| family_category(f).map(|c| c.kind))
            .collect::<Result<_>>()?;
        if kinds.len() < 2 {
            return Err(Error::config(
                "suite spec must cover at least 2 categories",
            ));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::config("need 2 <= min_len <= max_len"));
        }
        Ok(())
    }
}

fn family_category(family: &str) -> Result<Category> {
    let (kind, sub) = match family {
        "parity" | "majority" | "pattern" => (CategoryKind::Classification, family),
        "copy_span" | "first_token" | "last_token" | "lookup" => (CategoryKind::Qa, family),
        "reverse" | "sort" | "duplicate" => (CategoryKind::Generation, family),
        other => return Err(Error::config(format!("unknown task family '{other}'"))),
    };
    Ok(Category {
        kind,
        sub: sub.to_string(),
    })
}

fn family_features(family: &str) -> TaskFeatures {
    let mut f = TaskFeatures::default();
    match family {
        "parity" => f.linguistic = true,
        "majority" => f.commonsense = true,
        "pattern" => {
            f.linguistic = true;
            f.coreference = true;
        }
        "copy_span" => f.extractive = true,
        "first_token" => f.extractive = true,
        "last_token" => {
            f.extractive = true;
            f.sentence_completion = true;
        }
        "lookup" => f.implicit_knowledge = true,
        "reverse" => f.synthesize = true,
        "sort" => {
            f.synthesize = true;
            f.multi_hop = true;
        }
        "duplicate" => {
            f.synthesize = true;
            f.sentence_completion = true;
        }
        _ => {}
    }
    f
}

fn family_metric(family: &str) -> Metric {
    match family {
        "parity" | "pattern" => Metric::Accuracy,
        "majority" => Metric::MacroF1,
        _ => Metric::ExactMatch,
    }
}

/// Generate the full synthetic suite; identical (spec, seed) pairs give
/// identical suites.
pub fn generate_suite(spec: &SuiteSpec, seed: u64) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let mut tasks = Vec::new();
    let mut task_index = 0u64;
    for (family, count) in &spec.families {
        for variant in 0..*count {
            let task_seed = derived_seed(seed, task_index);
            let mut rng = stream_rng(task_seed, Stream::Suite);
            tasks.push(generate_task(spec, family, variant, &mut rng)?);
            task_index += 1;
        }
    }
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

fn sample_letters(rng: &mut ChaCha8Rng, len: usize, alphabet: &[&str]) -> Vec<String> {
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string())
        .collect()
}

fn generate_task(
    spec: &SuiteSpec,
    family: &str,
    variant: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskDataset> {
    let category = family_category(family)?;
    let total = spec.train_per_task + spec.dev_per_task + spec.test_per_task;
    let (rule, label_set) = make_rule(family, variant, rng);
    let mut seen: HashSet<String> = HashSet::new();
    let mut examples: Vec<Example> = Vec::with_capacity(total);
    let mut class_cursor = 0usize;
    let mut attempts = 0usize;
    while examples.len() < total {
        attempts += 1;
        if attempts > total * 1000 {
            return Err(Error::data(format!(
                "could not generate {total} distinct examples for {family}#{variant}"
            )));
        }
        // Cycle target classes so classification pools stay balanced.
        let target_class = if label_set.is_empty() {
            None
        } else {
            Some(label_set[class_cursor % label_set.len()].as_str())
        };
        let x = match make_input(family, &rule, target_class, spec, rng) {
            Some(x) => x,
            None => continue,
        };
        if !seen.insert(x.clone()) {
            continue;
        }
        let y = rule.apply(&x);
        if let Some(c) = target_class {
            if y != c {
                seen.remove(&x);
                continue;
            }
        }
        examples.push(Example { x, y });
        class_cursor += 1;
    }
    let dev_at = spec.train_per_task;
    let test_at = dev_at + spec.dev_per_task;
    Ok(TaskDataset {
        name: format!("{family}_{variant}"),
        metric: family_metric(family),
        is_classification: category.kind == CategoryKind::Classification,
        label_set,
        features: family_features(family),
        train: examples[..dev_at].to_vec(),
        dev: examples[dev_at..test_at].to_vec(),
        test: examples[test_at..].to_vec(),
        rule: Some(rule),
        category,
    })
}

fn make_rule(family: &str, variant: usize, rng: &mut ChaCha8Rng) -> (Rule, Vec<String>) {
    match family {
        "parity" => {
            let target = LETTERS[variant % LETTERS.len()].to_string();
            (
                Rule::Parity { target },
                vec!["even".into(), "odd".into()],
            )
        }
        "majority" => {
            let labels: Vec<String> = (0..3)
                .map(|i| LETTERS[(variant + i) % LETTERS.len()].to_string())
                .collect();
            (Rule::Majority { labels: labels.clone() }, labels)
        }
        "pattern" => {
            let a = LETTERS[variant % LETTERS.len()].to_string();
            let b = LETTERS[(variant + 1 + variant % 3) % LETTERS.len()].to_string();
            (
                Rule::PatternPresence { pattern: [a, b] },
                vec!["yes".into(), "no".into()],
            )
        }
        "copy_span" => (Rule::CopySpan, vec![]),
        "first_token" => (Rule::FirstToken, vec![]),
        "last_token" => (Rule::LastToken, vec![]),
        "lookup" => {
            let mut values: Vec<usize> = (0..N_KEYS).collect();
            values.shuffle(rng);
            let table: BTreeMap<String, String> = (0..N_KEYS)
                .map(|k| (format!("k{k}"), format!("v{}", values[k])))
                .collect();
            (Rule::Lookup { table }, vec![])
        }
        "reverse" => (Rule::Reverse, vec![]),
        "sort" => (Rule::Sort, vec![]),
        "duplicate" => (Rule::Duplicate, vec![]),
        _ => unreachable!("validated family"),
    }
}

fn make_input(
    family: &str,
    rule: &Rule,
    target_class: Option<&str>,
    spec: &SuiteSpec,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    match (family, rule) {
        ("parity", Rule::Parity { target }) => {
            let mut toks = sample_letters(rng, len.max(3) - 1, &LETTERS);
            let count = toks.iter().filter(|t| *t == target).count();
            let want_odd = target_class == Some("odd");
            if (count % 2 == 1) != want_odd {
                toks.push(target.clone());
            } else {
                toks.push(pick_other(rng, target));
            }
            Some(toks.join(" "))
        }
        ("majority", Rule::Majority { labels }) => {
            let alphabet: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
            let mut toks = sample_letters(rng, len, &alphabet);
            let c = target_class?;
            // Force a strict majority of the target class.
            let max_other = labels
                .iter()
                .filter(|l| l.as_str() != c)
                .map(|l| toks.iter().filter(|t| t.as_str() == l.as_str()).count())
                .max()
                .unwrap_or(0);
            let mut mine = toks.iter().filter(|t| t.as_str() == c).count();
            while mine <= max_other {
                toks.push(c.to_string());
                mine += 1;
            }
            toks.shuffle(rng);
            Some(toks.join(" "))
        }
        ("pattern", Rule::PatternPresence { pattern }) => {
            let mut toks = sample_letters(rng, len, &LETTERS);
            if target_class == Some("yes") {
                let at = rng.gen_range(0..toks.len());
                toks.insert(at, pattern[1].clone());
                toks.insert(at, pattern[0].clone());
            }
            Some(toks.join(" "))
        }
        ("copy_span", _) => {
            let span_len = rng.gen_range(1..=3usize);
            let prefix = sample_letters(rng, len / 2, &LETTERS);
            let span = sample_letters(rng, span_len, &LETTERS);
            let suffix = sample_letters(rng, len - len / 2, &LETTERS);
            let mut toks = prefix;
            toks.push("[".into());
            toks.extend(span);
            toks.push("]".into());
            toks.extend(suffix);
            Some(toks.join(" "))
        }
        ("first_token" | "last_token" | "reverse" | "sort" | "duplicate", _) => {
            Some(sample_letters(rng, len, &LETTERS).join(" "))
        }
        ("lookup", _) => {
            let key = rng.gen_range(0..N_KEYS);
            let mut toks = vec![format!("k{key}")];
            toks.extend(sample_letters(rng, 2, &LETTERS));
            Some(toks.join(" "))
        }
        _ => None,
    }
}

fn pick_other(rng: &mut ChaCha8Rng, not: &str) -> String {
    loop {
        let c = LETTERS[rng.gen_range(0..LETTERS.len())];
        if c != not {
            return c.to_string();
        }
    }
}

/// Few-shot view of a task: 16 train/dev examples for classification, 32
/// otherwise; sampled without replacement, label-balanced within ±1.
pub fn few_shot_subsample(task: &TaskDataset, seed: u64) -> Result<TaskDataset> {
    let k = if task.is_classification { 16 } else { 32 };
    let mut rng = stream_rng(seed, Stream::Partition);
    let train = subsample_split(&task.train, k, task, &mut rng)?;
    let dev = subsample_split(&task.dev, k, task, &mut rng)?;
    Ok(TaskDataset {
        train,
        dev,
        ..task.clone()
    })
}

fn subsample_split(
    pool: &[Example],
    k: usize,
    task: &TaskDataset,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    if pool.len() < k {
        return Err(Error::data(format!(
            "task '{}': need {k} examples, split has {}",
            task.name,
            pool.len()
        )));
    }
    if !task.is_classification {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(rng);
        idx.truncate(k);
        idx.sort_unstable();
        return Ok(idx.into_iter().map(|i| pool[i].clone()).collect());
    }
    // Round-robin over classes keeps per-class counts within one.
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in pool.iter().enumerate() {
        by_class.entry(e.y.as_str()).or_default().push(i);
    }
    for bucket in by_class.values_mut() {
        bucket.shuffle(rng);
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut round = 0usize;
    while chosen.len() < k {
        let mut progressed = false;
        for bucket in by_class.values() {
            if chosen.len() == k {
                break;
            }
            if let Some(&i) = bucket.get(round) {
                chosen.push(i);
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::data(format!(
                "task '{}': classes exhausted before reaching {k} examples",
                task.name
            )));
        }
        round += 1;
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPartition {
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
}

/// Seeded stratified split: meta-test draws round-robin across top-level
/// categories so each is represented when `n_test` allows.
pub fn partition(tasks: &[TaskDataset], n_test: usize, seed: u64) -> Result<MetaPartition> {
    if n_test > tasks.len() {
        return Err(Error::config(format!(
            "cannot hold out {n_test} of {} tasks",
            tasks.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition);
    let mut by_kind: BTreeMap<CategoryKind, Vec<usize>> = BTreeMap::new();
    for (i, t) in tasks.iter().enumerate() {
        by_kind.entry(t.category.kind).or_default().push(i);
    }
    for bucket in by_kind.values_mut() {
        bucket.shuffle(&mut rng);
    }
    let mut meta_test: Vec<usize> = Vec::with_capacity(n_test);
    let mut round = 0usize;
    while meta_test.len() < n_test {
        let mut progressed = false;
        for bucket in by_kind.values() {
            if meta_test.len() == n_test {
                break;
            }
            if let Some(&i) = bucket.get(round) {
                meta_test.push(i);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
        round += 1;
    }
    meta_test.sort_unstable();
    let test_set: HashSet<usize> = meta_test.iter().copied().collect();
    let meta_train: Vec<usize> = (0..tasks.len()).filter(|i| !test_set.contains(i)).collect();
    Ok(MetaPartition {
        meta_train,
        meta_test,
    })
}

/// Declares everything about an ingested task that the data itself cannot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestManifest {
    pub name: String,
    pub category: CategoryKind,
    pub subcategory: String,
    pub metric: Metric,
    #[serde(default)]
    pub features: TaskFeatures,
    #[serde(default)]
    pub label_set: Vec<String>,
    /// train/dev/test fractions; must sum to 1.
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Deserialize)]
struct JsonlLine {
    input: String,
    output: String,
}

/// Load a task from a JSONL file of `{"input", "output"}` objects, split
/// sequentially by the manifest ratios.
pub fn ingest_jsonl(path: impl AsRef<Path>, manifest: &IngestManifest) -> Result<TaskDataset> {
    let ratio_sum: f64 = manifest.split_ratios.iter().sum();
    if (ratio_sum - 1.0).abs() > 1e-9 || manifest.split_ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::config("split ratios must be nonnegative and sum to 1"));
    }
    if manifest.name.trim().is_empty() {
        return Err(Error::config("manifest is missing a task name"));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut examples: Vec<Example> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if parsed.input.trim().is_empty() || parsed.output.trim().is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty input or output".into(),
            });
        }
        examples.push(Example {
            x: parsed.input,
            y: parsed.output,
        });
    }
    if examples.is_empty() {
        return Err(Error::data(format!(
            "no examples in {}",
            path.as_ref().display()
        )));
    }
    let n = examples.len();
    let n_train = (n as f64 * manifest.split_ratios[0]).round() as usize;
    let n_dev = (n as f64 * manifest.split_ratios[1]).round() as usize;
    let n_train = n_train.min(n);
    let n_dev = n_dev.min(n - n_train);
    let task = TaskDataset {
        name: manifest.name.clone(),
        category: Category {
            kind: manifest.category,
            sub: manifest.subcategory.clone(),
        },
        metric: manifest.metric,
        is_classification: manifest.category == CategoryKind::Classification,
        label_set: manifest.label_set.clone(),
        features: manifest.features.clone(),
        train: examples[..n_train].to_vec(),
        dev: examples[n_train..n_train + n_dev].to_vec(),
        test: examples[n_train + n_dev..].to_vec(),
        rule: None,
    };
    task.validate()?;
    Ok(task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub feature_names: Vec<String>,
    pub task_names: Vec<String>,
    /// `matrix[f][k]` = feature f of task k, in {0, 1}.
    pub matrix: Vec<Vec<u8>>,
}

impl FeatureTable {
    pub fn feature_row(&self, name: &str) -> Option<&[u8]> {
        self.feature_names
            .iter()
            .position(|f| f == name)
            .map(|i| self.matrix[i].as_slice())
    }
}

/// Binary feature matrix over the given (meta-train) tasks: format flags,
/// input-length quartile buckets, fixed output-length buckets, domain, and
/// the ground-truth skill flags.
pub fn build_feature_table(tasks: &[&TaskDataset]) -> Result<FeatureTable> {
    if tasks.is_empty() {
        return Err(Error::config("feature table needs at least one task"));
    }
    let inputs: Vec<f64> = tasks.iter().map(|t| t.mean_input_tokens()).collect();
    let mut sorted = inputs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);

    let names: Vec<String> = [
        "isClassification",
        "isQA",
        "isGeneration",
        "hasShortInput",
        "hasMediumInput",
        "hasLongInput",
        "hasShortOutput",
        "hasMediumOutput",
        "hasLongOutput",
        "domainSymbolic",
        "Extractive",
        "SentenceCompletion",
        "Linguistic",
        "Commonsense",
        "Coreference",
        "MultiHop",
        "ImplicitKnowledge",
        "Synthesize",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut matrix = vec![vec![0u8; tasks.len()]; names.len()];
    for (k, t) in tasks.iter().enumerate() {
        let mut set = |name: &str, v: bool| {
            let i = names.iter().position(|n| n == name).unwrap();
            matrix[i][k] = v as u8;
        };
        set(
            "isClassification",
            t.category.kind == CategoryKind::Classification,
        );
        set("isQA", t.category.kind == CategoryKind::Qa);
        set("isGeneration", t.category.kind == CategoryKind::Generation);
        // Boundary ties go to the medium bucket.
        let mi = inputs[k];
        set("hasShortInput", mi < q1);
        set("hasLongInput", mi > q3);
        set("hasMediumInput", mi >= q1 && mi <= q3);
        let mo = t.mean_output_tokens();
        set("hasShortOutput", mo < 3.0);
        set("hasLongOutput", mo > 10.0);
        set("hasMediumOutput", (3.0..=10.0).contains(&mo));
        set("domainSymbolic", t.rule.is_some());
        set("Extractive", t.features.extractive);
        set("SentenceCompletion", t.features.sentence_completion);
        set("Linguistic", t.features.linguistic);
        set("Commonsense", t.features.commonsense);
        set("Coreference", t.features.coreference);
        set("MultiHop", t.features.multi_hop);
        set("ImplicitKnowledge", t.features.implicit_knowledge);
        set("Synthesize", t.features.synthesize);
    }
    Ok(FeatureTable {
        feature_names: names,
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        matrix,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Convenience: default 30-task suite split 24 meta-train / 6 meta-test.
pub fn default_suite(seed: u64) -> Result<(Vec<TaskDataset>, MetaPartition)> {
    let tasks = generate_suite(&SuiteSpec::default(), seed)?;
    let part = partition(&tasks, 6, derived_seed(seed, 0xF00D))?;
    Ok((tasks, part))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> Vec<TaskDataset> {
        generate_suite(&SuiteSpec::default(), 7).unwrap()
    }

    #[test]
    fn vocab_is_small_and_round_trips() {
        let v = Vocab::core();
        assert!(v.len() <= 128);
        let ids = v.encode("a b [ k3 ] even").unwrap();
        assert_eq!(v.decode(&ids), "a b [ k3 ] even");
        assert!(v.encode("zebra").is_err());
        assert_eq!(v.id("<pad>"), Some(0));
        assert_eq!(v.id("<bos>"), Some(1));
        assert_eq!(v.id("<eos>"), Some(2));
    }

    #[test]
    fn same_seed_gives_identical_suite() {
        let a = suite();
        let b = suite();
        assert_eq!(a, b);
        let c = generate_suite(&SuiteSpec::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_example_fits_the_vocabulary() {
        let v = Vocab::core();
        for t in suite() {
            for e in t.train.iter().chain(&t.dev).chain(&t.test) {
                v.encode(&e.x).unwrap();
                v.encode(&e.y).unwrap();
            }
        }
    }

    #[test]
    fn extraction_outputs_are_substrings_of_inputs() {
        for t in suite() {
            if !t.features.extractive {
                continue;
            }
            for e in t.train.iter().chain(&t.dev).chain(&t.test) {
                let x: Vec<&str> = e.x.split_whitespace().collect();
                let y: Vec<&str> = e.y.split_whitespace().collect();
                assert!(!y.is_empty());
                let found = x
                    .windows(y.len())
                    .any(|w| w == y.as_slice());
                assert!(found, "task {}: '{}' not inside '{}'", t.name, e.y, e.x);
            }
        }
    }

    #[test]
    fn classification_label_sets_match_family_definitions() {
        for t in suite() {
            match t.category.sub.as_str() {
                "parity" | "pattern" => assert_eq!(t.label_set.len(), 2),
                "majority" => assert_eq!(t.label_set.len(), 3),
                _ => assert!(!t.is_classification),
            }
            if t.is_classification {
                for e in &t.train {
                    assert!(t.label_set.contains(&e.y));
                }
            }
        }
    }

    #[test]
    fn rule_evaluator_solves_every_task_perfectly() {
        for t in suite() {
            let rule = t.rule.as_ref().unwrap();
            for e in t.test.iter().chain(&t.train).chain(&t.dev) {
                assert_eq!(rule.apply(&e.x), e.y, "task {}", t.name);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized_per_spec() {
        let spec = SuiteSpec::default();
        for t in suite() {
            assert_eq!(t.train.len(), spec.train_per_task);
            assert_eq!(t.dev.len(), spec.dev_per_task);
            assert_eq!(t.test.len(), spec.test_per_task);
            t.validate().unwrap();
        }
    }

    #[test]
    fn few_shot_sizes_depend_on_task_type() {
        let tasks = suite();
        let cls = tasks.iter().find(|t| t.is_classification).unwrap();
        let r#gen = tasks
            .iter()
            .find(|t| t.category.kind == CategoryKind::Generation)
            .unwrap();
        let fs_cls = few_shot_subsample(cls, 1).unwrap();
        assert_eq!(fs_cls.train.len(), 16);
        assert_eq!(fs_cls.dev.len(), 16);
        let fs_gen = few_shot_subsample(r#gen, 1).unwrap();
        assert_eq!(fs_gen.train.len(), 32);
        assert_eq!(fs_gen.dev.len(), 32);
        assert_eq!(fs_gen.test, r#gen.test);
        let other = few_shot_subsample(r#gen, 2).unwrap();
        assert_ne!(fs_gen.train, other.train);
    }

    #[test]
    fn few_shot_classification_is_label_balanced() {
        for t in suite().iter().filter(|t| t.is_classification) {
            let fs = few_shot_subsample(t, 3).unwrap();
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for e in &fs.train {
                *counts.entry(e.y.as_str()).or_default() += 1;
            }
            let max = counts.values().max().unwrap();
            let min = counts.values().min().unwrap();
            assert!(max - min <= 1, "task {}: counts {counts:?}", t.name);
        }
    }

    #[test]
    fn few_shot_rejects_insufficient_pools() {
        let mut t = suite().remove(0);
        t.train.truncate(5);
        assert!(few_shot_subsample(&t, 1).is_err());
    }

    #[test]
    fn partition_laws_hold() {
        let tasks = suite();
        let p = partition(&tasks, 0, 1).unwrap();
        assert!(p.meta_test.is_empty());
        assert_eq!(p.meta_train.len(), tasks.len());

        let p = partition(&tasks, 6, 5).unwrap();
        assert_eq!(p.meta_test.len(), 6);
        let mut all: Vec<usize> = p.meta_train.iter().chain(&p.meta_test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..tasks.len()).collect::<Vec<_>>());
        assert_eq!(p, partition(&tasks, 6, 5).unwrap());
        assert_ne!(p, partition(&tasks, 6, 6).unwrap());

        // Stratification: every top-level category lands in meta-test.
        let kinds: HashSet<CategoryKind> = p
            .meta_test
            .iter()
            .map(|&i| tasks[i].category.kind)
            .collect();
        assert_eq!(kinds.len(), 3);
    }

    fn manifest() -> IngestManifest {
        IngestManifest {
            name: "mytask".into(),
            category: CategoryKind::Qa,
            subcategory: "custom".into(),
            metric: Metric::ExactMatch,
            features: TaskFeatures::default(),
            label_set: vec![],
            split_ratios: [0.4, 0.3, 0.3],
        }
    }

    #[test]
    fn ingest_loads_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let lines: Vec<String> = (0..10)
            .map(|i| format!(r#"{{"input": "q {i}", "output": "a {i}"}}"#))
            .collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let t = ingest_jsonl(&path, &manifest()).unwrap();
        assert_eq!(t.train.len(), 4);
        assert_eq!(t.dev.len(), 3);
        assert_eq!(t.test.len(), 3);
        assert_eq!(t.train[0].x, "q 0");
        assert_eq!(t.name, "mytask");
    }

    #[test]
    fn ingest_rejects_empty_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(ingest_jsonl(&empty, &manifest()).is_err());

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"input\": \"x\", \"output\": \"y\"}\nnot json\n").unwrap();
        let err = ingest_jsonl(&bad, &manifest()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn ingest_rejects_split_leaks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let mut lines: Vec<String> = (0..9)
            .map(|i| format!(r#"{{"input": "q {i}", "output": "a {i}"}}"#))
            .collect();
        // A duplicate of a train-split line placed in the test region.
        lines.push(r#"{"input": "q 0", "output": "a 0"}"#.into());
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = ingest_jsonl(&path, &manifest()).unwrap_err();
        assert!(err.to_string().contains("split leak"), "got: {err}");
    }

    #[test]
    fn feature_table_buckets_are_exclusive_and_thresholds_hold() {
        let tasks = suite();
        let refs: Vec<&TaskDataset> = tasks.iter().collect();
        let ft = build_feature_table(&refs).unwrap();
        assert_eq!(ft.task_names.len(), tasks.len());
        let idx = |n: &str| ft.feature_names.iter().position(|f| f == n).unwrap();
        for k in 0..tasks.len() {
            let in_buckets = ["hasShortInput", "hasMediumInput", "hasLongInput"]
                .iter()
                .map(|n| ft.matrix[idx(n)][k] as u32)
                .sum::<u32>();
            assert_eq!(in_buckets, 1, "task {}", ft.task_names[k]);
            let out_buckets = ["hasShortOutput", "hasMediumOutput", "hasLongOutput"]
                .iter()
                .map(|n| ft.matrix[idx(n)][k] as u32)
                .sum::<u32>();
            assert_eq!(out_buckets, 1);
            if tasks[k].is_classification {
                assert_eq!(ft.matrix[idx("hasShortOutput")][k], 1);
            }
            if tasks[k].category.sub == "duplicate" {
                // duplicate outputs average 2 * mean(len) > 10 tokens
                assert_eq!(ft.matrix[idx("hasLongOutput")][k], 1);
            }
        }
        for v in &ft.matrix {
            assert!(v.iter().all(|&b| b <= 1));
        }
    }

    #[test]
    fn identical_input_lengths_all_bucket_medium() {
        let mut tasks = suite();
        tasks.truncate(3);
        for t in &mut tasks {
            // Same fixed input everywhere: quartiles collapse, ties go to
            // the medium bucket.
            for e in t.train.iter_mut() {
                e.x = "a b c".into();
            }
        }
        let refs: Vec<&TaskDataset> = tasks.iter().collect();
        let ft = build_feature_table(&refs).unwrap();
        let medium = ft.feature_row("hasMediumInput").unwrap();
        assert!(medium.iter().all(|&v| v == 1));
    }
}
