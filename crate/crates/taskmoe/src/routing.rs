//! Task routing: embedding table, router networks, selection functions,
//! temperature annealing, and expert disabling.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBinder, ParamId, ParamStore, GROUP_REPR, GROUP_ROUTER};
use crate::scalar::Scalar;
use crate::tape::{row_hardmax_tensor, row_softmax_tensor, Var};
use crate::tensor::Tensor;

type S = crate::F;
type Tensor64 = Tensor<S>;

/// Per-task representation rows, each its own parameter so single rows can
/// be frozen.
#[derive(Clone, Debug)]
pub struct TaskEmbeddingTable {
    pub store: ParamStore<S>,
    rows: Vec<ParamId>,
    d: usize,
}

impl TaskEmbeddingTable {
    pub fn new(d: usize) -> TaskEmbeddingTable {
        TaskEmbeddingTable {
            store: ParamStore::new(),
            rows: Vec::new(),
            d,
        }
    }

    pub fn from_vectors(vectors: &[Tensor64]) -> Result<TaskEmbeddingTable> {
        let d = vectors
            .first()
            .ok_or_else(|| Error::config("task table needs at least one row"))?
            .numel();
        let mut table = TaskEmbeddingTable::new(d);
        for v in vectors {
            table.push_row(v.clone())?;
        }
        Ok(table)
    }

    pub fn push_row(&mut self, v: Tensor64) -> Result<usize> {
        if v.numel() != self.d {
            return Err(Error::config(format!(
                "task embedding has {} entries, table dimension is {}",
                v.numel(),
                self.d
            )));
        }
        let data = v.into_data();
        let k = self.rows.len();
        let id = self.store.add(
            format!("task{k}"),
            Tensor::new(vec![1, self.d], data)?,
            GROUP_REPR,
        );
        self.rows.push(id);
        Ok(k)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row_id(&self, k: usize) -> ParamId {
        self.rows[k]
    }

    pub fn row(&self, k: usize) -> &Tensor64 {
        self.store.get(self.rows[k])
    }

    pub fn set_row(&mut self, k: usize, v: Tensor64) -> Result<()> {
        if v.numel() != self.d {
            return Err(Error::config("row dimension mismatch"));
        }
        let data = v.into_data();
        self.store
            .set(self.rows[k], Tensor::new(vec![1, self.d], data)?);
        Ok(())
    }

    pub fn set_frozen(&mut self, k: usize, frozen: bool) {
        self.store.set_frozen(self.rows[k], frozen);
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for k in 0..self.rows.len() {
            self.set_frozen(k, frozen);
        }
    }

    pub fn bind<'t>(&self, binder: &ParamBinder<'t, S>, k: usize) -> Var<'t, S> {
        binder.bind(&self.store, self.rows[k])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterVariant {
    Mlp,
    BiLstm,
    TransformerEnc,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RouterConfig {
    pub variant: RouterVariant,
    /// Task representation dimension.
    pub d: usize,
    /// Layer count of the routed model (logit rows).
    pub n_layers: usize,
    /// Experts per layer (logit columns).
    pub m_experts: usize,
    /// Attention heads for the transformer-encoder variant.
    pub n_heads: usize,
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.m_experts == 0 {
            return Err(Error::config("router dimensions must be positive"));
        }
        if self.variant == RouterVariant::TransformerEnc && self.d % self.n_heads != 0 {
            return Err(Error::config(format!(
                "router d {} not divisible by n_heads {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

enum RouterParams {
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    BiLstm {
        pos: ParamId,
        /// (input weights [d,4h], hidden weights [h,4h], bias [4h]) for the
        /// forward and backward directions.
        fwd: (ParamId, ParamId, ParamId),
        bwd: (ParamId, ParamId, ParamId),
        head_w: ParamId,
        head_b: ParamId,
    },
    TransformerEnc {
        pos: ParamId,
        ln1_g: ParamId,
        ln1_b: ParamId,
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        ln2_g: ParamId,
        ln2_b: ParamId,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        head_w: ParamId,
        head_b: ParamId,
    },
}

/// Maps a task representation to n×m routing logits.
pub struct RouterNetwork {
    pub config: RouterConfig,
    pub store: ParamStore<S>,
    params: RouterParams,
}

impl RouterNetwork {
    pub fn new(config: RouterConfig, rng: &mut ChaCha8Rng) -> Result<RouterNetwork> {
        config.validate()?;
        let d = config.d;
        let n = config.n_layers;
        let m = config.m_experts;
        let mut store = ParamStore::new();
        fn w(
            store: &mut ParamStore<S>,
            rng: &mut ChaCha8Rng,
            name: &str,
            shape: &[usize],
        ) -> ParamId {
            store.add(name, Tensor::randn(shape, INIT_STD, rng), GROUP_ROUTER)
        }
        let params = match config.variant {
            RouterVariant::Mlp => {
                let hidden = 2 * d;
                RouterParams::Mlp {
                    w1: w(&mut store, rng, "w1", &[d, hidden]),
                    b1: store.add("b1", Tensor::zeros(&[2 * d]), GROUP_ROUTER),
                    w2: w(&mut store, rng, "w2", &[hidden, n * m]),
                    b2: store.add("b2", Tensor::zeros(&[n * m]), GROUP_ROUTER),
                }
            }
            RouterVariant::BiLstm => {
                let h = d;
                let dir = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, tag: &str| {
                    (
                        store.add(
                            format!("{tag}.wx"),
                            Tensor::randn(&[d, 4 * h], INIT_STD, rng),
                            GROUP_ROUTER,
                        ),
                        store.add(
                            format!("{tag}.wh"),
                            Tensor::randn(&[h, 4 * h], INIT_STD, rng),
                            GROUP_ROUTER,
                        ),
                        store.add(format!("{tag}.b"), Tensor::zeros(&[4 * h]), GROUP_ROUTER),
                    )
                };
                let pos = w(&mut store, rng, "pos", &[n, d]);
                let fwd = dir(&mut store, rng, "fwd");
                let bwd = dir(&mut store, rng, "bwd");
                RouterParams::BiLstm {
                    pos,
                    fwd,
                    bwd,
                    head_w: w(&mut store, rng, "head.w", &[2 * h, m]),
                    head_b: store.add("head.b", Tensor::zeros(&[m]), GROUP_ROUTER),
                }
            }
            RouterVariant::TransformerEnc => RouterParams::TransformerEnc {
                pos: w(&mut store, rng, "pos", &[n, d]),
                ln1_g: store.add("ln1.g", Tensor::ones(&[d]), GROUP_ROUTER),
                ln1_b: store.add("ln1.b", Tensor::zeros(&[d]), GROUP_ROUTER),
                wq: w(&mut store, rng, "wq", &[d, d]),
                wk: w(&mut store, rng, "wk", &[d, d]),
                wv: w(&mut store, rng, "wv", &[d, d]),
                wo: w(&mut store, rng, "wo", &[d, d]),
                ln2_g: store.add("ln2.g", Tensor::ones(&[d]), GROUP_ROUTER),
                ln2_b: store.add("ln2.b", Tensor::zeros(&[d]), GROUP_ROUTER),
                w1: w(&mut store, rng, "ff.w1", &[d, 2 * d]),
                b1: store.add("ff.b1", Tensor::zeros(&[2 * d]), GROUP_ROUTER),
                w2: w(&mut store, rng, "ff.w2", &[2 * d, d]),
                b2: store.add("ff.b2", Tensor::zeros(&[d]), GROUP_ROUTER),
                head_w: w(&mut store, rng, "head.w", &[d, m]),
                head_b: store.add("head.b", Tensor::zeros(&[m]), GROUP_ROUTER),
            },
        };
        Ok(RouterNetwork {
            config,
            store,
            params,
        })
    }

    /// Routing logits for one task representation (`t_k` is `[1, d]` or
    /// `[d]`); output is `[n_layers, m_experts]`.
    pub fn forward<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        t_k: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let shape = t_k.shape();
        let flat: usize = shape.iter().product();
        if flat != self.config.d {
            return Err(Error::config(format!(
                "task representation has {} entries, router expects {}",
                flat, self.config.d
            )));
        }
        let n = self.config.n_layers;
        let m = self.config.m_experts;
        let p = |id| binder.bind(&self.store, id);
        match &self.params {
            RouterParams::Mlp { w1, b1, w2, b2 } => {
                let flat_logits = t_k
                    .matmul(p(*w1))?
                    .add_row(p(*b1))
                    .gelu()
                    .matmul(p(*w2))?
                    .add_row(p(*b2));
                let rows: Vec<Var<'t, S>> = (0..n)
                    .map(|i| flat_logits.slice_cols(i * m, (i + 1) * m))
                    .collect();
                Ok(Var::concat_rows(&rows))
            }
            RouterParams::BiLstm {
                pos,
                fwd,
                bwd,
                head_w,
                head_b,
            } => {
                let pos_var = p(*pos);
                let inputs: Vec<Var<'t, S>> = (0..n)
                    .map(|i| t_k.add(pos_var.slice_row(i)))
                    .collect();
                let h_fwd = lstm_direction(binder, &self.store, *fwd, &inputs, false)?;
                let h_bwd = lstm_direction(binder, &self.store, *bwd, &inputs, true)?;
                let rows: Vec<Var<'t, S>> = (0..n)
                    .map(|i| {
                        Var::concat_cols(&[h_fwd[i], h_bwd[i]])
                            .matmul(p(*head_w))
                            .map(|v| v.add_row(p(*head_b)))
                    })
                    .collect::<Result<_>>()?;
                Ok(Var::concat_rows(&rows))
            }
            RouterParams::TransformerEnc {
                pos,
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
                head_w,
                head_b,
            } => {
                let pos_var = p(*pos);
                let tokens: Vec<Var<'t, S>> = (0..n)
                    .map(|i| t_k.add(pos_var.slice_row(i)))
                    .collect();
                let x = Var::concat_rows(&tokens);
                let normed = x.layer_norm(p(*ln1_g), p(*ln1_b), LN_EPS);
                let heads = self.config.n_heads;
                let dk = self.config.d / heads;
                let q = normed.matmul(p(*wq))?;
                let k = normed.matmul(p(*wk))?;
                let v = normed.matmul(p(*wv))?;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = q.slice_cols(h * dk, (h + 1) * dk);
                    let kh = k.slice_cols(h * dk, (h + 1) * dk);
                    let vh = v.slice_cols(h * dk, (h + 1) * dk);
                    let a = qh.matmul_nt(kh)?.scale(scale).row_softmax(1.0)?;
                    outs.push(a.matmul(vh)?);
                }
                let x = x.add(Var::concat_cols(&outs).matmul(p(*wo))?);
                let normed = x.layer_norm(p(*ln2_g), p(*ln2_b), LN_EPS);
                let ff = normed
                    .matmul(p(*w1))?
                    .add_row(p(*b1))
                    .gelu()
                    .matmul(p(*w2))?
                    .add_row(p(*b2));
                let x = x.add(ff);
                Ok(x.matmul(p(*head_w))?.add_row(p(*head_b)))
            }
        }
    }

    /// Noiseless logits as a plain tensor (evaluation paths).
    pub fn forward_tensor(&self, t_k: &Tensor64) -> Result<Tensor64> {
        let tape: crate::tape::Tape<S> = crate::tape::Tape::new();
        let binder = ParamBinder::new(&tape);
        let t = tape.constant(Tensor::new(
            vec![1, t_k.numel()],
            t_k.data().to_vec(),
        )?);
        Ok(self.forward(&binder, t)?.value())
    }
}

fn lstm_direction<'t>(
    binder: &ParamBinder<'t, S>,
    store: &ParamStore<S>,
    (wx, wh, b): (ParamId, ParamId, ParamId),
    inputs: &[Var<'t, S>],
    reverse: bool,
) -> Result<Vec<Var<'t, S>>> {
    let h_dim = store.get(wh).shape()[0];
    let tape = binder.tape();
    let mut h = tape.constant(Tensor::zeros(&[1, h_dim]));
    let mut c = tape.constant(Tensor::zeros(&[1, h_dim]));
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    let mut states = vec![h; inputs.len()];
    for &i in &order {
        let z = inputs[i]
            .matmul(binder.bind(store, wx))?
            .add(h.matmul(binder.bind(store, wh))?)
            .add_row(binder.bind(store, b));
        let gi = z.slice_cols(0, h_dim).sigmoid();
        let gf = z.slice_cols(h_dim, 2 * h_dim).sigmoid();
        let gg = z.slice_cols(2 * h_dim, 3 * h_dim).tanh();
        let go = z.slice_cols(3 * h_dim, 4 * h_dim).sigmoid();
        c = gf.mul(c).add(gi.mul(gg));
        h = go.mul(c.tanh());
        states[i] = h;
    }
    Ok(states)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionFn {
    Softmax,
    Gumbel,
    GumbelSt,
}

impl fmt::Display for SelectionFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SelectionFn::Softmax => "softmax",
            SelectionFn::Gumbel => "gumbel",
            SelectionFn::GumbelSt => "gumbel_st",
        };
        f.write_str(s)
    }
}

impl FromStr for SelectionFn {
    type Err = Error;
    fn from_str(s: &str) -> Result<SelectionFn> {
        match s {
            "softmax" => Ok(SelectionFn::Softmax),
            "gumbel" => Ok(SelectionFn::Gumbel),
            "gumbel_st" => Ok(SelectionFn::GumbelSt),
            other => Err(Error::config(format!("unknown selection fn '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn gumbel_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let u: f64 = f64::uniform_open01(rng);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Selection on plain tensors (no gradients).
pub fn select_tensor(
    logits: &Tensor64,
    selection: SelectionFn,
    tau: f64,
    rng: Option<&mut ChaCha8Rng>,
    mode: Mode,
) -> Result<Tensor64> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    match (selection, mode) {
        (SelectionFn::Softmax, _) => row_softmax_tensor(logits, tau),
        (SelectionFn::Gumbel | SelectionFn::GumbelSt, Mode::Eval) => {
            check_rows_selectable(logits)?;
            Ok(row_hardmax_tensor(logits))
        }
        (SelectionFn::Gumbel, Mode::Train) => {
            let rng = rng.ok_or_else(|| Error::config("gumbel selection needs an rng"))?;
            // Noise is scaled by τ so that softmax((L + τG)/τ) = softmax(L/τ + G);
            // by the Gumbel-max property the induced argmax then samples from
            // softmax(L/τ), making annealing sharpen the sampled decisions.
            let noisy = logits.add(&gumbel_noise(logits.shape(), rng).scale(tau));
            row_softmax_tensor(&masked_noise_fix(logits, noisy), tau)
        }
        (SelectionFn::GumbelSt, Mode::Train) => {
            let rng = rng.ok_or_else(|| Error::config("gumbel selection needs an rng"))?;
            let noisy = logits.add(&gumbel_noise(logits.shape(), rng).scale(tau));
            let soft = row_softmax_tensor(&masked_noise_fix(logits, noisy), tau)?;
            Ok(row_hardmax_tensor(&soft))
        }
    }
}

/// Selection on the tape; gradients flow to the logits (and through the
/// soft distribution for the straight-through variant).
pub fn select_var<'t>(
    logits: Var<'t, S>,
    selection: SelectionFn,
    tau: f64,
    rng: Option<&mut ChaCha8Rng>,
    mode: Mode,
) -> Result<Var<'t, S>> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    match (selection, mode) {
        (SelectionFn::Softmax, _) => logits.row_softmax(tau),
        (SelectionFn::Gumbel | SelectionFn::GumbelSt, Mode::Eval) => {
            check_rows_selectable(&logits.value())?;
            Ok(logits.row_softmax(tau)?.hardmax_st())
        }
        (SelectionFn::Gumbel, Mode::Train) => {
            let rng = rng.ok_or_else(|| Error::config("gumbel selection needs an rng"))?;
            let g = bounded_noise(&logits.value(), rng).scale(tau);
            logits.add_const(&g).row_softmax(tau)
        }
        (SelectionFn::GumbelSt, Mode::Train) => {
            let rng = rng.ok_or_else(|| Error::config("gumbel selection needs an rng"))?;
            let g = bounded_noise(&logits.value(), rng).scale(tau);
            Ok(logits.add_const(&g).row_softmax(tau)?.hardmax_st())
        }
    }
}

/// Keep disabled (−∞) entries at −∞ after noise addition; −∞ + finite
/// noise already stays −∞, this guards against NaN from ∞ arithmetic.
fn masked_noise_fix(orig: &Tensor64, noisy: Tensor64) -> Tensor64 {
    noisy.zip(orig, |n, o| if o.is_infinite() && o < 0.0 { o } else { n })
}

fn bounded_noise(logits: &Tensor64, rng: &mut ChaCha8Rng) -> Tensor64 {
    let g = gumbel_noise(logits.shape(), rng);
    g.zip(logits, |n, o| {
        if o.is_infinite() && o < 0.0 {
            0.0
        } else {
            n
        }
    })
}

fn check_rows_selectable(logits: &Tensor64) -> Result<()> {
    let (rows, cols) = logits.dims2()?;
    for i in 0..rows {
        if (0..cols).all(|j| logits.at(i, j) == f64::NEG_INFINITY) {
            return Err(Error::numeric(format!(
                "row {i}: every expert is disabled"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_end: f64,
    pub total_steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            tau0: 5.0,
            tau_end: 0.1,
            total_steps: 2000,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 >= self.tau_end && self.tau_end > 0.0) {
            return Err(Error::config(format!(
                "need tau0 >= tau_end > 0, got {} and {}",
                self.tau0, self.tau_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(())
    }

    /// Geometric interpolation from `tau0` to `tau_end`, clamped past the
    /// end of the schedule.
    pub fn at(&self, step: u64) -> f64 {
        let s = step.min(self.total_steps) as f64;
        let frac = s / self.total_steps as f64;
        self.tau0 * (self.tau_end / self.tau0).powf(frac)
    }
}

/// Ablate expert (i, j) by forcing its pre-softmax logit to −∞.
pub fn disable_expert(logits: &mut Tensor64, layer: usize, expert: usize) -> Result<()> {
    let (rows, cols) = logits.dims2()?;
    if layer >= rows || expert >= cols {
        return Err(Error::shape(format!(
            "expert ({layer}, {expert}) outside {rows}x{cols} grid"
        )));
    }
    let others_alive = (0..cols)
        .any(|j| j != expert && logits.at(layer, j) != f64::NEG_INFINITY);
    if !others_alive {
        return Err(Error::numeric(format!(
            "disabling expert {expert} would leave layer {layer} with no experts"
        )));
    }
    logits.set(layer, expert, f64::NEG_INFINITY);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RouteEntry {
    pub task_id: usize,
    pub layer: usize,
    pub expert: usize,
    pub weight: f64,
    pub logit: f64,
}

/// Write routes as CSV preceded by one `#`-prefixed JSON header line.
pub fn export_routes(
    path: impl AsRef<Path>,
    entries: &[RouteEntry],
    step: u64,
    temperature: f64,
    selection: SelectionFn,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let header = serde_json::json!({
        "step": step,
        "temperature": temperature,
        "selection_fn": selection.to_string(),
    });
    writeln!(file, "# {header}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["task_id", "layer", "expert", "weight", "logit"])?;
    for e in entries {
        w.write_record([
            e.task_id.to_string(),
            e.layer.to_string(),
            e.expert.to_string(),
            format!("{:.17e}", e.weight),
            format!("{:.17e}", e.logit),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a file written by [`export_routes`]; returns header and entries.
pub fn import_routes(
    path: impl AsRef<Path>,
) -> Result<(serde_json::Value, Vec<RouteEntry>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::data("empty route file"))?;
    let header: serde_json::Value = serde_json::from_str(
        first
            .strip_prefix("# ")
            .ok_or_else(|| Error::data("route file missing JSON header line"))?,
    )?;
    let rest: String = lines.collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(rest.as_bytes());
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        entries.push(RouteEntry {
            task_id: rec[0].parse().map_err(|_| Error::data("bad task_id"))?,
            layer: rec[1].parse().map_err(|_| Error::data("bad layer"))?,
            expert: rec[2].parse().map_err(|_| Error::data("bad expert"))?,
            weight: rec[3].parse().map_err(|_| Error::data("bad weight"))?,
            logit: rec[4].parse().map_err(|_| Error::data("bad logit"))?,
        });
    }
    Ok((header, entries))
}

/// Flatten a decision matrix and its logits into route entries.
pub fn routes_from_matrix(
    task_id: usize,
    weights: &Tensor64,
    logits: &Tensor64,
) -> Vec<RouteEntry> {
    let (n, m) = weights.dims2().expect("decision matrix must be n x m");
    let mut out = Vec::with_capacity(n * m);
    for layer in 0..n {
        for expert in 0..m {
            out.push(RouteEntry {
                task_id,
                layer,
                expert,
                weight: weights.at(layer, expert),
                logit: logits.at(layer, expert),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::{seeded_rng, stream_rng, Stream};
    use crate::tape::{finite_diff_check, Tape};

    fn config(variant: RouterVariant) -> RouterConfig {
        RouterConfig {
            variant,
            d: 8,
            n_layers: 4,
            m_experts: 3,
            n_heads: 2,
        }
    }

    const ALL_VARIANTS: [RouterVariant; 3] = [
        RouterVariant::Mlp,
        RouterVariant::BiLstm,
        RouterVariant::TransformerEnc,
    ];

    #[test]
    fn identical_embeddings_give_identical_logits() {
        for variant in ALL_VARIANTS {
            let router = RouterNetwork::new(config(variant), &mut seeded_rng(1)).unwrap();
            let t = Tensor::randn(&[1, 8], 1.0, &mut seeded_rng(2));
            let a = router.forward_tensor(&t).unwrap();
            let b = router.forward_tensor(&t).unwrap();
            assert_eq!(a.shape(), &[4, 3]);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn mlp_with_zero_final_layer_outputs_constant_bias() {
        let mut router = RouterNetwork::new(config(RouterVariant::Mlp), &mut seeded_rng(3)).unwrap();
        let w2 = router.store.id_by_name("w2").unwrap();
        let b2 = router.store.id_by_name("b2").unwrap();
        router.store.set(w2, Tensor::zeros(&[16, 12]));
        let bias: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        router.store.set(b2, Tensor::new(vec![12], bias.clone()).unwrap());
        for seed in [4, 5] {
            let t = Tensor::randn(&[1, 8], 1.0, &mut seeded_rng(seed));
            let l = router.forward_tensor(&t).unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    assert_eq!(l.at(i, j), bias[i * 3 + j]);
                }
            }
        }
    }

    #[test]
    fn logit_gradient_wrt_embedding_matches_finite_difference() {
        for variant in ALL_VARIANTS {
            let router = RouterNetwork::new(config(variant), &mut seeded_rng(7)).unwrap();
            let probe = Tensor::randn(&[4, 3], 1.0, &mut seeded_rng(8));
            let t0 = Tensor::randn(&[1, 8], 0.5, &mut seeded_rng(9));
            let err = finite_diff_check(
                |tape, t| {
                    let binder = ParamBinder::new(tape);
                    let l = router.forward(&binder, t).unwrap();
                    l.mul(tape.constant(probe.clone())).sum()
                },
                &t0,
                1e-5,
            );
            assert!(err < 1e-4, "{variant:?}: max rel grad error {err}");
        }
    }

    #[test]
    fn router_rejects_dimension_mismatch() {
        let router = RouterNetwork::new(config(RouterVariant::Mlp), &mut seeded_rng(1)).unwrap();
        let t = Tensor::randn(&[1, 5], 1.0, &mut seeded_rng(2));
        assert!(router.forward_tensor(&t).is_err());
    }

    #[test]
    fn gumbel_st_train_rows_are_exact_one_hots() {
        let logits = Tensor::randn(&[4, 3], 1.0, &mut seeded_rng(10));
        let mut rng = stream_rng(99, Stream::Gumbel);
        for _ in 0..50 {
            let d = select_tensor(&logits, SelectionFn::GumbelSt, 0.5, Some(&mut rng), Mode::Train)
                .unwrap();
            for i in 0..4 {
                let row: Vec<f64> = (0..3).map(|j| d.at(i, j)).collect();
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 2);
            }
        }
    }

    #[test]
    fn gumbel_st_selection_frequencies_match_softmax() {
        // Gumbel-max property: argmax(L + G) ~ Categorical(softmax(L)).
        // With tau=1 the ST selection frequencies must track softmax(L).
        let logits = Tensor::new(vec![2, 3], vec![1.0, 0.5, 0.0, -1.0, 0.3, 0.3]).unwrap();
        let probs = row_softmax_tensor(&logits, 1.0).unwrap();
        let mut rng = stream_rng(123, Stream::Gumbel);
        let trials = 10_000;
        let mut counts = [[0u32; 3]; 2];
        for _ in 0..trials {
            let d = select_tensor(&logits, SelectionFn::GumbelSt, 1.0, Some(&mut rng), Mode::Train)
                .unwrap();
            for i in 0..2 {
                for j in 0..3 {
                    if d.at(i, j) == 1.0 {
                        counts[i][j] += 1;
                    }
                }
            }
        }
        for i in 0..2 {
            for j in 0..3 {
                let freq = counts[i][j] as f64 / trials as f64;
                assert!(
                    (freq - probs.at(i, j)).abs() < 0.02,
                    "row {i} expert {j}: freq {freq} vs p {}",
                    probs.at(i, j)
                );
            }
        }
    }

    #[test]
    fn softmax_huge_temperature_is_uniform() {
        let logits = Tensor::randn(&[4, 3], 2.0, &mut seeded_rng(11));
        let d = select_tensor(&logits, SelectionFn::Softmax, 1e6, None, Mode::Train).unwrap();
        for v in d.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn selection_rows_are_distributions_under_masking() {
        let mut logits = Tensor::randn(&[4, 3], 1.0, &mut seeded_rng(12));
        disable_expert(&mut logits, 1, 2).unwrap();
        disable_expert(&mut logits, 2, 0).unwrap();
        disable_expert(&mut logits, 2, 1).unwrap();
        let mut rng = stream_rng(13, Stream::Gumbel);
        for selection in [SelectionFn::Softmax, SelectionFn::Gumbel, SelectionFn::GumbelSt] {
            for mode in [Mode::Train, Mode::Eval] {
                for tau in [0.1, 1.0, 100.0] {
                    let d = select_tensor(&logits, selection, tau, Some(&mut rng), mode).unwrap();
                    for i in 0..4 {
                        let sum: f64 = (0..3).map(|j| d.at(i, j)).sum();
                        assert!((sum - 1.0).abs() < 1e-12);
                        for j in 0..3 {
                            assert!(d.at(i, j) >= 0.0 && d.at(i, j).is_finite());
                        }
                    }
                    assert_eq!(d.at(1, 2), 0.0);
                    assert_eq!(d.at(2, 0), 0.0);
                    assert_eq!(d.at(2, 1), 0.0);
                }
            }
        }
    }

    #[test]
    fn gumbel_st_gradient_flows_through_soft_distribution() {
        // The straight-through backward must equal the gradient of the soft
        // path with the same noise, checked against finite differences.
        let l0 = Tensor::new(vec![2, 3], vec![0.4, -0.2, 0.1, 1.0, 0.9, -0.5]).unwrap();
        let noise = gumbel_noise(&[2, 3], &mut stream_rng(17, Stream::Gumbel));
        let probe = Tensor::randn(&[2, 3], 1.0, &mut seeded_rng(18));
        let tau = 0.7;

        let tape: Tape<f64> = Tape::new();
        let l = tape.leaf(l0.clone());
        let st = l.add_const(&noise).row_softmax(tau).unwrap().hardmax_st();
        let loss = st.mul(tape.constant(probe.clone())).sum();
        let grads = tape.backward(loss).unwrap();
        let g_st = grads.wrt(l).unwrap().clone();

        let soft_loss = |x: &Tensor64| -> f64 {
            let soft = row_softmax_tensor(&x.add(&noise), tau).unwrap();
            soft.mul(&probe).sum()
        };
        let h = 1e-6;
        for idx in 0..6 {
            let mut p = l0.clone();
            p.data_mut()[idx] += h;
            let mut m = l0.clone();
            m.data_mut()[idx] -= h;
            let fd = (soft_loss(&p) - soft_loss(&m)) / (2.0 * h);
            let ad = g_st.data()[idx];
            assert!(
                (ad - fd).abs() / (fd.abs() + 1e-8) < 1e-4,
                "entry {idx}: st grad {ad} vs soft fd {fd}"
            );
        }
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let sched = TemperatureSchedule::default();
        assert_eq!(sched.at(0), 5.0);
        assert!((sched.at(2000) - 0.1).abs() < 1e-12);
        assert!((sched.at(3000) - 0.1).abs() < 1e-12);
        assert!((sched.at(1000) - 0.5f64.sqrt()).abs() < 1e-9);
        for s in 0..2000 {
            assert!(sched.at(s + 1) <= sched.at(s));
        }
        assert!(TemperatureSchedule {
            tau0: 0.1,
            tau_end: 5.0,
            total_steps: 10
        }
        .validate()
        .is_err());
    }

    #[test]
    fn disabling_shifts_argmax_to_second_best() {
        let mut logits = Tensor::new(vec![1, 3], vec![2.0, 1.0, 0.0]).unwrap();
        disable_expert(&mut logits, 0, 0).unwrap();
        let d = select_tensor(&logits, SelectionFn::GumbelSt, 1.0, None, Mode::Eval).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn disabling_the_least_expert_leaves_argmax_unchanged() {
        let mut logits = Tensor::new(vec![1, 3], vec![5.0, 1.0, 0.5]).unwrap();
        let before = row_hardmax_tensor(&logits);
        disable_expert(&mut logits, 0, 2).unwrap();
        let after = select_tensor(&logits, SelectionFn::Gumbel, 1.0, None, Mode::Eval).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn disabling_every_expert_in_a_row_is_an_error() {
        let mut logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        disable_expert(&mut logits, 0, 0).unwrap();
        disable_expert(&mut logits, 0, 1).unwrap();
        assert!(disable_expert(&mut logits, 0, 2).is_err());
        assert!(disable_expert(&mut logits, 5, 0).is_err());
    }

    #[test]
    fn argmax_invariant_under_constant_row_shift() {
        let logits = Tensor::randn(&[4, 3], 1.0, &mut seeded_rng(20));
        let shifted = logits.map(|v| v + 123.456);
        let a = select_tensor(&logits, SelectionFn::GumbelSt, 1.0, None, Mode::Eval).unwrap();
        let b = select_tensor(&shifted, SelectionFn::GumbelSt, 1.0, None, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn frozen_table_rows_never_change() {
        use crate::optim::AdamState;
        let vectors: Vec<Tensor64> = (0..3)
            .map(|i| Tensor::randn(&[8], 1.0, &mut seeded_rng(30 + i)))
            .collect();
        let mut table = TaskEmbeddingTable::from_vectors(&vectors).unwrap();
        table.set_frozen(1, true);
        let frozen_before: Vec<u64> = table.row(1).data().iter().map(|v| v.to_bits()).collect();
        let mut adam = AdamState::new(&table.store);
        for _ in 0..5 {
            let tape: Tape<f64> = Tape::new();
            let binder = ParamBinder::new(&tape);
            let mut loss = binder.bind(&table.store, table.row_id(0)).sum();
            for k in 1..3 {
                loss = loss.add(binder.bind(&table.store, table.row_id(k)).sum());
            }
            let grads = tape.backward(loss).unwrap();
            let pairs = binder.collect_grads(&grads);
            adam.step(&mut table.store, &pairs, &[1e-2, 1e-2, 1e-2]).unwrap();
        }
        let frozen_after: Vec<u64> = table.row(1).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(frozen_before, frozen_after);
        assert_ne!(
            table.row(0).data(),
            vectors[0].data(),
            "unfrozen rows should move"
        );
    }

    #[test]
    fn route_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("routes.csv");
        let weights = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let logits = Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 1.7]).unwrap();
        let entries = routes_from_matrix(7, &weights, &logits);
        export_routes(&path, &entries, 120, 0.731, SelectionFn::GumbelSt).unwrap();
        let (header, parsed) = import_routes(&path).unwrap();
        assert_eq!(header["step"], 120);
        assert_eq!(header["selection_fn"], "gumbel_st");
        assert!((header["temperature"].as_f64().unwrap() - 0.731).abs() < 1e-12);
        assert_eq!(parsed, entries);
    }
}
