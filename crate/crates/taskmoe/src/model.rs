//! Encoder-decoder transformer with per-layer expert replication.
//!
//! The first `n/2` layers are encoder layers, the last `n/2` decoder
//! layers. Each layer is copied into `m` experts; a layer's output is the
//! decision-weighted sum of its experts' outputs. Token/position embeddings
//! and the output head are shared across experts.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBinder, ParamId, ParamStore, GROUP_BASE};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type S = crate::F;
type Tensor64 = Tensor<S>;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Total layer count; encoder gets the first half, decoder the rest.
    pub n_layers: usize,
    /// Experts per layer.
    pub m_experts: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Variance of the Gaussian perturbation applied when replicating a
    /// base layer into experts.
    pub noise_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            m_experts: 3,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 64,
            max_seq_len: 32,
            noise_variance: 1e-8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return Err(Error::config(format!(
                "n_layers must be even and positive, got {}",
                self.n_layers
            )));
        }
        if self.m_experts == 0 {
            return Err(Error::config("m_experts must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.noise_variance < 0.0 {
            return Err(Error::config("noise_variance must be >= 0"));
        }
        if self.vocab_size <= EOS_ID {
            return Err(Error::config("vocab_size too small for special tokens"));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        self.n_layers / 2
    }

    /// Decision matrix that averages every expert with weight 1/m.
    pub fn uniform_routing(&self) -> Tensor64 {
        Tensor::full(
            &[self.n_layers, self.m_experts],
            1.0 / self.m_experts as f64,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// One expert: a full transformer layer parameter set.
#[derive(Clone, Debug)]
pub struct LayerExpert {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub self_attn: AttnParams,
    /// Decoder layers carry (cross-norm gain, cross-norm bias, cross-attn).
    pub cross: Option<(ParamId, ParamId, AttnParams)>,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerExpert {
    /// Parameter ids in a fixed order, for aligned copying between grids.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.ln1_g,
            self.ln1_b,
            self.self_attn.wq,
            self.self_attn.wk,
            self.self_attn.wv,
            self.self_attn.wo,
        ];
        if let Some((g, b, attn)) = &self.cross {
            ids.extend([*g, *b, attn.wq, attn.wk, attn.wv, attn.wo]);
        }
        ids.extend([self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2]);
        ids
    }
}

/// Bottleneck adapters, one per layer, inserted after the feed-forward
/// block with a residual connection. Up-projections start at zero so a
/// fresh adapter set is an exact identity map.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub bottleneck: usize,
    /// (down, down_bias, up) per layer.
    pub layers: Vec<(ParamId, ParamId, ParamId)>,
}

impl AdapterSet {
    pub fn attach(
        store: &mut ParamStore<S>,
        config: &ModelConfig,
        bottleneck: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdapterSet {
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let down = store.add(
                format!("adapter{i}.down"),
                Tensor::randn(&[config.d_model, bottleneck], 0.02, rng),
                GROUP_BASE,
            );
            let down_b = store.add(
                format!("adapter{i}.down_b"),
                Tensor::zeros(&[bottleneck]),
                GROUP_BASE,
            );
            let up = store.add(
                format!("adapter{i}.up"),
                Tensor::zeros(&[bottleneck, config.d_model]),
                GROUP_BASE,
            );
            layers.push((down, down_b, up));
        }
        AdapterSet {
            bottleneck,
            layers,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|&(a, b, c)| [a, b, c])
            .collect()
    }
}

/// Per-task routing weights for one forward pass: either a fixed matrix or
/// a node on the tape (so the router receives gradients).
pub enum Routing<'a, 't> {
    Const(&'a Tensor64),
    Node(Var<'t, S>),
}

impl<'a, 't> Routing<'a, 't> {
    fn weights(&self) -> Tensor64 {
        match self {
            Routing::Const(t) => (*t).clone(),
            Routing::Node(v) => v.value(),
        }
    }
}

/// The MoE transformer.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub enc_ln_g: ParamId,
    pub enc_ln_b: ParamId,
    pub dec_ln_g: ParamId,
    pub dec_ln_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// `grid[i][j]` = expert j of layer i.
    pub grid: Vec<Vec<LayerExpert>>,
    /// Optional adapters (fisher pipeline / parameter-efficient tuning).
    pub adapters: Option<AdapterSet>,
    exec_counts: RefCell<Vec<Vec<u64>>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            store: self.store.clone(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            enc_ln_g: self.enc_ln_g,
            enc_ln_b: self.enc_ln_b,
            dec_ln_g: self.dec_ln_g,
            dec_ln_b: self.dec_ln_b,
            head_w: self.head_w,
            head_b: self.head_b,
            grid: self.grid.clone(),
            adapters: self.adapters.clone(),
            exec_counts: RefCell::new(self.exec_counts.borrow().clone()),
        }
    }
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

fn dense(store: &mut ParamStore<S>, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, Tensor::randn(&[rows, cols], INIT_STD, rng), GROUP_BASE)
}

impl Model {
    /// Build a model with freshly initialized base layers, each replicated
    /// into `m` experts perturbed by `N(0, noise_variance)` noise.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let tok_emb = store.add(
            "tok_emb",
            Tensor::randn(&[config.vocab_size, d], INIT_STD, rng),
            GROUP_BASE,
        );
        let pos_emb = store.add(
            "pos_emb",
            Tensor::randn(&[config.max_seq_len, d], INIT_STD, rng),
            GROUP_BASE,
        );
        let enc_ln_g = store.add("enc_ln.g", Tensor::ones(&[d]), GROUP_BASE);
        let enc_ln_b = store.add("enc_ln.b", Tensor::zeros(&[d]), GROUP_BASE);
        let dec_ln_g = store.add("dec_ln.g", Tensor::ones(&[d]), GROUP_BASE);
        let dec_ln_b = store.add("dec_ln.b", Tensor::zeros(&[d]), GROUP_BASE);
        let head_w = dense(&mut store, "head.w".into(), d, config.vocab_size, rng);
        let head_b = store.add("head.b", Tensor::zeros(&[config.vocab_size]), GROUP_BASE);

        let noise_std = config.noise_variance.sqrt();
        let mut grid = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let is_decoder = i >= config.encoder_layers();
            // Base layer tensors, shared shape across the expert row.
            let base = base_layer_tensors(&config, is_decoder, rng);
            let mut row = Vec::with_capacity(config.m_experts);
            for j in 0..config.m_experts {
                row.push(add_expert(&mut store, &config, i, j, &base, noise_std, rng));
            }
            grid.push(row);
        }
        let exec_counts = RefCell::new(vec![vec![0u64; config.m_experts]; config.n_layers]);
        Ok(Model {
            config,
            store,
            tok_emb,
            pos_emb,
            enc_ln_g,
            enc_ln_b,
            dec_ln_g,
            dec_ln_b,
            head_w,
            head_b,
            grid,
            adapters: None,
            exec_counts,
        })
    }

    /// Re-initialize every expert from the matching layer of a base model
    /// (typically a briefly pretrained vanilla model with `m = 1`),
    /// adding fresh `N(0, noise_variance)` noise per expert.
    pub fn reinit_experts_from(&mut self, base: &Model, rng: &mut ChaCha8Rng) -> Result<()> {
        if base.config.n_layers != self.config.n_layers
            || base.config.d_model != self.config.d_model
            || base.config.d_ff != self.config.d_ff
            || base.config.n_heads != self.config.n_heads
        {
            return Err(Error::config(
                "base model layer geometry does not match expert grid",
            ));
        }
        let noise_std = self.config.noise_variance.sqrt();
        for i in 0..self.config.n_layers {
            let base_ids = base.grid[i][0].param_ids();
            for j in 0..self.config.m_experts {
                let my_ids = self.grid[i][j].param_ids();
                debug_assert_eq!(base_ids.len(), my_ids.len());
                for (&mine, &theirs) in my_ids.iter().zip(&base_ids) {
                    let mut t = base.store.get(theirs).clone();
                    if noise_std > 0.0 {
                        for v in t.data_mut() {
                            *v = *v + S::standard_normal(rng) * noise_std;
                        }
                    }
                    self.store.set(mine, t);
                }
            }
        }
        // Shared parts come over verbatim.
        for (mine, theirs) in [
            (self.tok_emb, base.tok_emb),
            (self.pos_emb, base.pos_emb),
            (self.enc_ln_g, base.enc_ln_g),
            (self.enc_ln_b, base.enc_ln_b),
            (self.dec_ln_g, base.dec_ln_g),
            (self.dec_ln_b, base.dec_ln_b),
            (self.head_w, base.head_w),
            (self.head_b, base.head_b),
        ] {
            self.store.set(mine, base.store.get(theirs).clone());
        }
        Ok(())
    }

    pub fn attach_adapters(&mut self, bottleneck: usize, rng: &mut ChaCha8Rng) {
        let set = AdapterSet::attach(&mut self.store, &self.config, bottleneck, rng);
        self.adapters = Some(set);
    }

    pub fn exec_counts(&self) -> Vec<Vec<u64>> {
        self.exec_counts.borrow().clone()
    }

    pub fn reset_exec_counts(&self) {
        for row in self.exec_counts.borrow_mut().iter_mut() {
            row.iter_mut().for_each(|c| *c = 0);
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::data(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::data(format!(
                    "token id {} out of vocabulary {}",
                    id, self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn embed_sequence<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        ids: &[usize],
    ) -> Result<Var<'t, S>> {
        let tok = binder.bind(&self.store, self.tok_emb).embed(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = binder.bind(&self.store, self.pos_emb).embed(&positions)?;
        Ok(tok.add(pos))
    }

    fn attention<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        q_src: Var<'t, S>,
        kv_src: Var<'t, S>,
        params: &AttnParams,
        causal: bool,
    ) -> Result<Var<'t, S>> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dk = d / heads;
        let q = q_src.matmul(binder.bind(&self.store, params.wq))?;
        let k = kv_src.matmul(binder.bind(&self.store, params.wk))?;
        let v = kv_src.matmul(binder.bind(&self.store, params.wv))?;
        let sq = q.shape()[0];
        let sk = k.shape()[0];
        let scale = 1.0 / (dk as f64).sqrt();
        let mask = if causal {
            let mut m = Tensor64::zeros(&[sq, sk]);
            for i in 0..sq {
                for j in 0..sk {
                    if j > i {
                        m.set(i, j, f64::NEG_INFINITY);
                    }
                }
            }
            Some(m)
        } else {
            None
        };
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * dk, (h + 1) * dk);
            let kh = k.slice_cols(h * dk, (h + 1) * dk);
            let vh = v.slice_cols(h * dk, (h + 1) * dk);
            let mut scores = qh.matmul_nt(kh)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.add_const(m);
            }
            let attn = scores.row_softmax(1.0)?;
            head_outs.push(attn.matmul(vh)?);
        }
        let merged = Var::concat_cols(&head_outs);
        merged.matmul(binder.bind(&self.store, params.wo))
    }

    /// One expert layer applied to `h_in` (residual, pre-norm).
    fn expert_forward<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        layer: usize,
        expert: usize,
        h_in: Var<'t, S>,
        enc_out: Option<Var<'t, S>>,
        causal: bool,
        with_adapters: bool,
    ) -> Result<Var<'t, S>> {
        let e = &self.grid[layer][expert];
        self.exec_counts.borrow_mut()[layer][expert] += 1;
        let ln = |x: Var<'t, S>, g, b| {
            x.layer_norm(
                binder.bind(&self.store, g),
                binder.bind(&self.store, b),
                LN_EPS,
            )
        };
        let normed = ln(h_in, e.ln1_g, e.ln1_b);
        let sa = self.attention(binder, normed, normed, &e.self_attn, causal)?;
        let mut h = h_in.add(sa);
        if let Some((cg, cb, cattn)) = &e.cross {
            let enc = enc_out.ok_or_else(|| {
                Error::shape("decoder expert requires encoder output")
            })?;
            let normed = ln(h, *cg, *cb);
            let ca = self.attention(binder, normed, enc, cattn, false)?;
            h = h.add(ca);
        }
        let normed = ln(h, e.ln2_g, e.ln2_b);
        let ff = normed
            .matmul(binder.bind(&self.store, e.w1))?
            .add_row(binder.bind(&self.store, e.b1))
            .gelu()
            .matmul(binder.bind(&self.store, e.w2))?
            .add_row(binder.bind(&self.store, e.b2));
        h = h.add(ff);
        if with_adapters {
            if let Some(set) = &self.adapters {
                let (down, down_b, up) = set.layers[layer];
                let a = h
                    .matmul(binder.bind(&self.store, down))?
                    .add_row(binder.bind(&self.store, down_b))
                    .gelu()
                    .matmul(binder.bind(&self.store, up))?;
                h = h.add(a);
            }
        }
        Ok(h)
    }

    /// Decision-weighted sum over the experts of one layer. Experts whose
    /// weight is exactly zero are not executed.
    pub fn moe_layer_forward<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        layer: usize,
        h_in: Var<'t, S>,
        routing: &Routing<'_, 't>,
        enc_out: Option<Var<'t, S>>,
        causal: bool,
        with_adapters: bool,
    ) -> Result<Var<'t, S>> {
        let weights = routing.weights();
        let m = self.config.m_experts;
        debug_assert_eq!(weights.shape(), &[self.config.n_layers, m]);
        let mut acc: Option<Var<'t, S>> = None;
        for j in 0..m {
            let w = weights.at(layer, j);
            if w == 0.0 {
                continue;
            }
            let out = self.expert_forward(
                binder,
                layer,
                j,
                h_in,
                enc_out,
                causal,
                with_adapters,
            )?;
            let term = match routing {
                Routing::Const(_) => {
                    if w == 1.0 {
                        out
                    } else {
                        out.scale(w)
                    }
                }
                Routing::Node(d) => out.scale_by(d.index(layer * m + j)),
            };
            acc = Some(match acc {
                Some(a) => a.add(term),
                None => term,
            });
        }
        acc.ok_or_else(|| Error::numeric(format!("layer {layer}: all expert weights are zero")))
    }

    pub fn encode<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        input_ids: &[usize],
        routing: &Routing<'_, 't>,
        with_adapters: bool,
    ) -> Result<Var<'t, S>> {
        self.check_ids(input_ids)?;
        if input_ids.is_empty() {
            return Err(Error::data("empty input sequence"));
        }
        let mut h = self.embed_sequence(binder, input_ids)?;
        for i in 0..self.config.encoder_layers() {
            h = self.moe_layer_forward(binder, i, h, routing, None, false, with_adapters)?;
        }
        Ok(h.layer_norm(
            binder.bind(&self.store, self.enc_ln_g),
            binder.bind(&self.store, self.enc_ln_b),
            LN_EPS,
        ))
    }

    fn decode_logits<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        enc_out: Var<'t, S>,
        dec_input: &[usize],
        routing: &Routing<'_, 't>,
        with_adapters: bool,
    ) -> Result<Var<'t, S>> {
        self.check_ids(dec_input)?;
        let mut h = self.embed_sequence(binder, dec_input)?;
        for i in self.config.encoder_layers()..self.config.n_layers {
            h = self.moe_layer_forward(
                binder,
                i,
                h,
                routing,
                Some(enc_out),
                true,
                with_adapters,
            )?;
        }
        let h = h.layer_norm(
            binder.bind(&self.store, self.dec_ln_g),
            binder.bind(&self.store, self.dec_ln_b),
            LN_EPS,
        );
        Ok(h
            .matmul(binder.bind(&self.store, self.head_w))?
            .add_row(binder.bind(&self.store, self.head_b)))
    }

    /// Teacher-forced forward pass: token logits plus mean cross-entropy
    /// over non-pad target positions.
    pub fn forward<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        input_ids: &[usize],
        target_ids: &[usize],
        routing: &Routing<'_, 't>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        self.forward_opt(binder, input_ids, target_ids, routing, false)
    }

    pub fn forward_opt<'t>(
        &self,
        binder: &ParamBinder<'t, S>,
        input_ids: &[usize],
        target_ids: &[usize],
        routing: &Routing<'_, 't>,
        with_adapters: bool,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let enc = self.encode(binder, input_ids, routing, with_adapters)?;
        let mut dec_input = Vec::with_capacity(target_ids.len());
        dec_input.push(BOS_ID);
        dec_input.extend_from_slice(&target_ids[..target_ids.len().saturating_sub(1)]);
        let logits = self.decode_logits(binder, enc, &dec_input, routing, with_adapters)?;
        let loss = logits.cross_entropy(target_ids, Some(PAD_ID))?;
        Ok((logits, loss))
    }

    /// Serialize config, every parameter, and caller metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> crate::checkpoint::Checkpoint {
        let header = serde_json::json!({
            "config": self.config,
            "adapter_bottleneck": self.adapters.as_ref().map(|a| a.bottleneck),
            "extra": extra,
        });
        let mut ck = crate::checkpoint::Checkpoint::new(header);
        ck.push_store("model", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<Model> {
        let config: ModelConfig = serde_json::from_value(
            ck.header
                .get("config")
                .cloned()
                .ok_or_else(|| Error::data("checkpoint header has no model config"))?,
        )?;
        // Rebuild the id layout with a throwaway init, then swap in the
        // stored tensors. Names must line up position for position.
        let mut model = Model::new(config, &mut crate::rngutil::seeded_rng(0))?;
        if let Some(b) = ck
            .header
            .get("adapter_bottleneck")
            .and_then(|v| v.as_u64())
        {
            model.attach_adapters(b as usize, &mut crate::rngutil::seeded_rng(0));
        }
        let loaded = ck.load_store("model")?;
        if loaded.len() != model.store.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for (a, b) in loaded.ids().zip(model.store.ids()) {
            if loaded.name(a) != model.store.name(b) {
                return Err(Error::data(format!(
                    "checkpoint tensor '{}' does not match expected '{}'",
                    loaded.name(a),
                    model.store.name(b)
                )));
            }
        }
        model.store = loaded;
        Ok(model)
    }

    /// Deterministic greedy decoding; argmax ties break toward the lowest
    /// token id. Stops at `eos` or after `max_len` tokens.
    pub fn greedy_decode(
        &self,
        input_ids: &[usize],
        routing_weights: &Tensor64,
        max_len: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..max_len {
            let tape: Tape<S> = Tape::new();
            let binder = ParamBinder::new(&tape);
            let routing = Routing::Const(routing_weights);
            let enc = self.encode(&binder, input_ids, &routing, false)?;
            let mut dec_input = Vec::with_capacity(out.len() + 1);
            dec_input.push(BOS_ID);
            dec_input.extend_from_slice(&out);
            if dec_input.len() > self.config.max_seq_len {
                break;
            }
            let logits = self.decode_logits(&binder, enc, &dec_input, &routing, false)?;
            let lv = logits.value();
            let last = lv.row(lv.rows() - 1);
            let mut best = 0usize;
            for (tok, &score) in last.iter().enumerate() {
                if score > last[best] {
                    best = tok;
                }
            }
            if best == eos {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }
}

fn base_layer_tensors(
    config: &ModelConfig,
    is_decoder: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor64> {
    let d = config.d_model;
    let mut tensors = vec![
        Tensor::ones(&[d]),
        Tensor::zeros(&[d]),
        Tensor::randn(&[d, d], INIT_STD, rng),
        Tensor::randn(&[d, d], INIT_STD, rng),
        Tensor::randn(&[d, d], INIT_STD, rng),
        Tensor::randn(&[d, d], INIT_STD, rng),
    ];
    if is_decoder {
        tensors.extend([
            Tensor::ones(&[d]),
            Tensor::zeros(&[d]),
            Tensor::randn(&[d, d], INIT_STD, rng),
            Tensor::randn(&[d, d], INIT_STD, rng),
            Tensor::randn(&[d, d], INIT_STD, rng),
            Tensor::randn(&[d, d], INIT_STD, rng),
        ]);
    }
    tensors.extend([
        Tensor::ones(&[d]),
        Tensor::zeros(&[d]),
        Tensor::randn(&[d, config.d_ff], INIT_STD, rng),
        Tensor::zeros(&[config.d_ff]),
        Tensor::randn(&[config.d_ff, d], INIT_STD, rng),
        Tensor::zeros(&[d]),
    ]);
    tensors
}

fn add_expert(
    store: &mut ParamStore<S>,
    config: &ModelConfig,
    layer: usize,
    expert: usize,
    base: &[Tensor64],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> LayerExpert {
    let is_decoder = layer >= config.encoder_layers();
    let mut names = vec!["ln1.g", "ln1.b", "sa.wq", "sa.wk", "sa.wv", "sa.wo"];
    if is_decoder {
        names.extend(["lnc.g", "lnc.b", "ca.wq", "ca.wk", "ca.wv", "ca.wo"]);
    }
    names.extend(["ln2.g", "ln2.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2"]);
    debug_assert_eq!(names.len(), base.len());
    let ids: Vec<ParamId> = names
        .iter()
        .zip(base)
        .map(|(name, tensor)| {
            let mut t = tensor.clone();
            if noise_std > 0.0 {
                for v in t.data_mut() {
                    *v = *v + S::standard_normal(rng) * noise_std;
                }
            }
            store.add(format!("layer{layer}.expert{expert}.{name}"), t, GROUP_BASE)
        })
        .collect();
    let mut it = ids.into_iter();
    let ln1_g = it.next().unwrap();
    let ln1_b = it.next().unwrap();
    let self_attn = AttnParams {
        wq: it.next().unwrap(),
        wk: it.next().unwrap(),
        wv: it.next().unwrap(),
        wo: it.next().unwrap(),
    };
    let cross = if is_decoder {
        let g = it.next().unwrap();
        let b = it.next().unwrap();
        let attn = AttnParams {
            wq: it.next().unwrap(),
            wk: it.next().unwrap(),
            wv: it.next().unwrap(),
            wo: it.next().unwrap(),
        };
        Some((g, b, attn))
    } else {
        None
    };
    LayerExpert {
        ln1_g,
        ln1_b,
        self_attn,
        cross,
        ln2_g: it.next().unwrap(),
        ln2_b: it.next().unwrap(),
        w1: it.next().unwrap(),
        b1: it.next().unwrap(),
        w2: it.next().unwrap(),
        b2: it.next().unwrap(),
    }
}

/// Average number of experts with nonzero weight per layer.
pub fn compute_multiplier(weights: &Tensor64) -> f64 {
    let (n, m) = weights.dims2().expect("decision matrix must be n x m");
    let mut total = 0usize;
    for i in 0..n {
        for j in 0..m {
            if weights.at(i, j) != 0.0 {
                total += 1;
            }
        }
    }
    total as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::seeded_rng;
    use crate::tape::finite_diff_check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            m_experts: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 8,
            noise_variance: 1e-8,
        }
    }

    fn uniform_weights(n: usize, m: usize) -> Tensor64 {
        Tensor::full(&[n, m], 1.0 / m as f64)
    }

    fn one_hot_weights(n: usize, m: usize, j: usize) -> Tensor64 {
        let mut t = Tensor::zeros(&[n, m]);
        for i in 0..n {
            t.set(i, j, 1.0);
        }
        t
    }

    fn loss_value(model: &Model, input: &[usize], target: &[usize], w: &Tensor64) -> f64 {
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let (_, loss) = model
            .forward(&binder, input, target, &Routing::Const(w))
            .unwrap();
        loss.value().item()
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut c = tiny_config();
        c.n_layers = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.m_experts = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.d_model = 9;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn zero_noise_makes_experts_identical() {
        let mut c = tiny_config();
        c.noise_variance = 0.0;
        let model = Model::new(c, &mut seeded_rng(7)).unwrap();
        for row in &model.grid {
            let ref_ids = row[0].param_ids();
            for expert in &row[1..] {
                for (&a, &b) in ref_ids.iter().zip(expert.param_ids().iter()) {
                    assert_eq!(model.store.get(a).data(), model.store.get(b).data());
                }
            }
        }
    }

    #[test]
    fn expert_noise_variance_matches_target() {
        // The difference between two experts of the same layer is the
        // difference of two independent N(0, v) draws, so its variance is
        // 2v. Estimated over every matrix entry in the grid.
        let c = ModelConfig {
            noise_variance: 1e-8,
            ..ModelConfig::default()
        };
        let model = Model::new(c.clone(), &mut seeded_rng(11)).unwrap();
        let mut diffs: Vec<f64> = Vec::new();
        for row in &model.grid {
            let a_ids = row[0].param_ids();
            for expert in &row[1..] {
                for (&a, &b) in a_ids.iter().zip(expert.param_ids().iter()) {
                    let ta = model.store.get(a);
                    let tb = model.store.get(b);
                    for i in 0..ta.numel() {
                        diffs.push(ta.data()[i] - tb.data()[i]);
                    }
                }
            }
        }
        assert!(diffs.len() > 100_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
        let per_expert = var / 2.0;
        assert!(
            per_expert > 0.9e-8 && per_expert < 1.1e-8,
            "estimated noise variance {per_expert}"
        );
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let mut c = tiny_config();
        c.noise_variance = 0.0;
        let model = Model::new(c.clone(), &mut seeded_rng(3)).unwrap();
        let input = [3, 4, 5];
        let target = [6, 7, EOS_ID];
        let uniform = loss_value(&model, &input, &target, &uniform_weights(2, 2));
        let onehot0 = loss_value(&model, &input, &target, &one_hot_weights(2, 2, 0));
        let onehot1 = loss_value(&model, &input, &target, &one_hot_weights(2, 2, 1));
        assert!((uniform - onehot0).abs() < 1e-9);
        assert!((onehot0 - onehot1).abs() < 1e-9);
    }

    #[test]
    fn one_hot_routing_executes_only_selected_expert() {
        let model = Model::new(tiny_config(), &mut seeded_rng(5)).unwrap();
        model.reset_exec_counts();
        let w = one_hot_weights(2, 2, 1);
        let _ = loss_value(&model, &[3, 4], &[5, EOS_ID], &w);
        let counts = model.exec_counts();
        for row in &counts {
            assert_eq!(row[0], 0);
            assert_eq!(row[1], 1);
        }
    }

    #[test]
    fn reinit_from_base_with_one_hot_matches_base_exactly() {
        let mut base_cfg = tiny_config();
        base_cfg.m_experts = 1;
        let base = Model::new(base_cfg, &mut seeded_rng(21)).unwrap();
        let mut cfg = tiny_config();
        cfg.noise_variance = 0.0;
        let mut moe = Model::new(cfg, &mut seeded_rng(22)).unwrap();
        moe.reinit_experts_from(&base, &mut seeded_rng(23)).unwrap();
        let input = [4, 5, 6, 7];
        let target = [8, 9, EOS_ID];
        let base_loss = loss_value(&base, &input, &target, &one_hot_weights(2, 1, 0));
        for j in 0..2 {
            let moe_loss = loss_value(&moe, &input, &target, &one_hot_weights(2, 2, j));
            assert_eq!(base_loss.to_bits(), moe_loss.to_bits());
        }
    }

    #[test]
    fn all_zero_routing_row_is_an_error() {
        let model = Model::new(tiny_config(), &mut seeded_rng(9)).unwrap();
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let w = Tensor::zeros(&[2, 2]);
        let err = model.forward(&binder, &[3], &[4, EOS_ID], &Routing::Const(&w));
        assert!(err.is_err());
    }

    #[test]
    fn decision_gradient_matches_finite_difference() {
        let model = Model::new(tiny_config(), &mut seeded_rng(13)).unwrap();
        let input = [3, 4, 5];
        let target = [6, 7, EOS_ID];
        let d0 = Tensor::new(vec![2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let err = finite_diff_check(
            |tape, d| {
                let binder = ParamBinder::new(tape);
                let (_, loss) = model
                    .forward(&binder, &input, &target, &Routing::Node(d))
                    .unwrap();
                loss
            },
            &d0,
            1e-5,
        );
        assert!(err < 1e-4, "max rel grad error {err}");
    }

    #[test]
    fn parameter_gradients_match_finite_difference() {
        // Spot-check entries of an attention matrix, an expert FF matrix,
        // and the token embedding against central differences on the loss.
        let model = Model::new(tiny_config(), &mut seeded_rng(17)).unwrap();
        let input = [3, 4];
        let target = [5, EOS_ID];
        let w = uniform_weights(2, 2);

        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let (_, loss) = model
            .forward(&binder, &input, &target, &Routing::Const(&w))
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let by_id: std::collections::HashMap<usize, Tensor64> = binder
            .collect_grads(&grads)
            .into_iter()
            .map(|(id, g)| (id.0, g))
            .collect();

        let h = 1e-5;
        for (pid, flats) in [
            (model.grid[0][0].self_attn.wq, [0usize, 3, 17]),
            (model.grid[1][1].w1, [0, 3, 17]),
            // embedding rows for tokens 3 (input), 1 (bos), 5 (target)
            (model.tok_emb, [24, 12, 41]),
        ] {
            let g = &by_id[&pid.0];
            for flat in flats {
                let mut probe = model.clone();
                let mut plus = model.store.get(pid).clone();
                plus.data_mut()[flat] += h;
                probe.store.set(pid, plus);
                let lp = loss_value(&probe, &input, &target, &w);
                let mut minus = model.store.get(pid).clone();
                minus.data_mut()[flat] -= h;
                probe.store.set(pid, minus);
                let lm = loss_value(&probe, &input, &target, &w);
                let fd = (lp - lm) / (2.0 * h);
                let ad = g.data()[flat];
                let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
                assert!(rel < 1e-4, "param {pid:?} entry {flat}: ad {ad} fd {fd}");
            }
        }
    }

    #[test]
    fn greedy_decode_is_deterministic_and_bounded() {
        let model = Model::new(tiny_config(), &mut seeded_rng(19)).unwrap();
        let w = uniform_weights(2, 2);
        let a = model.greedy_decode(&[3, 4, 5], &w, 6, EOS_ID).unwrap();
        let b = model.greedy_decode(&[3, 4, 5], &w, 6, EOS_ID).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert!(a.iter().all(|&t| t < 12 && t != EOS_ID));
    }

    #[test]
    fn adapters_are_identity_at_init() {
        let mut model = Model::new(tiny_config(), &mut seeded_rng(23)).unwrap();
        let input = [3, 4, 5];
        let target = [6, EOS_ID];
        let w = uniform_weights(2, 2);
        let before = loss_value(&model, &input, &target, &w);
        model.attach_adapters(4, &mut seeded_rng(24));
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let (_, loss) = model
            .forward_opt(&binder, &input, &target, &Routing::Const(&w), true)
            .unwrap();
        assert_eq!(before.to_bits(), loss.value().item().to_bits());
    }

    #[test]
    fn compute_multiplier_counts_nonzero_experts_per_layer() {
        let w = Tensor::new(
            vec![4, 3],
            vec![
                1.0, 0.0, 0.0, //
                0.5, 0.5, 0.0, //
                0.2, 0.3, 0.5, //
                0.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        assert!((compute_multiplier(&w) - 2.0).abs() < 1e-12);
        assert!((compute_multiplier(&one_hot_weights(4, 3, 0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model_checkpoint_round_trip_reproduces_loss_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let mut model = Model::new(tiny_config(), &mut seeded_rng(31)).unwrap();
        model.attach_adapters(4, &mut seeded_rng(32));
        let ck = model.to_checkpoint(serde_json::json!({"step": 3}));
        ck.save(&path).unwrap();
        let loaded = crate::checkpoint::Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.header["extra"]["step"], 3);
        let restored = Model::from_checkpoint(&loaded).unwrap();
        assert_eq!(restored.config, model.config);
        let input = [3, 4, 5];
        let target = [6, 7, EOS_ID];
        let w = uniform_weights(2, 2);
        let a = loss_value(&model, &input, &target, &w);
        let b = loss_value(&restored, &input, &target, &w);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rejects_out_of_vocab_and_overlong_sequences() {
        let model = Model::new(tiny_config(), &mut seeded_rng(29)).unwrap();
        let tape: Tape<S> = Tape::new();
        let binder = ParamBinder::new(&tape);
        let w = uniform_weights(2, 2);
        assert!(model
            .forward(&binder, &[99], &[3, EOS_ID], &Routing::Const(&w))
            .is_err());
        let long: Vec<usize> = vec![3; 9];
        assert!(model
            .forward(&binder, &long, &[3, EOS_ID], &Routing::Const(&w))
            .is_err());
    }
}
