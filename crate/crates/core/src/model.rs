//! Block variants and the full token model.
//!
//! Every hidden state is a packed `[batch·seq, width]` matrix. A model of
//! depth `L` has `L` layers, each an attention block followed by a
//! feed-forward block. Each block is one of four variants:
//!
//! | variant    | update                                         |
//! |------------|------------------------------------------------|
//! | `standard` | `LN(X + F(X))` (Post-LN)                       |
//! | `mhc_only` | `X + F(LN X) ⊙ σ(LN(X·W_gate))`                |
//! | `ddl_only` | `X + β ⊙ (F(LN X) − α·X)`                      |
//! | `mgt_full` | `X + β ⊙ (F(LN X) ⊙ σ(LN(X·W_gate)) − α·X)`    |
//!
//! with `β = λ·tanh(X·W_β + b_β) + ε`.
//!
//! Parameters are stored by name in a [`ParamStore`]. Block parameters are
//! named `block{i}.{attn|ffn}.{param}`; the globals are `embed.tok`,
//! `embed.pos`, `final_ln.gain` and `final_ln.bias`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{AttentionLayout, Tape, Var};
use crate::error::{MgtError, Result};
use crate::tensor::Tensor;

/// LayerNorm stabilizer used by every normalization in the model.
pub const LN_EPS: f64 = 1e-5;
/// Standard deviation of the mHC gate projection at initialization.
pub const GATE_INIT_STD: f64 = 0.02;
/// Standard deviation of token and position embeddings at initialization.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    MhcOnly,
    DdlOnly,
    MgtFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Standard,
        Variant::MhcOnly,
        Variant::DdlOnly,
        Variant::MgtFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::MhcOnly => "mhc_only",
            Self::DdlOnly => "ddl_only",
            Self::MgtFull => "mgt_full",
        }
    }

    pub fn has_mhc(self) -> bool {
        matches!(self, Self::MhcOnly | Self::MgtFull)
    }

    pub fn has_ddl(self) -> bool {
        matches!(self, Self::DdlOnly | Self::MgtFull)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MgtError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MgtError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SublayerKind {
    Attention,
    FeedForward,
}

impl SublayerKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Attention => "attn",
            Self::FeedForward => "ffn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of (attention, feed-forward) layer pairs.
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    /// Maximum sequence length (size of the position table).
    pub seq_len: usize,
    pub variant: Variant,
    pub lambda: f64,
    pub epsilon: f64,
    pub alpha_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            vocab: 16,
            seq_len: 17,
            variant: Variant::MgtFull,
            lambda: 1.0,
            epsilon: 0.0,
            alpha_init: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("model.width", self.width),
            ("model.heads", self.heads),
            ("model.ffn_mult", self.ffn_mult),
            ("model.vocab", self.vocab),
            ("model.seq_len", self.seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(MgtError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.width < 2 {
            return Err(MgtError::InvalidConfig("model.width must be >= 2".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(MgtError::InvalidConfig(format!(
                "model.width {} is not divisible by model.heads {}",
                self.width, self.heads
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(MgtError::InvalidConfig(
                "model.lambda must be positive".into(),
            ));
        }
        if !self.epsilon.is_finite() || !self.alpha_init.is_finite() {
            return Err(MgtError::InvalidConfig(
                "model.epsilon and model.alpha_init must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: BTreeMap<String, Tensor>,
}

const CHECKPOINT_FORMAT: &str = "mgt-checkpoint-v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| MgtError::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| MgtError::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(name, t)| (name.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            params: self.params.clone(),
        })
        .map_err(|e| MgtError::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| MgtError::Io(format!("bad checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(MgtError::Io(format!(
                "unsupported checkpoint format {}",
                ck.format
            )));
        }
        for (name, t) in &ck.params {
            // Deserialization bypasses the constructor's length check.
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .map_err(|_| MgtError::Io(format!("checkpoint entry {name} has a bad shape")))?;
        }
        Ok(Self { params: ck.params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Tape handles for the parameters of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MgtError::Contract(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Deterministic per-parameter RNG: depends only on the seed and the name,
/// so a parameter's initial value does not depend on model depth.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn block_prefix(layer: usize, kind: SublayerKind) -> String {
    format!("block{layer}.{}", kind.tag())
}

/// Initializes one block's parameters under `prefix` (e.g. `block0.attn`).
pub fn init_block_params(
    store: &mut ParamStore,
    prefix: &str,
    kind: SublayerKind,
    config: &ModelConfig,
) {
    let d = config.width;
    let seed = config.seed;
    let mut randn = |name: &str, shape: &[usize], std: f64| {
        let full = format!("{prefix}.{name}");
        let t = Tensor::randn(shape, std, &mut param_rng(seed, &full));
        store.insert(full, t);
    };
    let fan_in = 1.0 / (d as f64).sqrt();
    match kind {
        SublayerKind::Attention => {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                randn(w, &[d, d], fan_in);
            }
        }
        SublayerKind::FeedForward => {
            let hidden = config.ffn_mult * d;
            randn("w_in", &[d, hidden], fan_in);
            randn("w_out", &[hidden, d], 1.0 / (hidden as f64).sqrt());
        }
    }
    if config.variant.has_mhc() {
        randn("w_gate", &[d, d], GATE_INIT_STD);
    }
    if kind == SublayerKind::FeedForward {
        store.insert(
            format!("{prefix}.b_in"),
            Tensor::zeros(&[config.ffn_mult * d]),
        );
        store.insert(format!("{prefix}.b_out"), Tensor::zeros(&[d]));
    }
    store.insert(format!("{prefix}.ln.gain"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.ln.bias"), Tensor::zeros(&[d]));
    if config.variant.has_mhc() {
        store.insert(format!("{prefix}.gate_ln.gain"), Tensor::ones(&[d]));
        store.insert(format!("{prefix}.gate_ln.bias"), Tensor::zeros(&[d]));
    }
    if config.variant.has_ddl() {
        store.insert(format!("{prefix}.w_beta"), Tensor::zeros(&[d, d]));
        store.insert(format!("{prefix}.b_beta"), Tensor::zeros(&[d]));
        store.insert(format!("{prefix}.alpha"), Tensor::scalar(config.alpha_init));
    }
}

pub fn init_params(config: &ModelConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let d = config.width;
    for (name, rows) in [("embed.tok", config.vocab), ("embed.pos", config.seq_len)] {
        let t = Tensor::randn(
            &[rows, d],
            EMBED_INIT_STD,
            &mut param_rng(config.seed, name),
        );
        store.insert(name, t);
    }
    store.insert("final_ln.gain", Tensor::ones(&[d]));
    store.insert("final_ln.bias", Tensor::zeros(&[d]));
    for layer in 0..config.depth {
        for kind in [SublayerKind::Attention, SublayerKind::FeedForward] {
            init_block_params(&mut store, &block_prefix(layer, kind), kind, config);
        }
    }
    Ok(store)
}

/// Tape handles for one block.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub kind: SublayerKind,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub sublayer: SublayerVars,
    pub mhc: Option<MhcVars>,
    pub ddl: Option<DdlVars>,
}

#[derive(Clone, Copy, Debug)]
pub enum SublayerVars {
    Attention {
        w_q: Var,
        w_k: Var,
        w_v: Var,
        w_o: Var,
    },
    FeedForward {
        w_in: Var,
        b_in: Var,
        w_out: Var,
        b_out: Var,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct MhcVars {
    pub w_gate: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DdlVars {
    pub w_beta: Var,
    pub b_beta: Var,
    pub alpha: Var,
}

impl BlockVars {
    pub fn resolve(
        bound: &BoundParams,
        prefix: &str,
        kind: SublayerKind,
        variant: Variant,
    ) -> Result<Self> {
        let v = |name: &str| bound.var(&format!("{prefix}.{name}"));
        let sublayer = match kind {
            SublayerKind::Attention => SublayerVars::Attention {
                w_q: v("w_q")?,
                w_k: v("w_k")?,
                w_v: v("w_v")?,
                w_o: v("w_o")?,
            },
            SublayerKind::FeedForward => SublayerVars::FeedForward {
                w_in: v("w_in")?,
                b_in: v("b_in")?,
                w_out: v("w_out")?,
                b_out: v("b_out")?,
            },
        };
        let mhc = if variant.has_mhc() {
            Some(MhcVars {
                w_gate: v("w_gate")?,
                ln_gain: v("gate_ln.gain")?,
                ln_bias: v("gate_ln.bias")?,
            })
        } else {
            None
        };
        let ddl = if variant.has_ddl() {
            Some(DdlVars {
                w_beta: v("w_beta")?,
                b_beta: v("b_beta")?,
                alpha: v("alpha")?,
            })
        } else {
            None
        };
        Ok(Self {
            kind,
            ln_gain: v("ln.gain")?,
            ln_bias: v("ln.bias")?,
            sublayer,
            mhc,
            ddl,
        })
    }
}

/// Multi-head causal self-attention with output projection.
pub fn attention_sublayer(
    tape: &mut Tape,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    layout: AttentionLayout,
) -> Result<Var> {
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let ctx = tape.attention(q, k, v, layout)?;
    tape.matmul(ctx, w_o)
}

/// Two-layer GELU feed-forward network.
pub fn ffn_sublayer(
    tape: &mut Tape,
    x: Var,
    w_in: Var,
    b_in: Var,
    w_out: Var,
    b_out: Var,
) -> Result<Var> {
    let h = tape.matmul(x, w_in)?;
    let h = tape.add(h, b_in)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, w_out)?;
    tape.add(o, b_out)
}

fn sublayer(tape: &mut Tape, x: Var, vars: &SublayerVars, layout: AttentionLayout) -> Result<Var> {
    match *vars {
        SublayerVars::Attention { w_q, w_k, w_v, w_o } => {
            attention_sublayer(tape, x, w_q, w_k, w_v, w_o, layout)
        }
        SublayerVars::FeedForward {
            w_in,
            b_in,
            w_out,
            b_out,
        } => ffn_sublayer(tape, x, w_in, b_in, w_out, b_out),
    }
}

/// mHC soft subspace gate: returns `(V_raw ⊙ G, G)` with `G = σ(LN(X·W_gate))`.
pub fn mhc_project(tape: &mut Tape, v_raw: Var, x: Var, mhc: &MhcVars) -> Result<(Var, Var)> {
    let scores = tape.matmul(x, mhc.w_gate)?;
    let normed = tape.layer_norm(scores, mhc.ln_gain, mhc.ln_bias, LN_EPS)?;
    let gate = tape.sigmoid(normed)?;
    let out = tape.mul(v_raw, gate)?;
    Ok((out, gate))
}

/// DDL controller `β = λ·tanh(X·W_β + b_β) + ε`.
pub fn ddl_gate(
    tape: &mut Tape,
    x: Var,
    w_beta: Var,
    b_beta: Var,
    lambda: f64,
    epsilon: f64,
) -> Result<Var> {
    let pre = tape.matmul(x, w_beta)?;
    let pre = tape.add(pre, b_beta)?;
    let t = tape.tanh(pre)?;
    let scaled = tape.scale(t, lambda)?;
    tape.shift(scaled, epsilon)
}

/// Erase-and-write update `X + β ⊙ (V − α·X)`.
pub fn mgt_update(tape: &mut Tape, x: Var, v: Var, beta: Var, alpha: Var) -> Result<Var> {
    let erased = tape.mul(x, alpha)?;
    let delta = tape.sub(v, erased)?;
    let gated = tape.mul(beta, delta)?;
    tape.add(x, gated)
}

/// Output of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub beta: Option<Var>,
    pub gate: Option<Var>,
}

/// Post-LN baseline block `LN(X + F(X))`.
pub fn standard_block_forward(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    layout: AttentionLayout,
) -> Result<BlockOutput> {
    let f = sublayer(tape, x, &block.sublayer, layout)?;
    let sum = tape.add(x, f)?;
    let out = tape.layer_norm(sum, block.ln_gain, block.ln_bias, LN_EPS)?;
    Ok(BlockOutput {
        out,
        beta: None,
        gate: None,
    })
}

/// One block of any variant. `standard` dispatches to the Post-LN block; the
/// others run pre-LN → sublayer → (mHC) → (DDL gate) → update.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    variant: Variant,
    lambda: f64,
    epsilon: f64,
    layout: AttentionLayout,
) -> Result<BlockOutput> {
    if variant == Variant::Standard {
        return standard_block_forward(tape, x, block, layout);
    }
    let normed = tape.layer_norm(x, block.ln_gain, block.ln_bias, LN_EPS)?;
    let v_raw = sublayer(tape, normed, &block.sublayer, layout)?;
    let (v, gate) = match (&block.mhc, variant.has_mhc()) {
        (Some(mhc), true) => {
            let (v, g) = mhc_project(tape, v_raw, x, mhc)?;
            (v, Some(g))
        }
        (None, true) => return Err(MgtError::Contract("mHC parameters missing".into())),
        _ => (v_raw, None),
    };
    match (&block.ddl, variant.has_ddl()) {
        (Some(ddl), true) => {
            let beta = ddl_gate(tape, x, ddl.w_beta, ddl.b_beta, lambda, epsilon)?;
            let out = mgt_update(tape, x, v, beta, ddl.alpha)?;
            Ok(BlockOutput {
                out,
                beta: Some(beta),
                gate,
            })
        }
        (None, true) => Err(MgtError::Contract("DDL parameters missing".into())),
        _ => Ok(BlockOutput {
            out: tape.add(x, v)?,
            beta: None,
            gate,
        }),
    }
}

/// Detached per-layer snapshot, taken after the layer's feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer_index: usize,
    /// `[batch·seq, width]` hidden state.
    pub hidden_state: Tensor,
    /// β of the attention block stacked above β of the feed-forward block,
    /// `[2·batch·seq, width]`; `None` without DDL.
    pub beta_values: Option<Tensor>,
    /// mHC gates, stacked the same way; `None` without mHC.
    pub gate_values: Option<Tensor>,
    pub batch: usize,
    pub seq: usize,
}

impl LayerTrace {
    /// Hidden state of one sequence, `[seq, width]`.
    pub fn sequence_state(&self, index: usize) -> Result<Tensor> {
        self.hidden_state
            .row_slice(index * self.seq, (index + 1) * self.seq)
    }
}

pub struct ForwardPass {
    pub logits: Var,
    /// Post-embedding, pre-block state.
    pub embedded: Var,
    pub bound: BoundParams,
    pub traces: Vec<LayerTrace>,
    pub batch: usize,
    pub seq: usize,
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, c) = a.dims2()?;
    let (rb, _) = b.dims2()?;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![ra + rb, c], data)
}

fn tag_layer(err: MgtError, layer: usize) -> MgtError {
    match err {
        MgtError::Instability { detail, .. } => MgtError::Instability { layer, detail },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config)?;
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(MgtError::Dimension {
                    op: "from_params",
                    left: t.shape().to_vec(),
                    right: got.shape().to_vec(),
                });
            }
        }
        if expected.len() != params.len() {
            return Err(MgtError::Contract("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Runs every layer pair on a packed `[batch·seq, width]` state.
    pub fn run_blocks(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: Var,
        layout: AttentionLayout,
        capture: bool,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        let cfg = &self.config;
        let mut x = input;
        let mut traces = Vec::with_capacity(if capture { cfg.depth } else { 0 });
        for layer in 0..cfg.depth {
            let mut betas = Vec::new();
            let mut gates = Vec::new();
            for kind in [SublayerKind::Attention, SublayerKind::FeedForward] {
                let vars =
                    BlockVars::resolve(bound, &block_prefix(layer, kind), kind, cfg.variant)?;
                let out =
                    block_forward(tape, x, &vars, cfg.variant, cfg.lambda, cfg.epsilon, layout)
                        .map_err(|e| tag_layer(e, layer))?;
                if !tape.value(out.out).all_finite() {
                    return Err(MgtError::Instability {
                        layer,
                        detail: format!("{} block output is not finite", kind.tag()),
                    });
                }
                betas.extend(out.beta);
                gates.extend(out.gate);
                x = out.out;
            }
            if capture {
                let stack = |vars: &[Var]| -> Result<Option<Tensor>> {
                    match vars {
                        [a, b] => Ok(Some(stack_rows(tape.value(*a), tape.value(*b))?)),
                        _ => Ok(None),
                    }
                };
                traces.push(LayerTrace {
                    layer_index: layer,
                    hidden_state: tape.value(x).clone(),
                    beta_values: stack(&betas)?,
                    gate_values: stack(&gates)?,
                    batch: layout.batch,
                    seq: layout.seq,
                });
            }
        }
        Ok((x, traces))
    }

    /// Runs the model on `batch` packed sequences of equal length.
    /// `capture` controls whether per-layer traces are recorded.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
        capture: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(MgtError::Contract(format!(
                "{} tokens cannot be split into {batch} sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > cfg.seq_len {
            return Err(MgtError::InvalidConfig(format!(
                "sequence length {seq} exceeds model.seq_len {}",
                cfg.seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(MgtError::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        let layout = AttentionLayout {
            batch,
            seq,
            heads: cfg.heads,
            causal: true,
        };
        let bound = self.params.bind(tape);
        let tok_table = bound.var("embed.tok")?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = tape.gather_rows(tok_table, tokens)?;
        let pos = tape.gather_rows(bound.var("embed.pos")?, &positions)?;
        let embedded = tape.add(tok, pos)?;

        let (x, traces) = self.run_blocks(tape, &bound, embedded, layout, capture)?;
        let normed = tape.layer_norm(
            x,
            bound.var("final_ln.gain")?,
            bound.var("final_ln.bias")?,
            LN_EPS,
        )?;
        let logits = tape.matmul_transpose_b(normed, tok_table)?;
        Ok(ForwardPass {
            logits,
            embedded,
            bound,
            traces,
            batch,
            seq,
        })
    }
}
