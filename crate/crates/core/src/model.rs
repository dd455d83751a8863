//! GRU-based hierarchical encoder-decoder, with and without an exemplar
//! response in the context sequence.
//!
//! An utterance encoder maps each utterance to its final GRU state, a
//! context GRU runs over the sequence `[s1, u]` (or `[s1, u, exemplar]`),
//! and the decoder starts from a projection of the context state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Var};
use crate::text::{EOS, SOS};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("cannot encode an empty token sequence")]
    EmptySequence,
    #[error("context encoder expects {expected} utterance vectors, got {got}")]
    ContextLength { expected: usize, got: usize },
    #[error("{0:?} model {1} an exemplar")]
    ExemplarMismatch(Architecture, &'static str),
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "hred")]
    Hred,
    #[serde(rename = "exemplar")]
    ExemplarHred,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Hred => "hred",
            Architecture::ExemplarHred => "exemplar",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Hred => "HRED",
            Architecture::ExemplarHred => "Exemplar-HRED",
        }
    }

    pub fn uses_exemplar(self) -> bool {
        self == Architecture::ExemplarHred
    }

    fn context_len(self) -> usize {
        if self.uses_exemplar() {
            3
        } else {
            2
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hred" => Ok(Architecture::Hred),
            "exemplar" | "exemplar-hred" => Ok(Architecture::ExemplarHred),
            other => Err(format!("unknown architecture `{other}` (expected hred or exemplar)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub max_decode_len: usize,
    pub arch: Architecture,
    /// Utterance and exemplar encoders share one GRU.
    pub share_encoder: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, arch: Architecture) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 256,
            hidden_dim: 512,
            dropout: 0.3,
            max_decode_len: 50,
            arch,
            share_encoder: true,
            init_scale: 0.08,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.vocab_size < 5 {
            return Err(ModelError::Dimension(
                "embed_dim and hidden_dim must be positive and the vocabulary non-trivial".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Dimension(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Single-layer GRU. Input weights are stored fused as `[z | r | h]`.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `input x 3H`
    pub w_x: ParamId,
    /// `H x 2H`, update and reset gates
    pub u_zr: ParamId,
    /// `H x H`, candidate state
    pub u_h: ParamId,
    /// `1 x 3H`
    pub bias: ParamId,
}

impl GruParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, scale: f64, rng: &mut R) -> Self {
        let h = hidden_dim;
        GruParams {
            input_dim,
            hidden_dim,
            w_x: store.add_uniform(&format!("{name}.w_x"), input_dim, 3 * h, scale, rng),
            u_zr: store.add_uniform(&format!("{name}.u_zr"), h, 2 * h, scale, rng),
            u_h: store.add_uniform(&format!("{name}.u_h"), h, h, scale, rng),
            bias: store.add_uniform(&format!("{name}.bias"), 1, 3 * h, scale, rng),
        }
    }

    /// `xs W + b` for a whole `T x input` sequence at once.
    pub fn project_inputs(&self, tape: &mut Tape, xs: Var) -> Var {
        let w = tape.param(self.w_x);
        let b = tape.param(self.bias);
        let xw = tape.matmul(xs, w);
        tape.add(xw, b)
    }

    /// One GRU update given the projected input row (`1 x 3H`):
    ///
    /// ```text
    /// z  = sigmoid(W_z x + U_z h + b_z)
    /// r  = sigmoid(W_r x + U_r h + b_r)
    /// h~ = tanh(W_h x + U_h (r * h) + b_h)
    /// h' = (1 - z) * h + z * h~
    /// ```
    pub fn step(&self, tape: &mut Tape, x_proj: Var, h: Var) -> Var {
        let hd = self.hidden_dim;
        let u_zr = tape.param(self.u_zr);
        let u_h = tape.param(self.u_h);
        let hu = tape.matmul(h, u_zr);
        let xz = tape.slice(x_proj, 0, hd);
        let xr = tape.slice(x_proj, hd, 2 * hd);
        let xh = tape.slice(x_proj, 2 * hd, 3 * hd);
        let hz = tape.slice(hu, 0, hd);
        let hr = tape.slice(hu, hd, 2 * hd);
        let z_pre = tape.add(xz, hz);
        let z = tape.sigmoid(z_pre);
        let r_pre = tape.add(xr, hr);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h);
        let rhu = tape.matmul(rh, u_h);
        let cand_pre = tape.add(xh, rhu);
        let cand = tape.tanh(cand_pre);
        let delta = tape.sub(cand, h);
        let gated = tape.mul(z, delta);
        tape.add(h, gated)
    }

    /// Runs the GRU from a zero state over `xs` (`T x input`) and returns
    /// every hidden state.
    pub fn run(&self, tape: &mut Tape, xs: Var, h0: Option<Var>) -> Vec<Var> {
        let (t, _) = tape.shape(xs);
        let proj = self.project_inputs(tape, xs);
        let mut h = h0.unwrap_or_else(|| tape.zeros(1, self.hidden_dim));
        let mut states = Vec::with_capacity(t);
        for i in 0..t {
            let x = tape.row(proj, i);
            h = self.step(tape, x, h);
            states.push(h);
        }
        states
    }
}

/// All trainable weights, registered in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub store: ParamStore,
    pub embedding: ParamId,
    pub encoder: GruParams,
    pub exemplar_encoder: Option<GruParams>,
    pub context: GruParams,
    pub decoder: GruParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
}

impl ParamSet {
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (v, e, h, s) = (config.vocab_size, config.embed_dim, config.hidden_dim, config.init_scale);
        let embedding = store.add_uniform("embedding", v, e, s, &mut rng);
        let encoder = GruParams::new(&mut store, "encoder", e, h, s, &mut rng);
        let exemplar_encoder = (config.arch.uses_exemplar() && !config.share_encoder)
            .then(|| GruParams::new(&mut store, "exemplar_encoder", e, h, s, &mut rng));
        let context = GruParams::new(&mut store, "context", h, h, s, &mut rng);
        let decoder = GruParams::new(&mut store, "decoder", e, h, s, &mut rng);
        let out_w = store.add_uniform("output.w", h, v, s, &mut rng);
        let out_b = store.add_uniform("output.b", 1, v, s, &mut rng);
        let init_w = store.add_uniform("init.w", h, h, s, &mut rng);
        let init_b = store.add_uniform("init.b", 1, h, s, &mut rng);
        ParamSet {
            store,
            embedding,
            encoder,
            exemplar_encoder,
            context,
            decoder,
            out_w,
            out_b,
            init_w,
            init_b,
        }
    }
}

/// Token ids for one training or inference example. Every sequence is
/// encoded with a trailing EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub s1: Vec<u32>,
    pub u: Vec<u32>,
    pub exemplar: Option<Vec<u32>>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct DialogueModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl DialogueModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ParamSet::init(&config);
        log::info!(
            "{} model with {} parameters",
            config.arch.display_name(),
            params.store.scalar_count()
        );
        Ok(DialogueModel { config, params })
    }

    pub fn store(&self) -> &ParamStore {
        &self.params.store
    }

    fn embed_rows<R: Rng>(&self, tape: &mut Tape, ids: &[u32], rng: &mut R, dropout: bool) -> Var {
        let table = tape.param(self.params.embedding);
        let e = tape.embedding(table, ids);
        if dropout {
            tape.dropout(e, self.config.dropout, rng, true)
        } else {
            e
        }
    }

    fn check_example(&self, ex: &Example) -> Result<(), ModelError> {
        match (self.config.arch.uses_exemplar(), ex.exemplar.is_some()) {
            (true, false) => Err(ModelError::ExemplarMismatch(self.config.arch, "requires")),
            (false, true) => Err(ModelError::ExemplarMismatch(self.config.arch, "does not take")),
            _ => Ok(()),
        }
    }

    /// Final hidden state of the utterance encoder over `ids`.
    pub fn encode_utterance(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var, ModelError> {
        self.encode_with(tape, &self.params.encoder, ids)
    }

    fn encode_with(&self, tape: &mut Tape, gru: &GruParams, ids: &[u32]) -> Result<Var, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::Dimension(format!("token id {bad} outside vocabulary")));
        }
        let table = tape.param(self.params.embedding);
        let xs = tape.embedding(table, ids);
        Ok(*gru.run(tape, xs, None).last().expect("non-empty"))
    }

    /// Encodes an exemplar response with the exemplar encoder (the utterance
    /// encoder when sharing is on).
    pub fn encode_exemplar(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var, ModelError> {
        let gru = self.params.exemplar_encoder.as_ref().unwrap_or(&self.params.encoder);
        self.encode_with(tape, gru, ids)
    }

    /// Runs the context GRU over the utterance vectors.
    pub fn encode_context(&self, tape: &mut Tape, vectors: &[Var]) -> Result<Var, ModelError> {
        let expected = self.config.arch.context_len();
        if vectors.len() != expected {
            return Err(ModelError::ContextLength {
                expected,
                got: vectors.len(),
            });
        }
        Ok(self.run_context(tape, vectors))
    }

    fn run_context(&self, tape: &mut Tape, vectors: &[Var]) -> Var {
        let xs = tape.stack_rows(vectors);
        *self.params.context.run(tape, xs, None).last().expect("non-empty")
    }

    pub fn context_vector<R: Rng>(&self, tape: &mut Tape, ex: &Example, rng: &mut R, training: bool) -> Result<Var, ModelError> {
        self.check_example(ex)?;
        let mut vectors = vec![self.encode_utterance(tape, &ex.s1)?, self.encode_utterance(tape, &ex.u)?];
        if let Some(exemplar) = &ex.exemplar {
            vectors.push(self.encode_exemplar(tape, exemplar)?);
        }
        let vectors: Vec<Var> = vectors
            .into_iter()
            .map(|v| tape.dropout(v, self.config.dropout, rng, training))
            .collect();
        self.encode_context(tape, &vectors)
    }

    fn initial_state(&self, tape: &mut Tape, context: Var) -> Var {
        let w = tape.param(self.params.init_w);
        let b = tape.param(self.params.init_b);
        let p = tape.matmul(context, w);
        let p = tape.add(p, b);
        tape.tanh(p)
    }

    fn logits(&self, tape: &mut Tape, states: Var) -> Var {
        let w = tape.param(self.params.out_w);
        let b = tape.param(self.params.out_b);
        let l = tape.matmul(states, w);
        tape.add(l, b)
    }

    /// Teacher-forced mean token cross-entropy of `ex.target`.
    pub fn forward_loss<R: Rng>(&self, tape: &mut Tape, ex: &Example, rng: &mut R, training: bool) -> Result<Var, ModelError> {
        if ex.target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        let context = self.context_vector(tape, ex, rng, training)?;
        let h0 = self.initial_state(tape, context);
        let mut inputs = Vec::with_capacity(ex.target.len());
        inputs.push(SOS);
        inputs.extend_from_slice(&ex.target[..ex.target.len() - 1]);
        let xs = self.embed_rows(tape, &inputs, rng, training);
        let states = self.params.decoder.run(tape, xs, Some(h0));
        let stacked = tape.stack_rows(&states);
        let logits = self.logits(tape, stacked);
        Ok(tape.softmax_cross_entropy(logits, &ex.target)?)
    }

    /// Greedy decoding; returns ids without the terminating EOS.
    pub fn decode_greedy(&self, ex: &Example) -> Result<Vec<u32>, ModelError> {
        let mut tape = Tape::new(&self.params.store);
        // dropout is off, the rng is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let context = self.context_vector(&mut tape, ex, &mut rng, false)?;
        Ok(self.decode_from_context(&mut tape, context))
    }

    pub fn decode_from_context(&self, tape: &mut Tape, context: Var) -> Vec<u32> {
        let mut h = self.initial_state(tape, context);
        let mut prev = SOS;
        let mut out = Vec::new();
        let table = tape.param(self.params.embedding);
        for _ in 0..self.config.max_decode_len {
            let x = tape.embedding(table, &[prev]);
            let proj = self.params.decoder.project_inputs(tape, x);
            h = self.params.decoder.step(tape, proj, h);
            let logits = self.logits(tape, h);
            let next = argmax(tape.value(logits));
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        out
    }
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}
