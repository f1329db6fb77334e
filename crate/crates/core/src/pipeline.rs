//! Synthetic segmented language model.
//!
//! Each segment is a stack of causal mixing layers
//! `h' = rmsnorm(x + tanh(W x + U mean(x_{≤t}) + b))` with fixed pseudo-random
//! weights. Segment 1 consumes token embeddings; a fixed output head turns the
//! final segment's last row into a greedy token. Generation keeps a running
//! prefix sum per layer, so incremental decode and batched prefill perform the
//! same float operations in the same order and agree bit-for-bit at zero
//! noise.
//!
//! Honest floating-point nondeterminism is modelled by [`NoiseModel`]: a small
//! Gaussian shift of each output significand, in ULPs, clamped so the binary
//! exponent never changes. Noise is keyed by `(node seed, segment, absolute
//! position, dim)` and applied only at segment outputs, so prefill and decode
//! by the same node see identical noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitments::HiddenState;
use crate::digest::{derive_seed, Digest};

/// Reserved end-of-sequence token.
pub const EOS: u32 = 0;

const RMS_EPS: f32 = 1e-6;
const SIGNIFICAND_BITS: u32 = 23;
const SIGNIFICAND_MASK: u32 = (1 << SIGNIFICAND_BITS) - 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("stage {0} out of range")]
    UnknownStage(usize),
    #[error("token {token} outside vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of pipeline segments (stages).
    pub segments: u32,
    pub layers_per_segment: u32,
    pub hidden_dim: usize,
    pub vocab: u32,
    pub seed: u64,
    /// Added to the EOS logit; negative values make natural stops rarer.
    pub eos_bias: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            segments: 4,
            layers_per_segment: 2,
            hidden_dim: 32,
            vocab: 64,
            seed: 7,
            eos_bias: -1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.segments == 0 || self.layers_per_segment == 0 {
            return bad("segments and layers_per_segment must be positive");
        }
        if self.hidden_dim == 0 || self.hidden_dim > 1024 {
            return bad("hidden_dim must be in 1..=1024");
        }
        if self.vocab < 2 {
            return bad("vocab must hold EOS and at least one other token");
        }
        Ok(())
    }

    pub fn total_layers(&self) -> u32 {
        self.segments * self.layers_per_segment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ArithmeticMode {
    FullPrecision,
    /// Symmetric fake-quantization of weights and every layer's activations.
    Quantized { bits: u32 },
}

/// Honest nondeterminism parameters; the seed identifies the executing node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of the significand shift, relative to `2^23` ULPs.
    pub rel_scale: f64,
    /// Probability that a scalar's exponent is shifted by ±3.
    pub exponent_flip_prob: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub const DEFAULT_REL_SCALE: f64 = 1e-6;

    pub fn none() -> Self {
        NoiseModel {
            rel_scale: 0.0,
            exponent_flip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn honest(seed: u64) -> Self {
        NoiseModel {
            rel_scale: Self::DEFAULT_REL_SCALE,
            exponent_flip_prob: 0.0,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseModel { seed, ..self }
    }

    pub fn is_silent(&self) -> bool {
        self.rel_scale == 0.0 && self.exponent_flip_prob == 0.0
    }

    /// Perturbs one output row of `segment` at absolute `position`.
    pub fn apply(&self, segment: u32, position: usize, row: &mut [f32]) {
        if self.is_silent() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[segment as u64, position as u64]));
        let ulps = self.rel_scale * (1u64 << SIGNIFICAND_BITS) as f64;
        for x in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            let flip = self.exponent_flip_prob > 0.0 && rng.gen_bool(self.exponent_flip_prob);
            *x = perturb(*x, (z * ulps).round() as i64, flip.then(|| if rng.gen_bool(0.5) { 3 } else { -3 }));
        }
    }
}

fn perturb(x: f32, delta_ulps: i64, exponent_shift: Option<i32>) -> f32 {
    let bits = x.to_bits();
    let sign = bits & 0x8000_0000;
    let mut exponent = ((bits >> SIGNIFICAND_BITS) & 0xff) as i32;
    let significand = (bits & SIGNIFICAND_MASK) as i64;
    let significand = (significand + delta_ulps).clamp(0, SIGNIFICAND_MASK as i64) as u32;
    if let Some(shift) = exponent_shift {
        if exponent > 0 {
            exponent = (exponent + shift).clamp(1, 254);
        }
    }
    f32::from_bits(sign | ((exponent as u32) << SIGNIFICAND_BITS) | significand)
}

/// Symmetric per-slice fake quantization to `bits`.
pub fn fake_quantize(values: &mut [f32], bits: u32) {
    let levels = ((1u64 << (bits.clamp(2, 24) - 1)) - 1) as f32;
    let max = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    let scale = max / levels;
    for v in values.iter_mut() {
        *v = (*v / scale).round() * scale;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
    VerifyPrefill,
}

impl Phase {
    fn slot(self) -> usize {
        self as usize
    }
}

/// Floating-op counts per segment and phase. Head ops are charged to
/// [`Phase::Decode`] under segment `L`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMeter {
    per_segment: Vec<[u64; 3]>,
}

impl CostMeter {
    pub fn new(segments: usize) -> Self {
        CostMeter {
            per_segment: vec![[0; 3]; segments],
        }
    }

    pub fn add(&mut self, segment: u32, phase: Phase, ops: u64) {
        let i = segment as usize - 1;
        if self.per_segment.len() <= i {
            self.per_segment.resize(i + 1, [0; 3]);
        }
        self.per_segment[i][phase.slot()] += ops;
    }

    pub fn get(&self, segment: u32, phase: Phase) -> u64 {
        self.per_segment
            .get(segment as usize - 1)
            .map_or(0, |s| s[phase.slot()])
    }

    pub fn total(&self, phase: Phase) -> u64 {
        self.per_segment.iter().map(|s| s[phase.slot()]).sum()
    }

    pub fn reset(&mut self) {
        self.per_segment.iter_mut().for_each(|s| *s = [0; 3]);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: Vec<f32>,
    u: Vec<f32>,
    b: Vec<f32>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, len: usize, std: f32) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
}

fn matvec_add(m: &[f32], x: &[f32], out: &mut [f32]) {
    let d = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(d)) {
        let mut acc = 0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// One contiguous layer block `F_i` with its weights `W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentModel {
    index: u32,
    hidden_dim: usize,
    weight_seed: u64,
    mode: ArithmeticMode,
    layers: Vec<Layer>,
}

impl SegmentModel {
    pub fn new(config: &ModelConfig, index: u32, mode: ArithmeticMode) -> Self {
        let d = config.hidden_dim;
        let weight_seed = derive_seed(config.seed, &[0x5e6, index as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let std = 1.0 / (d as f32).sqrt();
        let layers = (0..config.layers_per_segment)
            .map(|_| {
                let mut l = Layer {
                    w: gaussian_matrix(&mut rng, d * d, std),
                    u: gaussian_matrix(&mut rng, d * d, std),
                    b: gaussian_matrix(&mut rng, d, 0.1),
                };
                if let ArithmeticMode::Quantized { bits } = mode {
                    fake_quantize(&mut l.w, bits);
                    fake_quantize(&mut l.u, bits);
                    fake_quantize(&mut l.b, bits);
                }
                l
            })
            .collect();
        SegmentModel {
            index,
            hidden_dim: d,
            weight_seed,
            mode,
            layers,
        }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn weight_seed(&self) -> u64 {
        self.weight_seed
    }

    pub fn mode(&self) -> ArithmeticMode {
        self.mode
    }

    /// Ops for one position through every layer of the block.
    pub fn ops_per_position(&self) -> u64 {
        let d = self.hidden_dim as u64;
        self.layers.len() as u64 * (4 * d * d + 10 * d)
    }
}

/// Incremental causal state of one segment execution.
#[derive(Debug, Clone)]
pub struct SegmentSession<'a> {
    model: &'a SegmentModel,
    noise: NoiseModel,
    prefix_sums: Vec<Vec<f32>>,
    positions: usize,
}

impl<'a> SegmentSession<'a> {
    pub fn new(model: &'a SegmentModel, noise: NoiseModel) -> Self {
        SegmentSession {
            model,
            noise,
            prefix_sums: vec![vec![0.0; model.hidden_dim]; model.layers.len()],
            positions: 0,
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Runs the next `rows.len() / d` positions; returns their outputs.
    pub fn forward_chunk(&mut self, rows: &[f32], meter: &mut CostMeter, phase: Phase) -> Result<Vec<f32>, PipelineError> {
        let d = self.model.hidden_dim;
        if !rows.len().is_multiple_of(d) {
            return Err(PipelineError::ShapeMismatch(format!("{} scalars not a multiple of {d}", rows.len())));
        }
        let mut out = Vec::with_capacity(rows.len());
        let mut z = vec![0f32; d];
        let mut mean = vec![0f32; d];
        for row in rows.chunks_exact(d) {
            let mut x = row.to_vec();
            let count = (self.positions + 1) as f32;
            for (layer, sums) in self.model.layers.iter().zip(self.prefix_sums.iter_mut()) {
                for ((s, m), xi) in sums.iter_mut().zip(mean.iter_mut()).zip(&x) {
                    *s += xi;
                    *m = *s / count;
                }
                z.copy_from_slice(&layer.b);
                matvec_add(&layer.w, &x, &mut z);
                matvec_add(&layer.u, &mean, &mut z);
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += zi.tanh();
                }
                let ms = x.iter().map(|v| v * v).sum::<f32>() / d as f32;
                let inv = 1.0 / (ms + RMS_EPS).sqrt();
                x.iter_mut().for_each(|v| *v *= inv);
                if let ArithmeticMode::Quantized { bits } = self.model.mode {
                    fake_quantize(&mut x, bits);
                }
            }
            self.noise.apply(self.model.index, self.positions, &mut x);
            out.extend_from_slice(&x);
            self.positions += 1;
        }
        meter.add(self.model.index, phase, self.model.ops_per_position() * (rows.len() / d) as u64);
        Ok(out)
    }
}

/// `F_i` applied to a whole state sequence from position 0.
pub fn segment_forward(
    model: &SegmentModel,
    input: &HiddenState,
    noise: NoiseModel,
    meter: &mut CostMeter,
    phase: Phase,
) -> Result<HiddenState, PipelineError> {
    if input.hidden_dim() != model.hidden_dim {
        return Err(PipelineError::ShapeMismatch(format!(
            "state dim {} vs segment dim {}",
            input.hidden_dim(),
            model.hidden_dim
        )));
    }
    let out = SegmentSession::new(model, noise).forward_chunk(input.values(), meter, phase)?;
    state(input.task_id, model.index + 1, input.token_index, input.token_count(), model.hidden_dim, out)
}

fn state(task: Digest, segment: u32, token: u32, rows: usize, dim: usize, values: Vec<f32>) -> Result<HiddenState, PipelineError> {
    HiddenState::new(task, segment, token, (rows as u32, dim as u32), values)
        .map_err(|e| PipelineError::ShapeMismatch(e.to_string()))
}

/// Embedding table, segments and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Vec<f32>,
    head: Vec<f32>,
    segments: Vec<SegmentModel>,
}

impl Model {
    pub fn new(config: ModelConfig, mode: ArithmeticMode) -> Result<Self, PipelineError> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xe4b]));
        let embed = gaussian_matrix(&mut rng, v * d, 1.0);
        let head = gaussian_matrix(&mut rng, v * d, 1.0 / (d as f32).sqrt());
        let segments = (1..=config.segments).map(|i| SegmentModel::new(&config, i, mode)).collect();
        Ok(Model {
            config,
            embed,
            head,
            segments,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn segments(&self) -> &[SegmentModel] {
        &self.segments
    }

    /// Segment `stage` (1-based).
    pub fn segment(&self, stage: usize) -> Result<&SegmentModel, PipelineError> {
        stage
            .checked_sub(1)
            .and_then(|i| self.segments.get(i))
            .ok_or(PipelineError::UnknownStage(stage))
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>, PipelineError> {
        let d = self.config.hidden_dim;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.config.vocab {
                return Err(PipelineError::UnknownToken {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
            out.extend_from_slice(&self.embed[t as usize * d..(t as usize + 1) * d]);
        }
        Ok(out)
    }

    pub fn head_ops(&self) -> u64 {
        2 * self.config.vocab as u64 * self.config.hidden_dim as u64
    }

    /// Greedy decode of one final-segment row.
    pub fn decode_row(&self, row: &[f32], allow_eos: bool) -> u32 {
        let d = self.config.hidden_dim;
        let mut best = (if allow_eos { 0 } else { 1 }, f32::NEG_INFINITY);
        for (tok, w) in self.head.chunks_exact(d).enumerate() {
            if tok == EOS as usize && !allow_eos {
                continue;
            }
            let mut logit: f32 = w.iter().zip(row).map(|(a, b)| a * b).sum();
            if tok == EOS as usize {
                logit += self.config.eos_bias;
            }
            if logit > best.1 {
                best = (tok as u32, logit);
            }
        }
        best.0
    }

    /// `Decode(S_{L+1})` on the last row of a tail state.
    pub fn decode_step(&self, tail: &HiddenState, meter: &mut CostMeter) -> u32 {
        meter.add(self.config.segments, Phase::Decode, self.head_ops());
        self.decode_row(tail.row(tail.token_count() - 1), true)
    }

    /// Greedy tokens for every row of `tail` from `first_row` on.
    pub fn decode_rows(&self, tail: &HiddenState, first_row: usize) -> Vec<u32> {
        (first_row..tail.token_count())
            .map(|r| self.decode_row(tail.row(r), true))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    /// Claim EOS at this step regardless of the model (early stop).
    pub stop_at: Option<usize>,
    pub allow_eos: bool,
}

impl GenerateOptions {
    pub fn new(max_tokens: usize) -> Self {
        GenerateOptions {
            max_tokens,
            stop_at: None,
            allow_eos: true,
        }
    }
}

/// Output of a generation run: `outputs[t][i]` is segment `i + 1`'s output at
/// step `t + 1` (step 1 covers the whole prompt, later steps one position).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub stop: StopReason,
    pub outputs: Vec<Vec<HiddenState>>,
    /// Whether an early-stop override actually replaced a token.
    pub stop_overridden: bool,
}

impl Generation {
    pub fn truncated(&self) -> bool {
        self.stop == StopReason::MaxTokens
    }

    /// Stage-1 prefill input `[prompt ‖ y_{1:T−1}]`.
    pub fn prefill_tokens(&self) -> Vec<u32> {
        prefill_tokens(&self.prompt, &self.tokens)
    }

    /// Segment `stage`'s outputs over every position, concatenated.
    pub fn stage_outputs(&self, stage: usize) -> HiddenState {
        let steps: Vec<HiddenState> = self.outputs.iter().map(|s| s[stage - 1].clone()).collect();
        HiddenState::concat(&steps).expect("steps share task, segment and width")
    }
}

pub fn prefill_tokens(prompt: &[u32], tokens: &[u32]) -> Vec<u32> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    seq
}

/// Autoregressive generation through all segments. `hop` sees each boundary
/// state right after a segment produces it and before the next consumes it;
/// it may sign, log or alter the relayed value.
#[allow(clippy::too_many_arguments)]
pub fn generate_with<E>(
    model: &Model,
    noise: &[NoiseModel],
    task: Digest,
    prompt: &[u32],
    options: GenerateOptions,
    meter: &mut CostMeter,
    mut hop: impl FnMut(usize, usize, &mut HiddenState) -> Result<(), E>,
) -> Result<Result<Generation, PipelineError>, E> {
    let l = model.segments.len();
    if noise.len() != l {
        return Ok(Err(PipelineError::ShapeMismatch(format!("{} noise models for {l} segments", noise.len()))));
    }
    if prompt.is_empty() || options.max_tokens == 0 {
        return Ok(Err(PipelineError::InvalidConfig("empty prompt or zero max_tokens".into())));
    }
    let d = model.config.hidden_dim;
    let mut sessions: Vec<SegmentSession> = model.segments.iter().zip(noise).map(|(s, n)| SegmentSession::new(s, *n)).collect();
    let mut tokens = Vec::new();
    let mut outputs = Vec::new();
    let mut stop = StopReason::MaxTokens;
    let mut stop_overridden = false;
    for step in 1..=options.max_tokens {
        let (input, phase) = if step == 1 {
            (prompt.to_vec(), Phase::Prefill)
        } else {
            (vec![*tokens.last().expect("previous token")], Phase::Decode)
        };
        let mut x = match model.embed(&input) {
            Ok(x) => x,
            Err(e) => return Ok(Err(e)),
        };
        let rows = input.len();
        let mut step_states = Vec::with_capacity(l);
        for (i, session) in sessions.iter_mut().enumerate() {
            let out = match session.forward_chunk(&x, meter, phase) {
                Ok(o) => o,
                Err(e) => return Ok(Err(e)),
            };
            let mut s = match state(task, i as u32 + 2, step as u32, rows, d, out) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e)),
            };
            hop(step, i + 1, &mut s)?;
            x = s.values().to_vec();
            step_states.push(s);
        }
        meter.add(l as u32, Phase::Decode, model.head_ops());
        let mut y = model.decode_row(&x[x.len() - d..], options.allow_eos);
        if options.stop_at == Some(step) && y != EOS {
            y = EOS;
            stop_overridden = true;
        }
        tokens.push(y);
        outputs.push(step_states);
        if y == EOS {
            stop = StopReason::Eos;
            break;
        }
    }
    Ok(Ok(Generation {
        prompt: prompt.to_vec(),
        tokens,
        stop,
        outputs,
        stop_overridden,
    }))
}

pub fn generate(
    model: &Model,
    noise: &[NoiseModel],
    task: Digest,
    prompt: &[u32],
    options: GenerateOptions,
    meter: &mut CostMeter,
) -> Result<Generation, PipelineError> {
    generate_with(model, noise, task, prompt, options, meter, |_, _, _| Ok::<(), std::convert::Infallible>(()))
        .unwrap_or_else(|never| match never {})
}

/// Verifier input for one stage.
#[derive(Debug, Clone, Copy)]
pub enum PrefillInput<'a> {
    Tokens(&'a [u32]),
    States(&'a HiddenState),
}

/// One batched causal pass of segment `stage` over the whole sequence.
pub fn verify_prefill(
    model: &Model,
    stage: usize,
    input: PrefillInput<'_>,
    task: Digest,
    noise: NoiseModel,
    meter: &mut CostMeter,
) -> Result<HiddenState, PipelineError> {
    let seg = model.segment(stage)?;
    let x = match input {
        PrefillInput::Tokens(t) => {
            if stage != 1 {
                return Err(PipelineError::ShapeMismatch(format!("stage {stage} takes states, not tokens")));
            }
            model.embed(t)?
        }
        PrefillInput::States(s) => {
            if stage == 1 || s.hidden_dim() != seg.hidden_dim {
                return Err(PipelineError::ShapeMismatch(format!("stage {stage} cannot take a {:?} state", s.shape())));
            }
            s.values().to_vec()
        }
    };
    let rows = x.len() / seg.hidden_dim;
    if rows == 0 {
        return Err(PipelineError::ShapeMismatch("empty sequence".into()));
    }
    let out = SegmentSession::new(seg, noise).forward_chunk(&x, meter, Phase::VerifyPrefill)?;
    state(task, stage as u32 + 1, 1, rows, seg.hidden_dim, out)
}

/// Full-model prefill over a token sequence; returns each segment's output.
pub fn full_prefill(model: &Model, tokens: &[u32], task: Digest, noise: &[NoiseModel], meter: &mut CostMeter) -> Result<Vec<HiddenState>, PipelineError> {
    let mut x = model.embed(tokens)?;
    let mut outs = Vec::with_capacity(model.segments.len());
    for (seg, n) in model.segments.iter().zip(noise) {
        let out = SegmentSession::new(seg, *n).forward_chunk(&x, meter, Phase::Prefill)?;
        let s = state(task, seg.index + 1, 1, tokens.len(), seg.hidden_dim, out)?;
        x = s.values().to_vec();
        outs.push(s);
    }
    Ok(outs)
}

/// Cuts a full-sequence state into generation steps: `prompt_len` rows, then
/// one row per step.
pub fn split_steps(full: &HiddenState, prompt_len: usize) -> Vec<HiddenState> {
    let mut steps = vec![full.slice_rows(0, prompt_len)];
    for r in prompt_len..full.token_count() {
        steps.push(full.slice_rows(r, 1));
    }
    for (t, s) in steps.iter_mut().enumerate() {
        s.token_index = t as u32 + 1;
    }
    steps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    Identity,
    /// Every inferencer runs reduced-precision arithmetic.
    Quantize { bits: u32 },
    /// The tail claims EOS at step `at`.
    EarlyStop { at: usize },
    /// Tokens come from a cheap model; states are fabricated by one prefill
    /// of the real model over those tokens.
    ForgedOutput { small_dim: usize, seed: u64 },
}

impl Attack {
    pub fn validate(&self) -> Result<(), PipelineError> {
        match *self {
            Attack::Quantize { bits } if !(2..=24).contains(&bits) => {
                Err(PipelineError::InvalidConfig(format!("quantize bits {bits} outside 2..=24")))
            }
            Attack::EarlyStop { at: 0 } => Err(PipelineError::InvalidConfig("early stop at step 0".into())),
            Attack::ForgedOutput { small_dim: 0, .. } => Err(PipelineError::InvalidConfig("forged model dim 0".into())),
            _ => Ok(()),
        }
    }

    pub fn is_honest(&self) -> bool {
        matches!(self, Attack::Identity)
    }
}

/// Runs generation as an inferencer following `attack`.
#[allow(clippy::too_many_arguments)]
pub fn apply_attack_with<E>(
    attack: Attack,
    honest: &Model,
    noise: &[NoiseModel],
    task: Digest,
    prompt: &[u32],
    max_tokens: usize,
    meter: &mut CostMeter,
    mut hop: impl FnMut(usize, usize, &mut HiddenState) -> Result<(), E>,
) -> Result<Result<Generation, PipelineError>, E> {
    if let Err(e) = attack.validate() {
        return Ok(Err(e));
    }
    let options = GenerateOptions::new(max_tokens);
    match attack {
        Attack::Identity => generate_with(honest, noise, task, prompt, options, meter, hop),
        Attack::Quantize { bits } => {
            let q = match Model::new(honest.config, ArithmeticMode::Quantized { bits }) {
                Ok(q) => q,
                Err(e) => return Ok(Err(e)),
            };
            generate_with(&q, noise, task, prompt, options, meter, hop)
        }
        Attack::EarlyStop { at } => generate_with(
            honest,
            noise,
            task,
            prompt,
            GenerateOptions {
                stop_at: Some(at),
                ..options
            },
            meter,
            hop,
        ),
        Attack::ForgedOutput { small_dim, seed } => {
            let small_cfg = ModelConfig {
                segments: 1,
                layers_per_segment: 1,
                hidden_dim: small_dim,
                seed,
                ..honest.config
            };
            let fabricated = (|| {
                let small = Model::new(small_cfg, ArithmeticMode::FullPrecision)?;
                let mut scratch = CostMeter::new(1);
                let forged = generate(
                    &small,
                    &[NoiseModel::none()],
                    task,
                    prompt,
                    GenerateOptions {
                        allow_eos: false,
                        ..options
                    },
                    &mut scratch,
                )?;
                let seq = forged.prefill_tokens();
                let full = full_prefill(honest, &seq, task, noise, meter)?;
                Ok((forged.tokens, full))
            })();
            let (tokens, full) = match fabricated {
                Ok(v) => v,
                Err(e) => return Ok(Err(e)),
            };
            let per_stage: Vec<Vec<HiddenState>> = full.iter().map(|s| split_steps(s, prompt.len())).collect();
            let mut outputs = Vec::with_capacity(tokens.len());
            for t in 0..tokens.len() {
                let mut step = Vec::with_capacity(per_stage.len());
                for (i, stage) in per_stage.iter().enumerate() {
                    let mut s = stage[t].clone();
                    hop(t + 1, i + 1, &mut s)?;
                    step.push(s);
                }
                outputs.push(step);
            }
            Ok(Ok(Generation {
                prompt: prompt.to_vec(),
                tokens,
                stop: StopReason::MaxTokens,
                outputs,
                stop_overridden: false,
            }))
        }
    }
}

pub fn apply_attack(
    attack: Attack,
    honest: &Model,
    noise: &[NoiseModel],
    task: Digest,
    prompt: &[u32],
    max_tokens: usize,
    meter: &mut CostMeter,
) -> Result<Generation, PipelineError> {
    apply_attack_with(attack, honest, noise, task, prompt, max_tokens, meter, |_, _, _| {
        Ok::<(), std::convert::Infallible>(())
    })
    .unwrap_or_else(|never| match never {})
}
