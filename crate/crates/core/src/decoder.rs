//! The caption decoding loop: embed the previous word, update the latent
//! state, summarize it into a vector, project to vocabulary logits.
//!
//! Two interventions can be applied at every step of a 2D decoder: pooling
//! restricted to a subregion of the state, and one state channel clamped to
//! zero after each cell update.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{relative_error, AutodiffError, GradCheckReport, ParamSet, Tape, Var};
use crate::cells::{
    init_params, param_specs, Cell, CellConfig, CellError, CellState, Shape, VisualInput,
    VisualTerms,
};
use crate::tensor::{log_softmax, softmax, BicubicPlan, Region, Scalar, Tensor, TensorError};
use crate::training::Vocabulary;

/// Default caption cap in words.
pub const MAX_CAPTION_WORDS: usize = 18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
    #[error("unsupported intervention: {0}")]
    Unsupported(String),
    #[error("contract error: {0}")]
    Contract(String),
}

impl From<AutodiffError> for DecodeError {
    fn from(e: AutodiffError) -> Self {
        DecodeError::Cell(e.into())
    }
}

impl From<TensorError> for DecodeError {
    fn from(e: TensorError) -> Self {
        DecodeError::Cell(e.into())
    }
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl FromStr for Pooling {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(DecodeError::Contract(format!("unknown pooling {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellConfig,
    pub vocab_size: usize,
    /// Visual feature extents `(C_v, H, W)`.
    pub visual: (usize, usize, usize),
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        let (c, h, w) = self.visual;
        if c == 0 || h == 0 || w == 0 {
            return Err(DecodeError::Contract(format!(
                "visual extents must be positive, got {:?}",
                self.visual
            )));
        }
        if self.vocab_size == 0 {
            return Err(DecodeError::Contract("vocabulary must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intervention {
    /// Pool only this one-based inclusive window of the state.
    Region(Region),
    /// Clamp this state channel to zero after every cell update.
    Deactivate(usize),
}

/// All learnable parameters of a decoder plus its shape configuration and
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
    vocab: Vocabulary,
}

impl<T: Scalar> DecoderModel<T> {
    /// Seeded initialization.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let specs = param_specs(&config.cell, config.vocab_size, config.visual);
        Self::from_params(config, vocab, init_params(&specs, seed))
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        let mut model = Self::new(config, vocab, 0)?;
        for (_, t) in model.params.iter_mut() {
            t.data_mut().fill(T::zero());
        }
        Ok(model)
    }

    /// Validates that `params` holds exactly the tensors the config requires.
    pub fn from_params(
        config: ModelConfig,
        vocab: Vocabulary,
        params: ParamSet<T>,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(DecodeError::Vocabulary(format!(
                "config expects {} tokens, vocabulary has {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let specs = param_specs(&config.cell, config.vocab_size, config.visual);
        if specs.len() != params.len() {
            return Err(DecodeError::Contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| DecodeError::Contract(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(DecodeError::Contract(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self {
            config,
            params,
            vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn cast<U: Scalar>(&self) -> DecoderModel<U> {
        DecoderModel {
            config: self.config.clone(),
            params: self.params.cast(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn is_2d(&self) -> bool {
        self.config.cell.kind.is_2d()
    }

    /// Starts a decoding session over one visual feature.
    pub fn session<'m>(&'m self, visual: &Tensor<T>) -> Result<Session<'m, T>> {
        Session::new(self, visual)
    }

    /// One decoding step from explicit state values. Returns the new state
    /// and the next-word probability vector.
    pub fn decode_step(
        &self,
        state: &StateValue<T>,
        prev: usize,
        visual: &Tensor<T>,
        intervention: Option<Intervention>,
    ) -> Result<(StateValue<T>, Tensor<T>)> {
        let mut session = self.session(visual)?;
        let st = session.state_from(state);
        let out = session.step(st, prev, intervention)?;
        let next = session.state_value(out.state);
        let probs = softmax(session.tape().value(out.logits))?;
        Ok((next, probs))
    }

    /// `Σₜ log p(wₜ | w₁..ₜ₋₁, V)` under teacher forcing, starting from `<bos>`.
    pub fn log_likelihood(&self, visual: &Tensor<T>, tokens: &[usize]) -> Result<T> {
        let mut session = self.session(visual)?;
        let nll = session.sequence_nll(tokens, None)?;
        Ok(-session.tape().value(nll).item()?)
    }

    pub fn generate(
        &self,
        visual: &Tensor<T>,
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Generation<T>> {
        self.generate_with(visual, mode, max_len, None)
    }

    /// Generation with an intervention applied at every step.
    pub fn generate_with(
        &self,
        visual: &Tensor<T>,
        mode: DecodeMode,
        max_len: usize,
        intervention: Option<Intervention>,
    ) -> Result<Generation<T>> {
        if max_len == 0 {
            return Err(DecodeError::Contract(
                "max length must be at least 1".into(),
            ));
        }
        match mode {
            DecodeMode::Greedy => self.run_policy(visual, max_len, intervention, |lp| argmax(lp)),
            DecodeMode::Sample(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.run_policy(visual, max_len, intervention, move |lp| {
                    sample(lp, &mut rng)
                })
            }
            DecodeMode::Beam(width) => {
                if width == 0 {
                    return Err(DecodeError::Contract(
                        "beam width must be at least 1".into(),
                    ));
                }
                let tokens = self.beam_search(visual, width, max_len, intervention)?;
                let mut it = tokens.into_iter();
                self.run_policy(visual, max_len, intervention, move |_| {
                    it.next().unwrap_or(0)
                })
            }
        }
    }

    pub fn generate_with_region(
        &self,
        visual: &Tensor<T>,
        region: Region,
        max_len: usize,
    ) -> Result<Generation<T>> {
        self.generate_with(
            visual,
            DecodeMode::Greedy,
            max_len,
            Some(Intervention::Region(region)),
        )
    }

    pub fn generate_with_channel_deactivated(
        &self,
        visual: &Tensor<T>,
        channel: usize,
        max_len: usize,
    ) -> Result<Generation<T>> {
        if !self.is_2d() {
            return Err(DecodeError::Unsupported(format!(
                "{} has no state channels to deactivate",
                self.config.cell.kind
            )));
        }
        self.generate_with(
            visual,
            DecodeMode::Greedy,
            max_len,
            Some(Intervention::Deactivate(channel)),
        )
    }

    /// Steps until `<eos>` or the cap, choosing each token with `policy`
    /// applied to the step's log-probabilities.
    fn run_policy(
        &self,
        visual: &Tensor<T>,
        max_len: usize,
        intervention: Option<Intervention>,
        mut policy: impl FnMut(&[T]) -> usize,
    ) -> Result<Generation<T>> {
        let mut session = self.session(visual)?;
        let mut state = session.initial_state();
        let mut prev = self.vocab.bos();
        let mut steps = Vec::new();
        let mut termination = Termination::MaxLength;
        for _ in 0..max_len {
            let out = session.step(state, prev, intervention)?;
            let logits = session.tape().value(out.logits).clone();
            let lp = log_softmax(&logits)?;
            let token = policy(lp.data());
            let value = session.state_value(out.state);
            steps.push(TraceStep {
                token,
                state: value.h,
                cell: value.cell,
                pooled: session.tape().value(out.pooled).clone(),
                logits,
            });
            state = out.state;
            prev = token;
            if token == self.vocab.eos() {
                termination = Termination::Eos;
                break;
            }
        }
        let tokens = steps
            .iter()
            .map(|s| s.token)
            .filter(|&t| t != self.vocab.eos())
            .collect();
        Ok(Generation {
            tokens,
            trace: DecodeTrace {
                steps,
                visual: visual.clone(),
                termination,
            },
        })
    }

    fn beam_search(
        &self,
        visual: &Tensor<T>,
        width: usize,
        max_len: usize,
        intervention: Option<Intervention>,
    ) -> Result<Vec<usize>> {
        struct Hyp {
            tokens: Vec<usize>,
            state: CellState,
            score: f64,
        }
        let mut session = self.session(visual)?;
        let eos = self.vocab.eos();
        let mut live = vec![Hyp {
            tokens: Vec::new(),
            state: session.initial_state(),
            score: 0.0,
        }];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..max_len {
            // (score, parent rank, token log-prob, token, next state)
            let mut cands: Vec<(f64, usize, f64, usize, CellState)> = Vec::new();
            for (rank, hyp) in live.iter().enumerate() {
                let prev = hyp.tokens.last().copied().unwrap_or(self.vocab.bos());
                let out = session.step(hyp.state, prev, intervention)?;
                let lp = log_softmax(session.tape().value(out.logits))?;
                for (tok, &l) in lp.data().iter().enumerate() {
                    let l = l.as_f64();
                    cands.push((hyp.score + l, rank, l, tok, out.state));
                }
            }
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.cmp(&b.1))
                    .then(b.2.total_cmp(&a.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next = Vec::with_capacity(width);
            for (score, rank, _, tok, state) in cands.into_iter().take(width) {
                let mut tokens = live[rank].tokens.clone();
                tokens.push(tok);
                if tok == eos {
                    finished.push((tokens, score));
                } else {
                    next.push(Hyp {
                        tokens,
                        state,
                        score,
                    });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        finished.extend(live.into_iter().map(|h| (h.tokens, h.score)));
        let best = finished
            .into_iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.1.total_cmp(&b.1).then(ib.cmp(ia)))
            .map(|(_, f)| f.0)
            .unwrap_or_default();
        Ok(best)
    }
}

/// Lowest index among the maxima.
fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample<T: Scalar>(log_probs: &[T], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &l) in log_probs.iter().enumerate() {
        acc += l.as_f64().exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Teacher-forced caption NLL gradients against central finite differences
/// on up to `samples` seeded parameter coordinates per tensor. The numeric
/// value is Richardson-extrapolated from steps `epsilon` and `epsilon / 2`,
/// `(4·D(ε/2) − D(ε)) / 3`, which cancels the ε² term. Coordinates whose
/// perturbation moves the forward pass onto another smooth piece (see
/// [`Tape::kink_pattern`]) are skipped and counted.
pub fn gradient_check(
    model: &DecoderModel<f64>,
    visual: &Tensor<f64>,
    tokens: &[usize],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) || samples == 0 {
        return Err(DecodeError::Contract(
            "epsilon and sample count must be positive".into(),
        ));
    }
    let forward = |m: &DecoderModel<f64>| -> Result<(f64, Vec<usize>)> {
        let mut session = m.session(visual)?;
        let nll = session.sequence_nll(tokens, None)?;
        let tape = session.tape();
        Ok((tape.value(nll).item()?, tape.kink_pattern()))
    };
    let analytic = {
        let mut session = model.session(visual)?;
        let nll = session.sequence_nll(tokens, None)?;
        session.tape().backward(nll)?
    };
    let (_, base_pattern) = forward(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Default::default(),
        coordinates_checked: 0,
        coordinates_skipped: 0,
    };
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let len = model.params.require(&name)?.len();
        let mut picked: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, samples).into_vec()
        };
        picked.sort_unstable();
        let mut worst: f64 = 0.0;
        for i in picked {
            let original = model.params.require(&name)?.data()[i];
            let mut eval = |v: f64| -> Result<(f64, Vec<usize>)> {
                if let Some(t) = work.params.get_mut(&name) {
                    t.data_mut()[i] = v;
                }
                forward(&work)
            };
            let mut smooth = true;
            let mut central = |h: f64| -> Result<f64> {
                let (plus, p_pattern) = eval(original + h)?;
                let (minus, m_pattern) = eval(original - h)?;
                smooth &= p_pattern == base_pattern && m_pattern == base_pattern;
                Ok((plus - minus) / (2.0 * h))
            };
            let wide = central(epsilon)?;
            let narrow = central(epsilon / 2.0)?;
            if let Some(t) = work.params.get_mut(&name) {
                t.data_mut()[i] = original;
            }
            if !smooth {
                report.coordinates_skipped += 1;
                continue;
            }
            let numeric = (4.0 * narrow - wide) / 3.0;
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric));
            report.coordinates_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name, worst);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    /// Ancestral sampling with the given seed.
    Sample(u64),
    /// Beam search of the given width.
    Beam(usize),
}

impl FromStr for DecodeMode {
    type Err = DecodeError;

    /// `greedy`, `sample:SEED` or `beam:WIDTH`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            DecodeError::Contract(format!(
                "invalid decode mode {s:?}; expected greedy, sample:SEED or beam:WIDTH"
            ))
        };
        match s.split_once(':') {
            None if s == "greedy" => Ok(DecodeMode::Greedy),
            Some(("sample", seed)) => seed.parse().map(DecodeMode::Sample).map_err(|_| bad()),
            Some(("beam", w)) => match w.parse() {
                Ok(w) if w > 0 => Ok(DecodeMode::Beam(w)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Greedy => write!(f, "greedy"),
            DecodeMode::Sample(s) => write!(f, "sample:{s}"),
            DecodeMode::Beam(w) => write!(f, "beam:{w}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T: Scalar> {
    pub token: usize,
    /// Latent state after this step's update (and any deactivation).
    pub state: Tensor<T>,
    pub cell: Option<Tensor<T>>,
    pub pooled: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Per-step record of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace<T: Scalar> {
    pub steps: Vec<TraceStep<T>>,
    pub visual: Tensor<T>,
    pub termination: Termination,
}

impl<T: Scalar> DecodeTrace<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T: Scalar> {
    /// Emitted word ids without the final `<eos>`.
    pub tokens: Vec<usize>,
    pub trace: DecodeTrace<T>,
}

/// State tensors outside of a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StateValue<T: Scalar> {
    pub h: Tensor<T>,
    pub cell: Option<Tensor<T>>,
}

impl<T: Scalar> StateValue<T> {
    pub fn zeros(config: &CellConfig) -> Self {
        let dims = config.state.dims();
        Self {
            h: Tensor::zeros(&dims),
            cell: config.kind.has_cell_state().then(|| Tensor::zeros(&dims)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: CellState,
    pub pooled: Var,
    pub logits: Var,
}

/// A tape bound to one model and one visual feature. Word embeddings and the
/// step-invariant visual terms are computed once per session.
pub struct Session<'m, T: Scalar> {
    model: &'m DecoderModel<T>,
    cell: Cell<'m, T>,
    tape: Tape<'m, T>,
    visual: VisualTerms,
    embeddings: HashMap<usize, Var>,
}

impl<'m, T: Scalar> Session<'m, T> {
    fn new(model: &'m DecoderModel<T>, visual: &Tensor<T>) -> Result<Self> {
        let (cv, hv, wv) = model.config.visual;
        if visual.shape() != [cv, hv, wv] {
            return Err(DecodeError::Contract(format!(
                "visual feature has shape {:?}, model expects {:?}",
                visual.shape(),
                [cv, hv, wv]
            )));
        }
        let cell = Cell::new(&model.config.cell, &model.params);
        let mut tape = Tape::new();
        let mut v = tape.input(visual.clone());
        match model.config.cell.state {
            Shape::Map(c, h, w) => {
                if (hv, wv) != (h, w) {
                    v = tape.bicubic(v, Arc::new(BicubicPlan::new((hv, wv), (h, w))?))?;
                }
                if cv != c {
                    let k = tape.param("visual.proj", model.params.require("visual.proj")?);
                    let b = tape.param(
                        "visual.proj.bias",
                        model.params.require("visual.proj.bias")?,
                    );
                    v = tape.conv2d(v, k, b, 1)?;
                }
            }
            Shape::Vector(_) => {
                v = match model.config.cell.visual_input {
                    VisualInput::Flatten => tape.reshape(v, &[cv * hv * wv])?,
                    VisualInput::Pool => tape.mean_pool(v)?,
                };
            }
        }
        let visual = cell.prepare_visual(&mut tape, v)?;
        Ok(Self {
            model,
            cell,
            tape,
            visual,
            embeddings: HashMap::new(),
        })
    }

    pub fn tape(&self) -> &Tape<'m, T> {
        &self.tape
    }

    pub fn into_tape(self) -> Tape<'m, T> {
        self.tape
    }

    pub fn initial_state(&mut self) -> CellState {
        self.cell.initial_state(&mut self.tape)
    }

    pub fn state_from(&mut self, value: &StateValue<T>) -> CellState {
        CellState {
            h: self.tape.input(value.h.clone()),
            cell: value.cell.as_ref().map(|c| self.tape.input(c.clone())),
        }
    }

    pub fn state_value(&self, state: CellState) -> StateValue<T> {
        StateValue {
            h: self.tape.value(state.h).clone(),
            cell: state.cell.map(|c| self.tape.value(c).clone()),
        }
    }

    /// Uses `value` as the embedding of `word` in this session, as a tracked
    /// leaf whose gradient can be read back after a backward pass.
    pub fn provide_embedding(&mut self, word: usize, value: Tensor<T>) -> Var {
        let v = self.tape.variable(value);
        self.embeddings.insert(word, v);
        v
    }

    pub fn embedding(&mut self, word: usize) -> Result<Var> {
        if let Some(&v) = self.embeddings.get(&word) {
            return Ok(v);
        }
        let v = self.cell.embed(&mut self.tape, word)?;
        self.embeddings.insert(word, v);
        Ok(v)
    }

    pub fn step(
        &mut self,
        state: CellState,
        prev: usize,
        intervention: Option<Intervention>,
    ) -> Result<StepOutput> {
        let vocab = self.model.config.vocab_size;
        if prev >= vocab {
            return Err(DecodeError::Vocabulary(format!(
                "token {prev} out of range for vocabulary of {vocab}"
            )));
        }
        let x = self.embedding(prev)?;
        let mut next = self.cell.step(&mut self.tape, state, x, &self.visual)?;
        let is_2d = self.model.is_2d();
        if let Some(Intervention::Deactivate(c)) = intervention {
            if !is_2d {
                return Err(DecodeError::Unsupported(
                    "channel deactivation needs a 2D state".into(),
                ));
            }
            let channels = self.model.config.cell.state.channels();
            if c >= channels {
                return Err(DecodeError::Unsupported(format!(
                    "channel {c} out of range for {channels} channels"
                )));
            }
            next.h = self.tape.zero_channel(next.h, c)?;
        }
        let pooled = match (is_2d, intervention) {
            (true, Some(Intervention::Region(r))) => self.tape.region_pool(next.h, r)?,
            (true, _) => match self.model.config.pooling {
                Pooling::Mean => self.tape.mean_pool(next.h)?,
                Pooling::Max => self.tape.max_pool(next.h)?,
            },
            (false, Some(Intervention::Region(_))) => {
                return Err(DecodeError::Unsupported(
                    "region pooling needs a 2D state".into(),
                ));
            }
            (false, _) => next.h,
        };
        let w = self
            .tape
            .param("out.weight", self.model.params.require("out.weight")?);
        let b = self
            .tape
            .param("out.bias", self.model.params.require("out.bias")?);
        let logits = self.tape.linear(w, pooled, b)?;
        Ok(StepOutput {
            state: next,
            pooled,
            logits,
        })
    }

    /// Summed negative log-likelihood of `tokens` under teacher forcing.
    pub fn sequence_nll(
        &mut self,
        tokens: &[usize],
        intervention: Option<Intervention>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(DecodeError::Contract(
                "caption must contain at least one token".into(),
            ));
        }
        let mut state = self.initial_state();
        let mut prev = self.model.vocab.bos();
        let mut terms = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            if tok >= self.model.config.vocab_size {
                return Err(DecodeError::Vocabulary(format!("token {tok} out of range")));
            }
            let out = self.step(state, prev, intervention)?;
            terms.push(self.tape.nll(out.logits, tok)?);
            state = out.state;
            prev = tok;
        }
        Ok(self.tape.add_all(&terms)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            [
                "a red circle in the top left",
                "a blue square at the bottom right",
            ],
            1,
        )
        .unwrap()
    }

    fn small_config(kind: CellKind) -> ModelConfig {
        let state = if kind.is_2d() {
            Shape::Map(3, 4, 4)
        } else {
            Shape::Vector(6)
        };
        let mut cell = CellConfig::new(kind, state);
        if kind.is_2d() {
            cell.embedding = Shape::Map(2, 5, 5);
            cell.embed_hidden = 4;
            cell.embed_kernel = 3;
        }
        ModelConfig {
            cell,
            vocab_size: vocab().len(),
            visual: (5, 4, 4),
            pooling: Pooling::Mean,
        }
    }

    fn visual(seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(&[5, 4, 4], |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    fn model(kind: CellKind, seed: u64) -> DecoderModel<f64> {
        let mut m = DecoderModel::<f64>::new(small_config(kind), vocab(), seed).unwrap();
        // larger than default init so decisions are not near-uniform
        for (_, t) in m.params_mut().iter_mut() {
            for v in t.data_mut() {
                *v *= 3.0;
            }
        }
        m
    }

    #[test]
    fn gradient_check_agrees_and_covers_every_tensor() {
        for kind in [CellKind::Gru1d, CellKind::Lstm2d] {
            let m = DecoderModel::<f64>::new(small_config(kind), vocab(), 2).unwrap();
            let eos = m.vocab().eos();
            let rep = gradient_check(&m, &visual(4), &[0, 3, eos], 2e-3, 4, 1).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{kind}: {}", rep.max_rel_error);
            assert_eq!(rep.per_param.len(), m.params().len());
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        for kind in CellKind::ALL {
            let m = DecoderModel::<f64>::zeros(small_config(kind), vocab()).unwrap();
            let n = m.vocab().len();
            let (_, p) = m
                .decode_step(&StateValue::zeros(&m.config().cell), 0, &visual(1), None)
                .unwrap();
            assert!(p.data().iter().all(|&q| (q - 1.0 / n as f64).abs() < 1e-15));
            let g = m.generate(&visual(1), DecodeMode::Greedy, 5).unwrap();
            assert_eq!(g.tokens, vec![0; 5]);
            assert_eq!(g.trace.termination, Termination::MaxLength);
            let ll = m.log_likelihood(&visual(1), &[3, 1, 4]).unwrap();
            assert!((ll - 3.0 * (1.0 / n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn full_region_is_a_no_op() {
        for kind in [CellKind::Rnn2d, CellKind::Gru2d, CellKind::Lstm2d] {
            let m = model(kind, 3);
            let s0 = StateValue::zeros(&m.config().cell);
            let (s1, plain) = m.decode_step(&s0, 2, &visual(2), None).unwrap();
            let (s1r, full) = m
                .decode_step(
                    &s0,
                    2,
                    &visual(2),
                    Some(Intervention::Region(Region::full(4, 4))),
                )
                .unwrap();
            assert_eq!(plain, full);
            assert_eq!(s1, s1r);
            let a = m.generate(&visual(2), DecodeMode::Greedy, 10).unwrap();
            let b = m
                .generate_with_region(&visual(2), Region::full(4, 4), 10)
                .unwrap();
            assert_eq!(a, b);
            let tiny = m
                .generate_with_region(&visual(2), Region::new(2, 3, 2, 3), 10)
                .unwrap();
            assert!(tiny.tokens.iter().all(|&t| t < m.vocab().len()));
        }
    }

    #[test]
    fn deactivation() {
        let mut m = model(CellKind::Rnn2d, 4);
        // channel 1 dead: its kernels and biases are zero and relu keeps it at zero
        for gate_term in ["cell.h.h", "cell.h.x", "cell.h.v"] {
            let k = m.params_mut().get_mut(gate_term).unwrap();
            let per = k.len() / 3;
            k.data_mut()[per..2 * per].fill(0.0);
            m.params_mut()
                .get_mut(&format!("{gate_term}.bias"))
                .unwrap()
                .data_mut()[1] = 0.0;
        }
        let v = visual(5);
        let plain = m.generate(&v, DecodeMode::Greedy, 10).unwrap();
        let dead = m.generate_with_channel_deactivated(&v, 1, 10).unwrap();
        assert_eq!(plain.tokens, dead.tokens);
        let off = m.generate_with_channel_deactivated(&v, 0, 10).unwrap();
        for step in &off.trace.steps {
            assert_eq!(step.pooled.data()[0], 0.0);
            assert!(step
                .state
                .channel(0)
                .unwrap()
                .data()
                .iter()
                .all(|&x| x == 0.0));
        }
        assert!(matches!(
            m.generate_with_channel_deactivated(&v, 3, 10),
            Err(DecodeError::Unsupported(_))
        ));
        let one_d = model(CellKind::Lstm1d, 4);
        let v1 = visual(5);
        assert!(matches!(
            one_d.generate_with_channel_deactivated(&v1, 0, 10),
            Err(DecodeError::Unsupported(_))
        ));
        assert!(matches!(
            one_d.generate_with_region(&v1, Region::full(1, 1), 10),
            Err(DecodeError::Unsupported(_))
        ));
    }

    #[test]
    fn trace_invariants_and_determinism() {
        for kind in CellKind::ALL {
            let m = model(kind, 6);
            let g = m.generate(&visual(7), DecodeMode::Greedy, 18).unwrap();
            assert!(g.trace.len() <= 18);
            match g.trace.termination {
                Termination::Eos => {
                    assert_eq!(g.trace.steps.last().unwrap().token, m.vocab().eos())
                }
                Termination::MaxLength => assert_eq!(g.trace.len(), 18),
            }
            assert_eq!(g.trace.len(), g.trace.tokens().count());
            assert_eq!(g, m.generate(&visual(7), DecodeMode::Greedy, 18).unwrap());
            let s1 = m.generate(&visual(7), DecodeMode::Sample(9), 18).unwrap();
            let s2 = m.generate(&visual(7), DecodeMode::Sample(9), 18).unwrap();
            assert_eq!(s1, s2);
            let beam1 = m.generate(&visual(7), DecodeMode::Beam(1), 18).unwrap();
            assert_eq!(beam1, g);
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        for kind in [CellKind::Gru1d, CellKind::Rnn2d] {
            let m = model(kind, 8);
            let v = visual(9);
            let score = |g: &Generation<f64>| {
                let mut toks = g.tokens.clone();
                if g.trace.termination == Termination::Eos {
                    toks.push(m.vocab().eos());
                }
                m.log_likelihood(&v, &toks).unwrap()
            };
            let greedy = m.generate(&v, DecodeMode::Greedy, 6).unwrap();
            let beam = m.generate(&v, DecodeMode::Beam(4), 6).unwrap();
            assert!(score(&beam) >= score(&greedy) - 1e-9);
        }
    }

    #[test]
    fn log_likelihood_matches_independent_loop() {
        for kind in CellKind::ALL {
            let m = model(kind, 10);
            let v = visual(11);
            let tokens = [0usize, 5, 2, 7, m.vocab().eos()];
            let mut state = StateValue::zeros(&m.config().cell);
            let mut prev = m.vocab().bos();
            let mut expect = 0.0;
            for &t in &tokens {
                let (next, p) = m.decode_step(&state, prev, &v, None).unwrap();
                expect += p.data()[t].ln();
                state = next;
                prev = t;
            }
            let got = m.log_likelihood(&v, &tokens).unwrap();
            assert!((got - expect).abs() < 1e-10, "{kind}: {got} vs {expect}");
            assert!(matches!(
                m.log_likelihood(&v, &[]),
                Err(DecodeError::Contract(_))
            ));
            assert!(m.log_likelihood(&v, &[m.vocab().len()]).is_err());
        }
    }

    #[test]
    fn greedy_is_stepwise_argmax() {
        let m = model(CellKind::Gru2d, 12);
        let v = visual(13);
        let g = m.generate(&v, DecodeMode::Greedy, 8).unwrap();
        let mut state = StateValue::zeros(&m.config().cell);
        let mut prev = m.vocab().bos();
        for step in &g.trace.steps {
            let (next, p) = m.decode_step(&state, prev, &v, None).unwrap();
            let chosen = p.data()[step.token];
            assert!(p.data().iter().all(|&q| q <= chosen));
            state = next;
            prev = step.token;
        }
    }

    #[test]
    fn vocabulary_and_shape_errors() {
        let m = model(CellKind::Rnn2d, 14);
        let s0 = StateValue::zeros(&m.config().cell);
        assert!(matches!(
            m.decode_step(&s0, m.vocab().len(), &visual(1), None),
            Err(DecodeError::Vocabulary(_))
        ));
        assert!(m
            .decode_step(&s0, 0, &Tensor::zeros(&[5, 4, 3]), None)
            .is_err());
        let mut cfg = small_config(CellKind::Rnn2d);
        cfg.vocab_size += 1;
        assert!(matches!(
            DecoderModel::<f32>::new(cfg, vocab(), 0),
            Err(DecodeError::Vocabulary(_))
        ));
    }

    #[test]
    fn same_seed_same_params() {
        for kind in CellKind::ALL {
            let a = DecoderModel::<f32>::new(small_config(kind), vocab(), 42).unwrap();
            let b = DecoderModel::<f32>::new(small_config(kind), vocab(), 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn decode_mode_parsing() {
        assert_eq!("greedy".parse::<DecodeMode>().unwrap(), DecodeMode::Greedy);
        assert_eq!("beam:3".parse::<DecodeMode>().unwrap(), DecodeMode::Beam(3));
        assert_eq!(
            "sample:7".parse::<DecodeMode>().unwrap(),
            DecodeMode::Sample(7)
        );
        for bad in ["beam:0", "beam", "sample:x", "nucleus:3"] {
            assert!(bad.parse::<DecodeMode>().is_err());
        }
    }

    #[test]
    fn visual_of_other_extent_is_resized() {
        let mut cfg = small_config(CellKind::Rnn2d);
        cfg.visual = (5, 7, 7);
        let m = DecoderModel::<f64>::new(cfg, vocab(), 1).unwrap();
        let v = Tensor::full(&[5, 7, 7], 0.5);
        assert!(m.generate(&v, DecodeMode::Greedy, 3).is_ok());
    }
}
