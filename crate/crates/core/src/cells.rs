//! Recurrent cell updates with vector states (RNN/GRU/LSTM-1DS) and with
//! `C×H×W` map states updated by same-padded convolution (RNN/GRU/LSTM-2DS),
//! plus the word-embedding paths that feed them.
//!
//! Parameter naming: each gate `g` owns a state term `cell.g.h`, a word term
//! `cell.g.x` and a visual term `cell.g.v`, each with its own `.bias`. Gates
//! are `h` (RNN), `r`/`z`/`h` (GRU, `h` is the candidate) and `i`/`f`/`o`/`g`
//! (LSTM, `g` is the candidate).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamSet, Tape, Var};
use crate::tensor::{BicubicPlan, Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("invalid cell configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl From<TensorError> for CellError {
    fn from(e: TensorError) -> Self {
        CellError::Autodiff(e.into())
    }
}

pub type Result<T, E = CellError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    #[serde(rename = "rnn1ds")]
    Rnn1d,
    #[serde(rename = "gru1ds")]
    Gru1d,
    #[serde(rename = "lstm1ds")]
    Lstm1d,
    #[serde(rename = "rnn2ds")]
    Rnn2d,
    #[serde(rename = "gru2ds")]
    Gru2d,
    #[serde(rename = "lstm2ds")]
    Lstm2d,
}

impl CellKind {
    pub const ALL: [CellKind; 6] = [
        CellKind::Rnn1d,
        CellKind::Gru1d,
        CellKind::Lstm1d,
        CellKind::Rnn2d,
        CellKind::Gru2d,
        CellKind::Lstm2d,
    ];

    pub fn is_2d(self) -> bool {
        matches!(self, CellKind::Rnn2d | CellKind::Gru2d | CellKind::Lstm2d)
    }

    pub fn has_cell_state(self) -> bool {
        matches!(self, CellKind::Lstm1d | CellKind::Lstm2d)
    }

    pub fn gates(self) -> &'static [&'static str] {
        match self {
            CellKind::Rnn1d | CellKind::Rnn2d => &["h"],
            CellKind::Gru1d | CellKind::Gru2d => &["r", "z", "h"],
            CellKind::Lstm1d | CellKind::Lstm2d => &["i", "f", "o", "g"],
        }
    }

    /// Short lowercase name used on the command line.
    pub fn slug(self) -> &'static str {
        match self {
            CellKind::Rnn1d => "rnn1ds",
            CellKind::Gru1d => "gru1ds",
            CellKind::Lstm1d => "lstm1ds",
            CellKind::Rnn2d => "rnn2ds",
            CellKind::Gru2d => "gru2ds",
            CellKind::Lstm2d => "lstm2ds",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CellKind::Rnn1d => "RNN-1DS",
            CellKind::Gru1d => "GRU-1DS",
            CellKind::Lstm1d => "LSTM-1DS",
            CellKind::Rnn2d => "RNN-2DS",
            CellKind::Gru2d => "GRU-2DS",
            CellKind::Lstm2d => "LSTM-2DS",
        };
        f.write_str(s)
    }
}

impl FromStr for CellKind {
    type Err = CellError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        CellKind::ALL
            .into_iter()
            .find(|k| k.slug() == norm)
            .ok_or_else(|| CellError::Config(format!("unknown cell kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = CellError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(CellError::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Extent of a latent state or an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Vector(usize),
    Map(usize, usize, usize),
}

impl Shape {
    pub fn dims(self) -> Vec<usize> {
        match self {
            Shape::Vector(l) => vec![l],
            Shape::Map(c, h, w) => vec![c, h, w],
        }
    }

    pub fn numel(self) -> usize {
        self.dims().iter().product()
    }

    /// Leading extent: `L` for vectors, `C` for maps.
    pub fn channels(self) -> usize {
        match self {
            Shape::Vector(l) => l,
            Shape::Map(c, _, _) => c,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Vector(l) => write!(f, "{l}"),
            Shape::Map(c, h, w) => write!(f, "{c}x{h}x{w}"),
        }
    }
}

impl FromStr for Shape {
    type Err = CellError;

    /// `L` or `CxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X', '×', ',']).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CellError::Config(format!("invalid shape {s:?}")))?;
        let shape = match nums.as_slice() {
            [l] => Shape::Vector(*l),
            [c, h, w] => Shape::Map(*c, *h, *w),
            _ => return Err(CellError::Config(format!("shape {s:?} must be L or CxHxW"))),
        };
        if shape.dims().contains(&0) {
            return Err(CellError::Config(format!("shape {s:?} has a zero extent")));
        }
        Ok(shape)
    }
}

/// How a vector-state cell receives the `C_v×H×W` visual feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualInput {
    /// Row-major flattening; keeps positional information available.
    Flatten,
    /// Spatial mean; a global descriptor.
    #[default]
    Pool,
}

impl FromStr for VisualInput {
    type Err = CellError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flatten" => Ok(VisualInput::Flatten),
            "pool" => Ok(VisualInput::Pool),
            _ => Err(CellError::Config(format!("unknown visual input {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub kind: CellKind,
    pub state: Shape,
    /// `(k_h, k_w)` of the state, word and visual kernels (2D kinds only).
    pub kernel: (usize, usize),
    pub activation: Activation,
    /// Raw lookup-table entry: `C_x×H_x×W_x` for 2D kinds, `L_x` for 1D.
    pub embedding: Shape,
    /// Channels between the two embedding convolutions (2D kinds only).
    pub embed_hidden: usize,
    /// Square kernel extent of the embedding convolutions (2D kinds only).
    pub embed_kernel: usize,
    #[serde(default)]
    pub visual_input: VisualInput,
}

impl CellConfig {
    /// Defaults for a given kind and state: 3×3 kernels, relu for 2D and tanh
    /// for 1D, a `4×15×15` raw embedding for 2D and `L_x = L` for 1D.
    pub fn new(kind: CellKind, state: Shape) -> Self {
        let (activation, embedding) = if kind.is_2d() {
            (Activation::Relu, Shape::Map(4, 15, 15))
        } else {
            (Activation::Tanh, Shape::Vector(state.channels()))
        };
        Self {
            kind,
            state,
            kernel: (3, 3),
            activation,
            embedding,
            embed_hidden: 32,
            embed_kernel: 5,
            visual_input: VisualInput::Pool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CellError::Config(m));
        match (self.kind.is_2d(), self.state, self.embedding) {
            (true, Shape::Map(..), Shape::Map(..))
            | (false, Shape::Vector(_), Shape::Vector(_)) => {}
            _ => {
                return bad(format!(
                    "{} needs matching state/embedding ranks, got {} / {}",
                    self.kind, self.state, self.embedding
                ))
            }
        }
        if self.state.dims().contains(&0) || self.embedding.dims().contains(&0) {
            return bad("state and embedding extents must be positive".into());
        }
        if self.kind.is_2d() {
            let (kh, kw) = self.kernel;
            if kh % 2 == 0 || kw % 2 == 0 || self.embed_kernel % 2 == 0 {
                return bad(format!(
                    "kernel extents must be odd, got {kh}x{kw} and {}",
                    self.embed_kernel
                ));
            }
            if self.embed_hidden == 0 {
                return bad("embedding hidden channels must be positive".into());
            }
        }
        Ok(())
    }

    /// Length of the visual input a 1D cell sees for a `C_v×H×W` feature.
    pub fn visual_len(&self, visual: (usize, usize, usize)) -> usize {
        match self.visual_input {
            VisualInput::Flatten => visual.0 * visual.1 * visual.2,
            VisualInput::Pool => visual.0,
        }
    }
}

/// Name, shape and initialization fan-in of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `None` for biases, which start at zero.
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            name,
            shape,
            fan_in: Some(fan_in),
        }
    }

    fn bias(name: String, len: usize) -> Self {
        Self {
            name,
            shape: vec![len],
            fan_in: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Component label used in itemized parameter counts.
    pub fn component(&self) -> &'static str {
        let n = self.name.as_str();
        if n == "embed.table" {
            "embedding table"
        } else if n.starts_with("embed.") {
            "embedding convolutions"
        } else if n.starts_with("visual.") {
            "visual projection"
        } else if n.starts_with("cell.") {
            if n.ends_with(".bias") {
                "cell biases"
            } else {
                "cell weights"
            }
        } else {
            "output projection"
        }
    }
}

/// Every parameter tensor of a decoder, in initialization order.
pub fn param_specs(
    config: &CellConfig,
    vocab_size: usize,
    visual: (usize, usize, usize),
) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let (c_v, _, _) = visual;
    let channels = config.state.channels();
    match (config.state, config.embedding) {
        (Shape::Map(c, _, _), Shape::Map(cx, hx, wx)) => {
            let k = config.embed_kernel;
            let hid = config.embed_hidden;
            specs.push(ParamSpec::weight(
                "embed.table".into(),
                vec![vocab_size, cx, hx, wx],
                1,
            ));
            specs.push(ParamSpec::weight(
                "embed.conv1".into(),
                vec![hid, cx, k, k],
                cx * k * k,
            ));
            specs.push(ParamSpec::bias("embed.conv1.bias".into(), hid));
            specs.push(ParamSpec::weight(
                "embed.conv2".into(),
                vec![c, hid, k, k],
                hid * k * k,
            ));
            specs.push(ParamSpec::bias("embed.conv2.bias".into(), c));
            if c_v != c {
                specs.push(ParamSpec::weight(
                    "visual.proj".into(),
                    vec![c, c_v, 1, 1],
                    c_v,
                ));
                specs.push(ParamSpec::bias("visual.proj.bias".into(), c));
            }
            let (kh, kw) = config.kernel;
            for gate in config.kind.gates() {
                for term in ["h", "x", "v"] {
                    let name = format!("cell.{gate}.{term}");
                    specs.push(ParamSpec::weight(
                        name.clone(),
                        vec![c, c, kh, kw],
                        c * kh * kw,
                    ));
                    specs.push(ParamSpec::bias(format!("{name}.bias"), c));
                }
            }
        }
        (Shape::Vector(l), Shape::Vector(lx)) => {
            let lv = config.visual_len(visual);
            specs.push(ParamSpec::weight(
                "embed.table".into(),
                vec![vocab_size, lx],
                1,
            ));
            for gate in config.kind.gates() {
                for (term, n) in [("h", l), ("x", lx), ("v", lv)] {
                    let name = format!("cell.{gate}.{term}");
                    specs.push(ParamSpec::weight(name.clone(), vec![l, n], n));
                    specs.push(ParamSpec::bias(format!("{name}.bias"), l));
                }
            }
        }
        _ => {}
    }
    specs.push(ParamSpec::weight(
        "out.weight".into(),
        vec![vocab_size, channels],
        channels,
    ));
    specs.push(ParamSpec::bias("out.bias".into(), vocab_size));
    specs
}

/// Uniform `(−s, s)` initialization with `s = sqrt(1/fan_in)`; biases zero.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for spec in specs {
        let tensor = match spec.fan_in {
            Some(fan_in) => {
                let s = (1.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| T::from_f64(rng.random_range(-s..s)))
            }
            None => Tensor::zeros(&spec.shape),
        };
        params.insert(spec.name.clone(), tensor);
    }
    params
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    /// `(component, scalar count)` in first-appearance order.
    pub items: Vec<(String, usize)>,
    pub total: usize,
}

impl fmt::Display for ParameterCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.items {
            writeln!(f, "{name:>24}: {n}")?;
        }
        write!(f, "{:>24}: {}", "total", self.total)
    }
}

/// Exact itemized count of trainable scalars for a decoder.
pub fn count_parameters(
    config: &CellConfig,
    vocab_size: usize,
    visual: (usize, usize, usize),
) -> ParameterCount {
    let mut items: Vec<(String, usize)> = Vec::new();
    for spec in param_specs(config, vocab_size, visual) {
        let label = spec.component();
        match items.iter_mut().find(|(n, _)| n == label) {
            Some((_, n)) => *n += spec.numel(),
            None => items.push((label.to_string(), spec.numel())),
        }
    }
    let total = items.iter().map(|(_, n)| n).sum();
    ParameterCount { items, total }
}

/// Largest vector width tried by [`match_vector_config`].
pub const MAX_MATCH_WIDTH: usize = 1 << 14;

/// A vector-state configuration of `kind` whose parameter count is within
/// `tolerance` (relative) of `target`. Widths `L` are scanned upward; for
/// each, the embedding length `L_x` is solved from the count being affine
/// in it. Among feasible pairs the one with `L_x` closest to `L` wins,
/// then the smaller `L`.
pub fn match_vector_config(
    kind: CellKind,
    target: usize,
    vocab_size: usize,
    visual: (usize, usize, usize),
    visual_input: VisualInput,
    tolerance: f64,
) -> Result<CellConfig> {
    if kind.is_2d() {
        return Err(CellError::Config(format!("{kind} is not a vector-state cell")));
    }
    let count = |l: usize, lx: usize| {
        let mut cfg = CellConfig::new(kind, Shape::Vector(l));
        cfg.embedding = Shape::Vector(lx);
        cfg.visual_input = visual_input;
        count_parameters(&cfg, vocab_size, visual).total
    };
    let target_f = target as f64;
    let mut best: Option<(usize, usize, usize)> = None;
    for l in 1..=MAX_MATCH_WIDTH {
        let base = count(l, 1);
        if base as f64 > target_f * (1.0 + tolerance) {
            break;
        }
        let slope = (count(l, 2) - base) as f64;
        let ideal = 1.0 + (target_f - base as f64) / slope;
        for lx in [ideal.floor(), ideal.ceil()] {
            if lx < 1.0 {
                continue;
            }
            let lx = lx as usize;
            let n = count(l, lx);
            if (n as f64 - target_f).abs() > tolerance * target_f {
                continue;
            }
            let gap = l.abs_diff(lx);
            if best.is_none_or(|(bl, blx, _)| gap < bl.abs_diff(blx)) {
                best = Some((l, lx, n));
            }
        }
    }
    let (l, lx, _) = best.ok_or_else(|| {
        CellError::Config(format!(
            "no {kind} width within {:.2}% of {target} parameters",
            tolerance * 100.0
        ))
    })?;
    let mut cfg = CellConfig::new(kind, Shape::Vector(l));
    cfg.embedding = Shape::Vector(lx);
    cfg.visual_input = visual_input;
    Ok(cfg)
}

/// Recurrent state handles on a tape; `cell` is present for LSTM kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub cell: Option<Var>,
}

/// Step-invariant visual contributions, one per gate.
#[derive(Debug, Clone)]
pub struct VisualTerms {
    per_gate: Vec<Var>,
}

/// A cell configuration bound to its parameters.
#[derive(Debug, Clone, Copy)]
pub struct Cell<'p, T: Scalar> {
    config: &'p CellConfig,
    params: &'p ParamSet<T>,
}

impl<'p, T: Scalar> Cell<'p, T> {
    pub fn new(config: &'p CellConfig, params: &'p ParamSet<T>) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &CellConfig {
        self.config
    }

    /// `W·input + b` for 1D kinds, `K ∗ input + b` for 2D kinds.
    fn term(&self, tape: &mut Tape<'p, T>, name: &str, input: Var) -> Result<Var> {
        let w = tape.param(name, self.params.require(name)?);
        let b = tape.param(
            &format!("{name}.bias"),
            self.params.require(&format!("{name}.bias"))?,
        );
        Ok(if self.config.kind.is_2d() {
            tape.conv2d(input, w, b, 1)?
        } else {
            tape.linear(w, input, b)?
        })
    }

    fn activate(&self, tape: &mut Tape<'p, T>, v: Var) -> Var {
        match self.config.activation {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
        }
    }

    fn check_shape(&self, tape: &Tape<'p, T>, v: Var, want: &[usize], what: &str) -> Result<()> {
        if tape.value(v).shape() != want {
            return Err(CellError::Config(format!(
                "{what} has shape {:?}, {} expects {want:?}",
                tape.value(v).shape(),
                self.config.kind
            )));
        }
        Ok(())
    }

    /// Zero initial state.
    pub fn initial_state(&self, tape: &mut Tape<'p, T>) -> CellState {
        let dims = self.config.state.dims();
        let h = tape.input(Tensor::zeros(&dims));
        let cell = self
            .config
            .kind
            .has_cell_state()
            .then(|| tape.input(Tensor::zeros(&dims)));
        CellState { h, cell }
    }

    /// Precomputes `K_{g,v} ∗ V + b` (or `W_{g,v} v + b`) for every gate.
    pub fn prepare_visual(&self, tape: &mut Tape<'p, T>, visual: Var) -> Result<VisualTerms> {
        if self.config.kind.is_2d() {
            self.check_shape(tape, visual, &self.config.state.dims(), "visual input")?;
        }
        let per_gate = self
            .config
            .kind
            .gates()
            .iter()
            .map(|g| self.term(tape, &format!("cell.{g}.v"), visual))
            .collect::<Result<_>>()?;
        Ok(VisualTerms { per_gate })
    }

    fn pre_activation(
        &self,
        tape: &mut Tape<'p, T>,
        gate_index: usize,
        h: Var,
        x: Var,
        visual: &VisualTerms,
    ) -> Result<Var> {
        let gate = self.config.kind.gates()[gate_index];
        let hh = self.term(tape, &format!("cell.{gate}.h"), h)?;
        let xx = self.term(tape, &format!("cell.{gate}.x"), x)?;
        Ok(tape.add_all(&[hh, xx, visual.per_gate[gate_index]])?)
    }

    /// One state transition given the embedded previous word `x`.
    pub fn step(
        &self,
        tape: &mut Tape<'p, T>,
        state: CellState,
        x: Var,
        visual: &VisualTerms,
    ) -> Result<CellState> {
        let dims = self.config.state.dims();
        self.check_shape(tape, state.h, &dims, "state")?;
        if self.config.kind.is_2d() {
            self.check_shape(tape, x, &dims, "word embedding")?;
        }
        match self.config.kind {
            CellKind::Rnn1d | CellKind::Rnn2d => {
                let pre = self.pre_activation(tape, 0, state.h, x, visual)?;
                Ok(CellState {
                    h: self.activate(tape, pre),
                    cell: None,
                })
            }
            CellKind::Gru1d | CellKind::Gru2d => {
                let r_pre = self.pre_activation(tape, 0, state.h, x, visual)?;
                let r = tape.sigmoid(r_pre);
                let z_pre = self.pre_activation(tape, 1, state.h, x, visual)?;
                let z = tape.sigmoid(z_pre);
                let hh = self.term(tape, "cell.h.h", state.h)?;
                let gated = tape.mul(r, hh)?;
                let hx = self.term(tape, "cell.h.x", x)?;
                let cand_pre = tape.add_all(&[gated, hx, visual.per_gate[2]])?;
                let cand = self.activate(tape, cand_pre);
                let keep = tape.mul(z, state.h)?;
                let one_minus_z = tape.one_minus(z);
                let update = tape.mul(one_minus_z, cand)?;
                Ok(CellState {
                    h: tape.add(keep, update)?,
                    cell: None,
                })
            }
            CellKind::Lstm1d | CellKind::Lstm2d => {
                let c_prev = state
                    .cell
                    .ok_or_else(|| CellError::Config("LSTM step needs a cell state".into()))?;
                self.check_shape(tape, c_prev, &dims, "cell state")?;
                let mut gates = [state.h; 3];
                for (slot, gi) in gates.iter_mut().zip(0..3) {
                    let pre = self.pre_activation(tape, gi, state.h, x, visual)?;
                    *slot = tape.sigmoid(pre);
                }
                let [i, f, o] = gates;
                let g_pre = self.pre_activation(tape, 3, state.h, x, visual)?;
                let g = self.activate(tape, g_pre);
                let keep = tape.mul(f, c_prev)?;
                let write = tape.mul(i, g)?;
                let cell = tape.add(keep, write)?;
                let squashed = tape.tanh(cell);
                let h = tape.mul(o, squashed)?;
                Ok(CellState {
                    h,
                    cell: Some(cell),
                })
            }
        }
    }

    /// Embedding of one word: a table row for 1D kinds; for 2D kinds the
    /// raw `C_x×H_x×W_x` entry passes through two same-padded relu
    /// convolutions and a per-channel bicubic resize to the state extent.
    pub fn embed(&self, tape: &mut Tape<'p, T>, word: usize) -> Result<Var> {
        let table_t = self.params.require("embed.table")?;
        let vocab = table_t.shape()[0];
        if word >= vocab {
            return Err(TensorError::Index(format!(
                "word id {word} out of range for vocabulary of {vocab}"
            ))
            .into());
        }
        let table = tape.param("embed.table", table_t);
        let raw = tape.gather(table, word)?;
        let (Shape::Map(_, h, w), Shape::Map(_, hx, wx)) =
            (self.config.state, self.config.embedding)
        else {
            return Ok(raw);
        };
        let mut x = raw;
        for layer in ["embed.conv1", "embed.conv2"] {
            let k = tape.param(layer, self.params.require(layer)?);
            let b = tape.param(
                &format!("{layer}.bias"),
                self.params.require(&format!("{layer}.bias"))?,
            );
            let c = tape.conv2d(x, k, b, 1)?;
            x = tape.relu(c);
        }
        if (hx, wx) != (h, w) {
            let plan = Arc::new(BicubicPlan::new((hx, wx), (h, w))?);
            x = tape.bicubic(x, plan)?;
        }
        Ok(x)
    }
}

fn eager_step<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    expect: &[CellKind],
    h: &Tensor<T>,
    cell: Option<&Tensor<T>>,
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if !expect.contains(&config.kind) {
        return Err(CellError::Config(format!(
            "{} parameters passed to a {:?} step",
            config.kind, expect
        )));
    }
    let core = Cell::new(config, params);
    let mut tape = Tape::new();
    let state = CellState {
        h: tape.input(h.clone()),
        cell: cell.map(|c| tape.input(c.clone())),
    };
    let xv = tape.input(x.clone());
    let vv = tape.input(v.clone());
    let visual = core.prepare_visual(&mut tape, vv)?;
    let next = core.step(&mut tape, state, xv, &visual)?;
    Ok((
        tape.value(next.h).clone(),
        next.cell.map(|c| tape.value(c).clone()),
    ))
}

/// `act(W_h h + W_x x + W_v v + biases)` with vector state.
pub fn step_rnn_1d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    h: &Tensor<T>,
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(eager_step(config, params, &[CellKind::Rnn1d], h, None, x, v)?.0)
}

pub fn step_gru_1d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    h: &Tensor<T>,
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(eager_step(config, params, &[CellKind::Gru1d], h, None, x, v)?.0)
}

/// Returns `(h, c)`.
pub fn step_lstm_1d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    state: (&Tensor<T>, &Tensor<T>),
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, c) = eager_step(
        config,
        params,
        &[CellKind::Lstm1d],
        state.0,
        Some(state.1),
        x,
        v,
    )?;
    Ok((h, c.expect("lstm step yields a cell state")))
}

/// `relu(K_h ∗ H + K_x ∗ X + K_v ∗ V + biases)` with same padding.
pub fn step_rnn_2d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    h: &Tensor<T>,
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(eager_step(config, params, &[CellKind::Rnn2d], h, None, x, v)?.0)
}

pub fn step_gru_2d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    h: &Tensor<T>,
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(eager_step(config, params, &[CellKind::Gru2d], h, None, x, v)?.0)
}

/// Returns `(H, Cell)`.
pub fn step_lstm_2d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    state: (&Tensor<T>, &Tensor<T>),
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, c) = eager_step(
        config,
        params,
        &[CellKind::Lstm2d],
        state.0,
        Some(state.1),
        x,
        v,
    )?;
    Ok((h, c.expect("lstm step yields a cell state")))
}

/// Table row lookup for 1D kinds.
pub fn embed_word_1d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    word: usize,
) -> Result<Tensor<T>> {
    if config.kind.is_2d() {
        return Err(CellError::Config(format!(
            "{} uses 2D embeddings",
            config.kind
        )));
    }
    embed_word(config, params, word)
}

/// Lookup, two relu convolutions and bicubic resize to `C×H×W`.
pub fn embed_word_2d<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    word: usize,
) -> Result<Tensor<T>> {
    if !config.kind.is_2d() {
        return Err(CellError::Config(format!(
            "{} uses vector embeddings",
            config.kind
        )));
    }
    embed_word(config, params, word)
}

fn embed_word<T: Scalar>(
    config: &CellConfig,
    params: &ParamSet<T>,
    word: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = Cell::new(config, params).embed(&mut tape, word)?;
    Ok(tape.value(v).clone())
}
