//! Reading 2D latent states: channel activation levels, word-channel
//! association scores, activated image regions and attention correctness.
//! Steps are one-based throughout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecodeTrace;
use crate::tensor::{bicubic_resize, Scalar, Tensor};
use crate::training::Vocabulary;

/// Default fraction of the per-trace channel maximum used as threshold.
pub const DEFAULT_LAMBDA: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpretError {
    #[error("out of range: {0}")]
    Range(String),
    #[error("no generated caption contains {0:?}")]
    EmptySupport(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("invalid image: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for InterpretError {
    fn from(e: std::io::Error) -> Self {
        InterpretError::Io(e.to_string())
    }
}

pub type Result<T, E = InterpretError> = std::result::Result<T, E>;

/// η: the sum of a channel map's entries.
pub fn activation_level<T: Scalar>(map: &Tensor<T>) -> f64 {
    map.data().iter().map(|v| v.as_f64()).sum()
}

/// Per-step, per-channel activation levels of one caption, together with
/// its word ids (without the final `<eos>`).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLevels {
    /// `levels[t - 1][c]`.
    levels: Vec<Vec<f64>>,
    words: Vec<usize>,
}

impl TraceLevels {
    /// `levels` holds one row per caption word, each with one entry per channel.
    pub fn new(levels: Vec<Vec<f64>>, words: Vec<usize>) -> Result<Self> {
        if levels.len() != words.len() {
            return Err(InterpretError::Range(format!(
                "{} level rows for {} words",
                levels.len(),
                words.len()
            )));
        }
        if let Some(first) = levels.first() {
            if first.is_empty() || levels.iter().any(|r| r.len() != first.len()) {
                return Err(InterpretError::Range("every step needs the same nonzero channel count".into()));
            }
        }
        Ok(Self { levels, words })
    }

    /// Steps up to but excluding a final `<eos>`.
    pub fn from_trace<T: Scalar>(trace: &DecodeTrace<T>, eos: usize) -> Result<Self> {
        let mut levels = Vec::new();
        let mut words = Vec::new();
        for step in trace.steps.iter().take_while(|s| s.token != eos) {
            let (c, h, w) = step
                .state
                .dims3()
                .map_err(|_| InterpretError::Range("trace states are not 2D maps".into()))?;
            let d = step.state.data();
            levels.push((0..c).map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.as_f64()).sum()).collect());
            words.push(step.token);
        }
        Self::new(levels, words)
    }

    /// T_I.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn level(&self, channel: usize, step: usize) -> f64 {
        self.levels[step - 1][channel]
    }

    /// First one-based step at which `word` was emitted.
    pub fn first_step(&self, word: usize) -> Option<usize> {
        self.words.iter().position(|&w| w == word).map(|i| i + 1)
    }

    /// A_{t₁,t₂}: mean activation level of `channel` over steps `t₁..=t₂`.
    pub fn window_average(&self, channel: usize, t1: usize, t2: usize) -> Result<f64> {
        if t1 < 1 || t1 > t2 || t2 > self.len() {
            return Err(InterpretError::Range(format!(
                "window [{t1}, {t2}] is not inside 1..={}",
                self.len()
            )));
        }
        if channel >= self.channels() {
            return Err(InterpretError::Range(format!("channel {channel} of {}", self.channels())));
        }
        let sum: f64 = (t1..=t2).map(|t| self.level(channel, t)).sum();
        Ok(sum / (t2 - t1 + 1) as f64)
    }
}

/// Mean activation level of `channel` over the trace steps `t1..=t2`.
pub fn window_average<T: Scalar>(trace: &DecodeTrace<T>, channel: usize, t1: usize, t2: usize) -> Result<f64> {
    if t1 < 1 || t1 > t2 || t2 > trace.len() {
        return Err(InterpretError::Range(format!("window [{t1}, {t2}] is not inside 1..={}", trace.len())));
    }
    let mut sum = 0.0;
    for step in &trace.steps[t1 - 1..t2] {
        let map = step
            .state
            .channel(channel)
            .map_err(|e| InterpretError::Range(e.to_string()))?;
        sum += activation_level(&map);
    }
    Ok(sum / (t2 - t1 + 1) as f64)
}

/// s(w, c) for every channel: over the captions containing `word`, the mean
/// of A_{1,t} − A_{t+1,T} where t is the first step emitting `word` and T
/// the caption length. An empty after-window counts as zero.
pub fn association_score(traces: &[TraceLevels], word: usize) -> Result<Vec<f64>> {
    let support: Vec<(&TraceLevels, usize)> =
        traces.iter().filter_map(|tr| tr.first_step(word).map(|t| (tr, t))).collect();
    let Some(&(first, _)) = support.first() else {
        return Err(InterpretError::EmptySupport(format!("word id {word}")));
    };
    let channels = first.channels();
    if support.iter().any(|(tr, _)| tr.channels() != channels) {
        return Err(InterpretError::Range("traces disagree on the channel count".into()));
    }
    let mut scores = vec![0.0; channels];
    for &(tr, t) in &support {
        for (c, s) in scores.iter_mut().enumerate() {
            let before = tr.window_average(c, 1, t)?;
            let after = if t == tr.len() { 0.0 } else { tr.window_average(c, t + 1, tr.len())? };
            *s += before - after;
        }
    }
    let n = support.len() as f64;
    Ok(scores.into_iter().map(|s| s / n).collect())
}

/// Images supporting `word`: those whose caption contains it.
pub fn support_count(traces: &[TraceLevels], word: usize) -> usize {
    traces.iter().filter(|t| t.first_step(word).is_some()).count()
}

/// c* = argmax_c s(w, c), lowest channel on ties.
pub fn most_relevant_channel(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(InterpretError::Range("empty score row".into()));
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRow {
    pub scores: Vec<f64>,
    pub argmax: usize,
    pub support: usize,
}

/// Association rows keyed by word; words never generated are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssociationTable {
    pub rows: BTreeMap<String, AssociationRow>,
}

impl AssociationTable {
    /// Rows for `words`, or for every regular vocabulary word when `None`.
    /// Explicitly requested words without support are an error.
    pub fn build(traces: &[TraceLevels], vocab: &Vocabulary, words: Option<&[usize]>) -> Result<Self> {
        let explicit = words.is_some();
        let ids: Vec<usize> = match words {
            Some(w) => w.to_vec(),
            None => (0..vocab.words().len()).collect(),
        };
        let mut rows = BTreeMap::new();
        for id in ids {
            let name = vocab.token(id).unwrap_or("<unk>").to_string();
            match association_score(traces, id) {
                Ok(scores) => {
                    let argmax = most_relevant_channel(&scores)?;
                    rows.insert(name, AssociationRow { scores, argmax, support: support_count(traces, id) });
                }
                Err(InterpretError::EmptySupport(_)) if !explicit => {}
                Err(InterpretError::EmptySupport(_)) => return Err(InterpretError::EmptySupport(name)),
                Err(e) => return Err(e),
            }
        }
        Ok(Self { rows })
    }

    pub fn get(&self, word: &str) -> Option<&AssociationRow> {
        self.rows.get(word)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("association tables serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| InterpretError::Format(e.to_string()))
    }
}

/// Binary mask at image resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedRegion {
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub channel: usize,
    pub step: usize,
    pub threshold: f64,
}

impl ActivatedRegion {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// True when every pixel marked here is also marked in `other`.
    pub fn is_subset_of(&self, other: &ActivatedRegion) -> bool {
        self.mask.len() == other.mask.len() && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

fn check_channel_step<T: Scalar>(trace: &DecodeTrace<T>, channel: usize, step: usize) -> Result<(usize, usize, usize)> {
    if step < 1 || step > trace.len() {
        return Err(InterpretError::Range(format!("step {step} is not inside 1..={}", trace.len())));
    }
    let (c, h, w) = trace.steps[0]
        .state
        .dims3()
        .map_err(|_| InterpretError::Range("trace states are not 2D maps".into()))?;
    if channel >= c {
        return Err(InterpretError::Range(format!("channel {channel} of {c}")));
    }
    Ok((c, h, w))
}

/// The channel map at `step` bicubically resized to `extent`.
pub fn upsampled_channel<T: Scalar>(
    trace: &DecodeTrace<T>,
    channel: usize,
    step: usize,
    extent: (usize, usize),
) -> Result<Tensor<f64>> {
    check_channel_step(trace, channel, step)?;
    if extent.0 == 0 || extent.1 == 0 {
        return Err(InterpretError::Range("image extents must be positive".into()));
    }
    let map = trace.steps[step - 1]
        .state
        .channel(channel)
        .map_err(|e| InterpretError::Range(e.to_string()))?
        .cast::<f64>();
    bicubic_resize(&map, extent).map_err(|e| InterpretError::Range(e.to_string()))
}

/// Pixels whose interpolated activation at `step` strictly exceeds λ·v*,
/// with v* the largest value of `channel` over every step of the trace.
pub fn activated_region<T: Scalar>(
    trace: &DecodeTrace<T>,
    channel: usize,
    step: usize,
    extent: (usize, usize),
    lambda: f64,
) -> Result<ActivatedRegion> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(InterpretError::Range(format!("lambda {lambda} is not in [0, 1]")));
    }
    let up = upsampled_channel(trace, channel, step, extent)?;
    let mut v_star = f64::NEG_INFINITY;
    for s in &trace.steps {
        let map = s.state.channel(channel).map_err(|e| InterpretError::Range(e.to_string()))?;
        for v in map.data() {
            v_star = v_star.max(v.as_f64());
        }
    }
    let threshold = lambda * v_star;
    Ok(ActivatedRegion {
        mask: up.data().iter().map(|&v| v > threshold).collect(),
        height: extent.0,
        width: extent.1,
        channel,
        step,
        threshold,
    })
}

/// Share of the image-normalized activation that falls inside `mask`.
pub fn attention_correctness(activations: &Tensor<f64>, mask: &[bool]) -> Result<f64> {
    if activations.len() != mask.len() {
        return Err(InterpretError::Range(format!(
            "mask has {} pixels, activation map {}",
            mask.len(),
            activations.len()
        )));
    }
    if activations.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(InterpretError::Undefined("activations must be finite and nonnegative".into()));
    }
    let total: f64 = activations.data().iter().sum();
    if total <= 0.0 {
        return Err(InterpretError::Undefined("activation map sums to zero".into()));
    }
    let inside: f64 = activations.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v / total).sum();
    Ok(inside.min(1.0))
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// 255 where marked, 0 elsewhere.
    pub fn from_mask(region: &ActivatedRegion) -> Self {
        Self {
            width: region.width,
            height: region.height,
            pixels: region.mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Min-max scaled to 0..=255; a constant map becomes all zero.
    pub fn from_map(map: &Tensor<f64>) -> Result<Self> {
        let [height, width] = *map.shape() else {
            return Err(InterpretError::Format(format!("expected an H×W map, got {:?}", map.shape())));
        };
        let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels = map
            .data()
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect();
        Ok(Self { width, height, pixels })
    }

    /// Binary PGM (P5) bytes.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses binary PGM with a maxval of at most 255; `#` comments in the
    /// header are skipped.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| InterpretError::Format(m.to_string());
        if !bytes.starts_with(b"P5") {
            return Err(bad("missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            let digits = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("invalid header"))?;
            *field = digits.parse().map_err(|_| bad("invalid header number"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("missing separator after header"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(bad("unsupported extents or maxval"));
        }
        let n = width.checked_mul(height).ok_or_else(|| bad("image too large"))?;
        let pixels = bytes.get(pos..).filter(|p| p.len() == n).ok_or_else(|| bad("pixel data has the wrong length"))?;
        Ok(Self { width, height, pixels: pixels.to_vec() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?)
    }
}
