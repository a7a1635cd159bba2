//! Synthetic spatial captioning scenes, a position-preserving feature
//! encoder for them, and a JSONL loader for externally produced features.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const CATEGORIES: [&str; 8] = [
    "circle", "square", "triangle", "star", "cross", "heart", "ring", "diamond",
];
pub const ATTRIBUTES: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "orange"];
pub const NOISE_SIGMA: f64 = 0.05;

const TEMPLATES: [&str; 5] = [
    "a {attr} {cat} in the {v} {h}",
    "a {attr} {cat} at the {v} {h}",
    "there is a {attr} {cat} in the {v} {h}",
    "the {v} {h} has a {attr} {cat}",
    "a {cat} that is {attr} in the {v} {h}",
];

pub const TEMPLATE_COUNT: usize = TEMPLATES.len();

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl From<std::io::Error> for CorpusError {
    fn from(e: std::io::Error) -> Self {
        CorpusError::Io(e.to_string())
    }
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub rows: usize,
    pub cols: usize,
    pub categories: usize,
    pub attributes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 3,
            categories: CATEGORIES.len(),
            attributes: ATTRIBUTES.len(),
            min_objects: 1,
            max_objects: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(CorpusError::Config(
                "grid must have at least one cell".into(),
            ));
        }
        if !(1..=CATEGORIES.len()).contains(&self.categories)
            || !(1..=ATTRIBUTES.len()).contains(&self.attributes)
        {
            return Err(CorpusError::Config(format!(
                "between 1 and {} categories and 1 and {} attributes are available",
                CATEGORIES.len(),
                ATTRIBUTES.len()
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return Err(CorpusError::Config(
                "object count range must lie within 1..=3".into(),
            ));
        }
        if self.max_objects > self.rows * self.cols {
            return Err(CorpusError::Config("more objects than grid cells".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub attribute: usize,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn category_word(&self) -> &'static str {
        CATEGORIES[self.category]
    }

    pub fn attribute_word(&self) -> &'static str {
        ATTRIBUTES[self.attribute]
    }
}

/// Objects on a grid, at most one per cell, kept in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(rows: usize, cols: usize, mut objects: Vec<SceneObject>, seed: u64) -> Result<Self> {
        objects.sort_by_key(|o| (o.row, o.col));
        let scene = Self {
            rows,
            cols,
            objects,
            seed,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(CorpusError::Config(
                "grid must have at least one cell".into(),
            ));
        }
        if self.objects.len() > 3 {
            return Err(CorpusError::Config(
                "a scene holds at most 3 objects".into(),
            ));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.row >= self.rows || o.col >= self.cols {
                return Err(CorpusError::Config(format!(
                    "object at ({}, {}) is off the grid",
                    o.row, o.col
                )));
            }
            if o.category >= CATEGORIES.len() || o.attribute >= ATTRIBUTES.len() {
                return Err(CorpusError::Config("unknown category or attribute".into()));
            }
            if self.objects[..i]
                .iter()
                .any(|p| (p.row, p.col) == (o.row, o.col))
            {
                return Err(CorpusError::Config(format!(
                    "two objects share cell ({}, {})",
                    o.row, o.col
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic scene per seed with distinct object cells.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    while objects.len() < n {
        let row = rng.random_range(0..config.rows);
        let col = rng.random_range(0..config.cols);
        if objects.iter().any(|o| (o.row, o.col) == (row, col)) {
            continue;
        }
        let category = rng.random_range(0..config.categories);
        let attribute = rng.random_range(0..config.attributes);
        objects.push(SceneObject {
            category,
            attribute,
            row,
            col,
        });
    }
    SceneSpec::new(config.rows, config.cols, objects, seed)
}

fn position_word(index: usize, extent: usize, words: [&'static str; 3]) -> &'static str {
    if extent == 1 {
        words[1]
    } else if index == 0 {
        words[0]
    } else if index == extent - 1 {
        words[2]
    } else {
        words[1]
    }
}

/// `top`, `middle` or `bottom`.
pub fn vertical_word(row: usize, rows: usize) -> &'static str {
    position_word(row, rows, ["top", "middle", "bottom"])
}

/// `left`, `center` or `right`.
pub fn horizontal_word(col: usize, cols: usize) -> &'static str {
    position_word(col, cols, ["left", "center", "right"])
}

/// One caption per template id; clauses for several objects are joined
/// with "and".
pub fn caption_scene(scene: &SceneSpec, templates: &[usize]) -> Vec<String> {
    templates
        .iter()
        .map(|&t| {
            let template = TEMPLATES[t % TEMPLATE_COUNT];
            let clauses: Vec<String> = scene
                .objects
                .iter()
                .map(|o| {
                    template
                        .replace("{attr}", o.attribute_word())
                        .replace("{cat}", o.category_word())
                        .replace("{v}", vertical_word(o.row, scene.rows))
                        .replace("{h}", horizontal_word(o.col, scene.cols))
                })
                .collect();
            if clauses.is_empty() {
                "an empty scene".to_string()
            } else {
                clauses.join(" and ")
            }
        })
        .collect()
}

/// Top-left corner of the 2×2 feature block for a grid cell.
pub fn cell_block(
    row: usize,
    col: usize,
    grid: (usize, usize),
    extent: (usize, usize),
) -> (usize, usize) {
    let place = |i: usize, n: usize, size: usize| {
        if n == 1 {
            (size - 2) / 2
        } else {
            i * (size - 2) / (n - 1)
        }
    };
    (place(row, grid.0, extent.0), place(col, grid.1, extent.1))
}

/// `C_v×H×W` features: the category channel and the attribute channel (at
/// offset `categories`) are set to 1 on the object's 2×2 block, and
/// Gaussian noise is added everywhere.
pub fn encode_scene(scene: &SceneSpec, features: (usize, usize, usize)) -> Result<Tensor<f32>> {
    scene.validate()?;
    let (c, h, w) = features;
    let needed = CATEGORIES.len() + ATTRIBUTES.len();
    if c < needed {
        return Err(CorpusError::Config(format!(
            "need at least {needed} feature channels, got {c}"
        )));
    }
    if h < 2 * scene.rows || w < 2 * scene.cols {
        return Err(CorpusError::Config(format!(
            "a {}×{} grid does not fit a {h}×{w} feature map",
            scene.rows, scene.cols
        )));
    }
    let mut t = Tensor::<f32>::zeros(&[c, h, w]);
    for o in &scene.objects {
        let (y0, x0) = cell_block(o.row, o.col, (scene.rows, scene.cols), (h, w));
        for ch in [o.category, CATEGORIES.len() + o.attribute] {
            for y in y0..y0 + 2 {
                for x in x0..x0 + 2 {
                    t.data_mut()[(ch * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6e6f_6973_65u64);
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    for v in t.data_mut() {
        *v += normal.sample(&mut rng) as f32;
    }
    Ok(t)
}

/// Binary mask of an object's grid cell at image resolution.
pub fn object_mask(scene: &SceneSpec, object: &SceneObject, extent: (usize, usize)) -> Vec<bool> {
    let (h, w) = extent;
    let y0 = object.row * h / scene.rows;
    let y1 = (object.row + 1) * h / scene.rows;
    let x0 = object.col * w / scene.cols;
    let x1 = (object.col + 1) * w / scene.cols;
    (0..h * w)
        .map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub features: Tensor<f32>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub features: (usize, usize, usize),
    pub captions_per_scene: usize,
    /// Use templates `0..captions_per_scene` for every scene instead of
    /// rotating the starting template by scene seed.
    #[serde(default)]
    pub fixed_templates: bool,
}

impl SynthConfig {
    pub fn new(scenes: usize, seed: u64) -> Self {
        Self {
            scenes,
            seed,
            scene: SceneConfig::default(),
            features: (16, 7, 7),
            captions_per_scene: TEMPLATE_COUNT,
            fixed_templates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub scenes: Vec<SceneSpec>,
    pub records: Vec<FeatureRecord>,
}

/// Scene `i` gets its own seed drawn from a generator seeded with the
/// corpus seed; captions use templates `seed % n, seed % n + 1, ...`
/// unless `fixed_templates` is set.
pub fn synthetic_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.captions_per_scene == 0 {
        return Err(CorpusError::Config(
            "at least one caption per scene is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(config.scenes);
    let mut records = Vec::with_capacity(config.scenes);
    for i in 0..config.scenes {
        let scene = generate_scene(rng.random(), &config.scene)?;
        let first = if config.fixed_templates {
            0
        } else {
            (scene.seed % TEMPLATE_COUNT as u64) as usize
        };
        let templates: Vec<usize> = (0..config.captions_per_scene).map(|k| first + k).collect();
        records.push(FeatureRecord {
            id: format!("synth-{}-{i}", config.seed),
            features: encode_scene(&scene, config.features)?,
            captions: caption_scene(&scene, &templates),
        });
        scenes.push(scene);
    }
    Ok(SynthCorpus { scenes, records })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureLine {
    id: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_path: Option<String>,
    captions: Vec<String>,
}

fn decode_f32(bytes: &[u8], expected: usize) -> std::result::Result<Vec<f32>, String> {
    if bytes.len() != expected * 4 {
        return Err(format!(
            "payload holds {} bytes, shape needs {}",
            bytes.len(),
            expected * 4
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Parses feature JSONL text. Sidecar `data_path` entries are resolved
/// against `base_dir`; without one they are rejected.
pub fn parse_features(text: &str, base_dir: Option<&Path>) -> Result<Vec<FeatureRecord>> {
    let mut out: Vec<FeatureRecord> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| CorpusError::Parse { line, message };
        let parsed: FeatureLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if parsed.shape.len() != 3 {
            return Err(err(format!(
                "shape must be [C, H, W], got {:?}",
                parsed.shape
            )));
        }
        let numel = parsed
            .shape
            .iter()
            .try_fold(1usize, |a, &e| if e == 0 { None } else { a.checked_mul(e) })
            .filter(|&n| n <= (1 << 28))
            .ok_or_else(|| err(format!("unsupported shape {:?}", parsed.shape)))?;
        let bytes = match (&parsed.data, &parsed.data_path) {
            (Some(b64), None) => B64
                .decode(b64.trim())
                .map_err(|e| err(format!("invalid base64 payload: {e}")))?,
            (None, Some(rel)) => {
                let base =
                    base_dir.ok_or_else(|| err("sidecar payloads need a file location".into()))?;
                let path = base.join(rel);
                fs::read(&path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?
            }
            _ => return Err(err("exactly one of data and data_path is required".into())),
        };
        let data = decode_f32(&bytes, numel).map_err(err)?;
        if parsed.captions.is_empty() {
            return Err(err("at least one caption is required".into()));
        }
        let features = Tensor::new(&parsed.shape, data).map_err(|e| err(e.to_string()))?;
        if let Some(first) = out.first() {
            if first.features.shape() != features.shape() {
                return Err(CorpusError::Corpus(format!(
                    "line {line} has shape {:?}, earlier records have {:?}",
                    features.shape(),
                    first.features.shape()
                )));
            }
        }
        out.push(FeatureRecord {
            id: parsed.id,
            features,
            captions: parsed.captions,
        });
    }
    if out.is_empty() {
        return Err(CorpusError::Corpus("feature file holds no records".into()));
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
    parse_features(&text, Some(path.parent().unwrap_or(Path::new("."))))
}

fn encode_f32(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes records as JSONL with inline base64 payloads.
pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = FeatureLine {
            id: r.id.clone(),
            shape: r.features.shape().to_vec(),
            data: Some(B64.encode(encode_f32(r.features.data()))),
            data_path: None,
            captions: r.captions.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| CorpusError::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes records as JSONL plus one raw little-endian payload per record
/// in `sidecar_dir`, referenced relative to the JSONL file.
pub fn write_features_sidecar(
    path: &Path,
    records: &[FeatureRecord],
    sidecar_dir: &str,
) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(base.join(sidecar_dir))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (i, r) in records.iter().enumerate() {
        let rel: PathBuf = Path::new(sidecar_dir).join(format!("{i}.f32"));
        fs::write(base.join(&rel), encode_f32(r.features.data()))?;
        let line = FeatureLine {
            id: r.id.clone(),
            shape: r.features.shape().to_vec(),
            data: None,
            data_path: Some(rel.to_string_lossy().into_owned()),
            captions: r.captions.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| CorpusError::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_scenes(path: &Path, scenes: &[SceneSpec]) -> Result<()> {
    let text = serde_json::to_string_pretty(scenes).map_err(|e| CorpusError::Io(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn parse_scenes(text: &str) -> Result<Vec<SceneSpec>> {
    let scenes: Vec<SceneSpec> = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    for s in &scenes {
        s.validate()?;
    }
    Ok(scenes)
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneSpec>> {
    parse_scenes(&fs::read_to_string(path)?)
}
