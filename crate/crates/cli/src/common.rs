use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rnn2ds::corpus::{load_features, synthetic_corpus, FeatureRecord, SceneSpec, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Where examples come from: `synth:N` / `synth:N:SEED`, or a features JSONL path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Source {
    Synth { scenes: usize, seed: Option<u64> },
    File(PathBuf),
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let Some(rest) = s.strip_prefix("synth:") else {
            if s.is_empty() {
                return Err("empty corpus path".into());
            }
            return Ok(Source::File(PathBuf::from(s)));
        };
        let bad = || format!("expected synth:N or synth:N:SEED, got {s:?}");
        let mut parts = rest.split(':');
        let scenes = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let seed = match parts.next() {
            Some(p) => Some(p.parse().map_err(|_| bad())?),
            None => None,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Source::Synth { scenes, seed })
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Synth { scenes, seed: None } => write!(f, "synth:{scenes}"),
            Source::Synth {
                scenes,
                seed: Some(s),
            } => write!(f, "synth:{scenes}:{s}"),
            Source::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Source {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// Options for synthetic sources.
#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub default_seed: u64,
    pub features: (usize, usize, usize),
    pub captions_per_scene: usize,
    pub fixed_templates: bool,
}

pub struct Loaded {
    pub records: Vec<FeatureRecord>,
    /// Present for synthetic sources.
    pub scenes: Option<Vec<SceneSpec>>,
}

pub fn load_source(source: &Source, opts: SynthOptions) -> Result<Loaded> {
    match source {
        Source::File(path) => Ok(Loaded {
            records: load_features(path)?,
            scenes: None,
        }),
        Source::Synth { scenes, seed } => {
            let mut cfg = SynthConfig::new(*scenes, seed.unwrap_or(opts.default_seed));
            cfg.features = opts.features;
            cfg.captions_per_scene = opts.captions_per_scene;
            cfg.fixed_templates = opts.fixed_templates;
            let corpus = synthetic_corpus(&cfg)?;
            Ok(Loaded {
                records: corpus.records,
                scenes: Some(corpus.scenes),
            })
        }
    }
}

/// `K` or `KHxKW`.
pub fn parse_kernel(s: &str) -> Result<(usize, usize), String> {
    let nums: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("invalid kernel {s:?}"))?;
    match nums.as_slice() {
        [k] => Ok((*k, *k)),
        [h, w] => Ok((*h, *w)),
        _ => Err(format!("kernel {s:?} must be K or KHxKW")),
    }
}

/// `CxHxW`.
pub fn parse_extent3(s: &str) -> Result<(usize, usize, usize), String> {
    let nums: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("invalid extent {s:?}"))?;
    match nums.as_slice() {
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok((*c, *h, *w)),
        _ => Err(format!("extent {s:?} must be CxHxW with positive entries")),
    }
}

/// `HxW`.
pub fn parse_extent2(s: &str) -> Result<(usize, usize), String> {
    let nums: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("invalid extent {s:?}"))?;
    match nums.as_slice() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        _ => Err(format!("extent {s:?} must be HxW with positive entries")),
    }
}

/// Output files of one run, relative to the output directory.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Absolute path for `name`, recorded as an output.
    pub fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(p)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name)?;
        fs::write(&p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// One record of how a run was invoked and what it wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<serde_json::Value>,
    pub outputs: Vec<String>,
}
