pub mod caption;
pub mod compare;
pub mod gradcheck;
pub mod interpret;
pub mod manipulate;
pub mod train;

use std::path::PathBuf;

use clap::Args;
use rnn2ds::cells::{Activation, CellConfig, CellKind, Shape, VisualInput};
use rnn2ds::checkpoint;
use rnn2ds::corpus::{FeatureRecord, TEMPLATE_COUNT};
use rnn2ds::decoder::{DecoderModel, Pooling, MAX_CAPTION_WORDS};
use rnn2ds::training::{Precision, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::common::{load_source, parse_extent3, parse_kernel, Loaded, Source, SynthOptions};
use crate::error::{CliError, Result};

/// Corpus seed used by `synth:N` without an explicit seed, per role.
pub const TRAIN_CORPUS_SEED: u64 = 1;
pub const VAL_CORPUS_SEED: u64 = 2;
pub const TEST_CORPUS_SEED: u64 = 3;

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// rnn1ds, gru1ds, lstm1ds, rnn2ds, gru2ds or lstm2ds.
    #[arg(long, default_value = "rnn2ds")]
    pub cell: CellKind,
    /// CxHxW for 2D cells, L for vector cells [default: 16x7x7 or 128].
    #[arg(long)]
    pub state: Option<Shape>,
    /// Convolution kernel of the 2D cells, K or KHxKW.
    #[arg(long, value_parser = parse_kernel, default_value = "3")]
    pub kernel: (usize, usize),
    /// mean or max.
    #[arg(long, default_value = "mean")]
    pub pooling: Pooling,
    /// relu or tanh [default: relu for 2D cells, tanh for vector cells].
    #[arg(long)]
    pub activation: Option<Activation>,
    /// Raw embedding entry, CxHxW or L [default: 4x15x15 or the state length].
    #[arg(long)]
    pub embedding: Option<Shape>,
    /// Channels between the two embedding convolutions.
    #[arg(long, default_value_t = 32)]
    pub embed_hidden: usize,
    /// Kernel extent of the embedding convolutions.
    #[arg(long, default_value_t = 5)]
    pub embed_kernel: usize,
    /// How vector cells see the visual feature: flatten or pool.
    #[arg(long, default_value = "pool")]
    pub visual_input: VisualInput,
}

impl ModelArgs {
    pub fn cell_config(&self) -> Result<CellConfig> {
        let state = self.state.unwrap_or(if self.cell.is_2d() {
            Shape::Map(16, 7, 7)
        } else {
            Shape::Vector(128)
        });
        let mut cfg = CellConfig::new(self.cell, state);
        cfg.kernel = self.kernel;
        if let Some(a) = self.activation {
            cfg.activation = a;
        }
        if let Some(e) = self.embedding {
            cfg.embedding = e;
        }
        cfg.embed_hidden = self.embed_hidden;
        cfg.embed_kernel = self.embed_kernel;
        cfg.visual_input = self.visual_input;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Training examples: synth:N[:SEED] or a features JSONL file.
    #[arg(long, default_value = "synth:2000")]
    pub corpus: Source,
    /// Validation examples used to pick the best epoch.
    #[arg(long)]
    pub val: Option<Source>,
    /// Feature extent of synthetic scenes, CxHxW.
    #[arg(long, value_parser = parse_extent3, default_value = "16x7x7")]
    pub features: (usize, usize, usize),
    /// Reference captions per synthetic training scene.
    #[arg(long, default_value_t = TEMPLATE_COUNT)]
    pub captions_per_scene: usize,
    /// Same template order for every synthetic training scene.
    #[arg(long)]
    pub fixed_templates: bool,
    /// Words seen fewer times become <unk>.
    #[arg(long, default_value_t = 6)]
    pub threshold: usize,
}

impl DataArgs {
    pub fn train_options(&self) -> SynthOptions {
        SynthOptions {
            default_seed: TRAIN_CORPUS_SEED,
            features: self.features,
            captions_per_scene: self.captions_per_scene,
            fixed_templates: self.fixed_templates,
        }
    }

    pub fn eval_options(&self, default_seed: u64) -> SynthOptions {
        eval_options(self.features, default_seed)
    }

    pub fn load_val(&self) -> Result<Vec<FeatureRecord>> {
        match &self.val {
            Some(s) => Ok(load_source(s, self.eval_options(VAL_CORPUS_SEED))?.records),
            None => Ok(Vec::new()),
        }
    }
}

/// Held-out synthetic sets carry every template as a reference.
pub fn eval_options(features: (usize, usize, usize), default_seed: u64) -> SynthOptions {
    SynthOptions {
        default_seed,
        features,
        captions_per_scene: TEMPLATE_COUNT,
        fixed_templates: false,
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimArgs {
    /// Model initialization and shuffling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// First-stage epochs.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// First-stage learning rate.
    #[arg(long, default_value_t = 0.0004)]
    pub lr: f64,
    /// Second-stage learning rate.
    #[arg(long, default_value_t = 0.0001)]
    pub lr2: f64,
    #[arg(long, default_value_t = 0)]
    pub stage2_epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Caption words kept per reference.
    #[arg(long, default_value_t = MAX_CAPTION_WORDS)]
    pub max_len: usize,
    /// Stop after this many epochs without a better validation BLEU-4.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Training arithmetic, 32 or 64 bits.
    #[arg(long, default_value = "32")]
    pub precision: Precision,
}

impl OptimArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            lr: self.lr,
            stage1_epochs: self.epochs,
            lr_stage2: self.lr2,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            max_len: self.max_len,
            seed: self.seed,
            patience: self.patience,
            clip_norm: self.clip,
            precision: self.precision,
        };
        tc.validate()?;
        Ok(tc)
    }
}

/// Visual extent shared by every record.
pub fn visual_extent(records: &[FeatureRecord]) -> Result<(usize, usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| CliError::usage("no examples"))?;
    let dims = |r: &FeatureRecord| match r.features.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(CliError::usage(format!(
            "{}: features must be CxHxW, got {s:?}",
            r.id
        ))),
    };
    let extent = dims(first)?;
    for r in records {
        if dims(r)? != extent {
            return Err(CliError::usage(format!(
                "{}: features {:?} differ from {:?}",
                r.id,
                r.features.shape(),
                extent
            )));
        }
    }
    Ok(extent)
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CheckpointArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Examples to run: a features JSONL file or synth:N[:SEED].
    #[arg(long, default_value = "synth:200")]
    pub features: Source,
    /// Caption word cap; one more step is allowed for <eos>.
    #[arg(long)]
    pub max_len: Option<usize>,
}

pub struct LoadedCheckpoint {
    pub model: DecoderModel<f32>,
    pub seed: u64,
    pub max_len: usize,
    pub data: Loaded,
}

impl CheckpointArgs {
    /// Model, its seed, the effective caption cap and the examples, checked
    /// against the model's visual extent.
    pub fn load(&self, default_seed: u64) -> Result<LoadedCheckpoint> {
        let (model, meta) = checkpoint::load(&self.checkpoint)?;
        let max_len = self
            .max_len
            .or(meta.train.as_ref().map(|t| t.max_len))
            .unwrap_or(MAX_CAPTION_WORDS);
        if max_len == 0 {
            return Err(CliError::usage("max length must be positive"));
        }
        let visual = model.config().visual;
        let data = load_source(&self.features, eval_options(visual, default_seed))?;
        let extent = visual_extent(&data.records)?;
        if extent != visual {
            return Err(CliError::usage(format!(
                "features are {extent:?} but the checkpoint expects {visual:?}"
            )));
        }
        Ok(LoadedCheckpoint {
            model,
            seed: meta.seed,
            max_len,
            data,
        })
    }
}
