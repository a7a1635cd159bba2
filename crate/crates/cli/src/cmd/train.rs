use clap::Args;
use rnn2ds::cells::{count_parameters, CellConfig};
use rnn2ds::checkpoint;
use rnn2ds::corpus::FeatureRecord;
use rnn2ds::decoder::{DecoderModel, ModelConfig, Pooling};
use rnn2ds::tensor::Scalar;
use rnn2ds::training::{train_with, EpochRecord, Precision, TrainConfig, Vocabulary};
use serde::{Deserialize, Serialize};

use super::{visual_extent, DataArgs, ModelArgs, OptimArgs};
use crate::common::{load_source, Outputs};
use crate::error::Result;
use crate::{Ctx, Report};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Serialize)]
pub struct TrainLog<'a> {
    pub kind: String,
    pub state: String,
    pub parameters: usize,
    pub vocabulary: usize,
    pub best_epoch: usize,
    pub epochs: &'a [EpochRecord],
}

pub struct Fitted {
    pub model: DecoderModel<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub timings: Vec<f64>,
}

fn fit_as<T: Scalar>(
    model: DecoderModel<f32>,
    train: &[FeatureRecord],
    val: &[FeatureRecord],
    tc: &TrainConfig,
    label: &str,
    quiet: bool,
) -> Result<Fitted> {
    let out = train_with(model.cast::<T>(), train, val, tc, |r| {
        if !quiet {
            let val = match (r.val_bleu4, r.val_rouge_l) {
                (Some(b), Some(g)) => format!(" val BLEU-4 {b:.4} ROUGE-L {g:.4}"),
                _ => String::new(),
            };
            eprintln!("{label}epoch {:>3} nll {:.4}{val}", r.epoch, r.train_nll);
        }
    })?;
    Ok(Fitted {
        model: out.model.cast(),
        best_epoch: out.best_epoch,
        log: out.log,
        timings: out.timings,
    })
}

/// Builds and trains a model in the configured precision.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    cell: CellConfig,
    pooling: Pooling,
    vocab: Vocabulary,
    train: &[FeatureRecord],
    val: &[FeatureRecord],
    tc: &TrainConfig,
    label: &str,
    quiet: bool,
) -> Result<Fitted> {
    let config = ModelConfig {
        cell,
        vocab_size: vocab.len(),
        visual: visual_extent(train)?,
        pooling,
    };
    let model = DecoderModel::<f32>::new(config, vocab, tc.seed)?;
    match tc.precision {
        Precision::F32 => fit_as::<f32>(model, train, val, tc, label, quiet),
        Precision::F64 => fit_as::<f64>(model, train, val, tc, label, quiet),
    }
}

pub fn build_vocabulary(records: &[FeatureRecord], threshold: usize) -> Result<Vocabulary> {
    Ok(Vocabulary::build(
        records
            .iter()
            .flat_map(|r| r.captions.iter().map(String::as_str)),
        threshold,
    )?)
}

pub fn run(args: &TrainArgs, ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let cell = args.model.cell_config()?;
    let tc = args.optim.train_config()?;
    let train = load_source(&args.data.corpus, args.data.train_options())?.records;
    let val = args.data.load_val()?;
    let vocab = build_vocabulary(&train, args.data.threshold)?;
    let fitted = fit(
        cell.clone(),
        args.model.pooling,
        vocab,
        &train,
        &val,
        &tc,
        "",
        args.quiet,
    )?;
    let model = &fitted.model;
    let bytes = checkpoint::encode(model, tc.seed, Some(&tc));
    out.write("model.c2ds", bytes)?;
    let parameters = count_parameters(&cell, model.vocab().len(), model.config().visual).total;
    out.write_json(
        "train_log.json",
        &TrainLog {
            kind: cell.kind.slug().to_string(),
            state: cell.state.to_string(),
            parameters,
            vocabulary: model.vocab().len(),
            best_epoch: fitted.best_epoch,
            epochs: &fitted.log,
        },
    )?;
    let timings = serde_json::json!({ "epoch_seconds": fitted.timings });
    if !ctx.deterministic {
        out.write_json("timings.json", &timings)?;
    }
    Ok(Report {
        seed: tc.seed,
        timings: Some(timings),
        failure: None,
    })
}
