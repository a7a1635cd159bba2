use clap::Args;
use rayon::prelude::*;
use rnn2ds::decoder::{DecodeMode, DecodeTrace, DecoderModel, Generation, Termination};
use rnn2ds::tensor::Tensor;
use rnn2ds::training::{bleu4, rouge_l, tokenize};
use serde::{Deserialize, Serialize};

use super::{CheckpointArgs, VAL_CORPUS_SEED};
use crate::common::Outputs;
use crate::error::Result;
use crate::{Ctx, Report};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CaptionArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    /// greedy, sample:SEED or beam:WIDTH.
    #[arg(long, default_value = "greedy")]
    pub mode: DecodeMode,
    /// Also write traces/NNNNN.json with every step's state, pooled vector and logits.
    #[arg(long)]
    pub emit_trace: bool,
}

#[derive(Serialize)]
pub struct CaptionLine<'a> {
    pub id: &'a str,
    pub caption: String,
    pub tokens: &'a [usize],
    pub termination: Termination,
}

#[derive(Serialize)]
struct TensorJson<'a> {
    shape: &'a [usize],
    data: &'a [f32],
}

impl<'a> From<&'a Tensor<f32>> for TensorJson<'a> {
    fn from(t: &'a Tensor<f32>) -> Self {
        Self {
            shape: t.shape(),
            data: t.data(),
        }
    }
}

#[derive(Serialize)]
struct StepJson<'a> {
    step: usize,
    token: usize,
    word: &'a str,
    state: TensorJson<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cell: Option<TensorJson<'a>>,
    pooled: TensorJson<'a>,
    logits: TensorJson<'a>,
}

#[derive(Serialize)]
struct TraceJson<'a> {
    id: &'a str,
    termination: Termination,
    visual: TensorJson<'a>,
    steps: Vec<StepJson<'a>>,
}

pub fn trace_json(model: &DecoderModel<f32>, id: &str, trace: &DecodeTrace<f32>) -> String {
    let steps = trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| StepJson {
            step: i + 1,
            token: s.token,
            word: model.vocab().token(s.token).unwrap_or("<unk>"),
            state: (&s.state).into(),
            cell: s.cell.as_ref().map(Into::into),
            pooled: (&s.pooled).into(),
            logits: (&s.logits).into(),
        })
        .collect();
    let t = TraceJson {
        id,
        termination: trace.termination,
        visual: (&trace.visual).into(),
        steps,
    };
    serde_json::to_string(&t).expect("traces serialize")
}

pub fn run(args: &CaptionArgs, _ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let loaded = args.input.load(VAL_CORPUS_SEED)?;
    let model = &loaded.model;
    let records = &loaded.data.records;
    let gens: Vec<Generation<f32>> = records
        .par_iter()
        .map(|r| model.generate(&r.features, args.mode, loaded.max_len + 1))
        .collect::<std::result::Result<_, _>>()?;
    let mut lines = String::new();
    for (r, g) in records.iter().zip(&gens) {
        let line = CaptionLine {
            id: &r.id,
            caption: model.vocab().decode(&g.tokens),
            tokens: &g.tokens,
            termination: g.trace.termination,
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    out.write("captions.jsonl", lines)?;
    if records.iter().all(|r| !r.captions.is_empty()) {
        let cands: Vec<Vec<String>> = gens
            .iter()
            .map(|g| tokenize(&model.vocab().decode(&g.tokens)))
            .collect();
        let refs: Vec<Vec<Vec<String>>> = records
            .iter()
            .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
            .collect();
        out.write_json(
            "metrics.json",
            &serde_json::json!({
                "examples": records.len(),
                "bleu4": bleu4(&cands, &refs)?,
                "rouge_l": rouge_l(&cands, &refs)?,
            }),
        )?;
    }
    if args.emit_trace {
        for (i, (r, g)) in records.iter().zip(&gens).enumerate() {
            out.write(
                &format!("traces/{i:05}.json"),
                trace_json(model, &r.id, &g.trace),
            )?;
        }
    }
    Ok(Report {
        seed: loaded.seed,
        timings: None,
        failure: None,
    })
}
