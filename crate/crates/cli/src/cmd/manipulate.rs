use clap::Args;
use rayon::prelude::*;
use rnn2ds::cells::Shape;
use rnn2ds::decoder::{DecodeMode, Intervention};
use rnn2ds::tensor::Region;
use serde::{Deserialize, Serialize};

use super::{CheckpointArgs, VAL_CORPUS_SEED};
use crate::common::Outputs;
use crate::error::{CliError, Result};
use crate::{Ctx, Report};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[group(id = "intervention", required = true, multiple = false, args = ["region", "deactivate"])]
pub struct ManipulateArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    /// Pool only over the state window x1,y1,x2,y2 (one-based, inclusive).
    #[arg(long)]
    pub region: Option<Region>,
    /// Clamp this state channel to zero after every update.
    #[arg(long)]
    pub deactivate: Option<usize>,
}

#[derive(Serialize)]
struct PairLine<'a> {
    id: &'a str,
    baseline: String,
    intervened: String,
    changed: bool,
}

pub fn run(args: &ManipulateArgs, _ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    let loaded = args.input.load(VAL_CORPUS_SEED)?;
    let model = &loaded.model;
    let Shape::Map(channels, h, w) = model.config().cell.state else {
        return Err(CliError::usage(format!(
            "{} has a vector state; interventions need a 2D state",
            model.config().cell.kind
        )));
    };
    let intervention = match (args.region, args.deactivate) {
        (Some(r), None) => {
            r.validate(h, w)?;
            Intervention::Region(r)
        }
        (None, Some(c)) if c < channels => Intervention::Deactivate(c),
        (None, Some(c)) => {
            return Err(CliError::usage(format!(
                "channel {c} out of range for {channels} channels"
            )))
        }
        _ => return Err(CliError::usage("give exactly one of --region or --deactivate")),
    };
    let steps = loaded.max_len + 1;
    let pairs: Vec<(String, String)> = loaded
        .data
        .records
        .par_iter()
        .map(|r| {
            let base = model.generate(&r.features, DecodeMode::Greedy, steps)?;
            let alt =
                model.generate_with(&r.features, DecodeMode::Greedy, steps, Some(intervention))?;
            Ok((
                model.vocab().decode(&base.tokens),
                model.vocab().decode(&alt.tokens),
            ))
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for (r, (baseline, intervened)) in loaded.data.records.iter().zip(pairs) {
        let changed = baseline != intervened;
        text.push_str(&serde_json::to_string(&PairLine {
            id: &r.id,
            baseline,
            intervened,
            changed,
        })?);
        text.push('\n');
    }
    out.write("manipulated.jsonl", text)?;
    Ok(Report {
        seed: loaded.seed,
        timings: None,
        failure: None,
    })
}
