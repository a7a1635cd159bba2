use std::fmt::Write as _;
use std::str::FromStr;

use clap::Args;
use rnn2ds::cells::{count_parameters, match_vector_config, CellConfig, CellKind, Shape, VisualInput};
use rnn2ds::checkpoint;
use rnn2ds::training::evaluate;
use serde::{Deserialize, Serialize};

use super::train::{build_vocabulary, fit, TrainLog};
use super::{visual_extent, DataArgs, OptimArgs, TEST_CORPUS_SEED};
use crate::common::{load_source, Outputs, Source};
use crate::error::{CliError, Result};
use crate::{Ctx, Report};

/// A 2D configuration, `KIND:CxHxW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PairSpec {
    pub kind: CellKind,
    pub state: Shape,
}

impl FromStr for PairSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, state) = s
            .split_once(':')
            .ok_or_else(|| format!("expected KIND:CxHxW, got {s:?}"))?;
        let kind: CellKind = kind.parse().map_err(|e| format!("{e}"))?;
        let state: Shape = state.parse().map_err(|e| format!("{e}"))?;
        if !kind.is_2d() || !matches!(state, Shape::Map(..)) {
            return Err(format!("{s:?} is not a 2D configuration"));
        }
        Ok(Self { kind, state })
    }
}

impl From<PairSpec> for String {
    fn from(p: PairSpec) -> String {
        format!("{}:{}", p.kind.slug(), p.state)
    }
}

impl TryFrom<String> for PairSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// 2D configuration to pair with a vector baseline; repeat for several.
    #[arg(long = "pair", default_values = ["rnn2ds:8x7x7", "rnn2ds:16x7x7"])]
    pub pairs: Vec<PairSpec>,
    /// Vector-state cell the 2D configurations are compared against.
    #[arg(long, default_value = "lstm1ds")]
    pub baseline: CellKind,
    /// How the baseline sees the visual feature: pool or flatten.
    #[arg(long, default_value = "pool")]
    pub baseline_visual_input: VisualInput,
    /// Relative parameter-count tolerance of a pair.
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
    /// Runs per configuration, with seeds --seed, --seed + 1, ...
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Examples the reported metrics are computed on.
    #[arg(long, default_value = "synth:200")]
    pub test: Source,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Serialize)]
struct RunResult {
    seed: u64,
    best_epoch: usize,
    bleu4: f64,
    rouge_l: f64,
    dir: String,
}

#[derive(Debug, Clone, Serialize)]
struct Side {
    kind: String,
    state: String,
    embedding: String,
    parameters: usize,
    runs: Vec<RunResult>,
    mean_bleu4: f64,
    mean_rouge_l: f64,
}

#[derive(Debug, Clone, Serialize)]
struct PairReport {
    label: String,
    parameter_gap: f64,
    two_d: Side,
    one_d: Side,
    /// Mean BLEU-4 of the 2D side minus that of the vector side.
    bleu4_margin: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn run(args: &CompareArgs, ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    if args.seeds == 0 || args.pairs.is_empty() {
        return Err(CliError::usage("need at least one pair and one seed"));
    }
    if args.baseline.is_2d() {
        return Err(CliError::usage(format!(
            "{} is not a vector-state baseline",
            args.baseline
        )));
    }
    let base_tc = args.optim.train_config()?;
    let train = load_source(&args.data.corpus, args.data.train_options())?.records;
    let val = args.data.load_val()?;
    let test = load_source(&args.test, args.data.eval_options(TEST_CORPUS_SEED))?.records;
    let vocab = build_vocabulary(&train, args.data.threshold)?;
    let visual = visual_extent(&train)?;

    let mut configs: Vec<(String, CellConfig, CellConfig)> = Vec::new();
    for p in &args.pairs {
        let two = CellConfig::new(p.kind, p.state);
        let target = count_parameters(&two, vocab.len(), visual).total;
        let one = match_vector_config(
            args.baseline,
            target,
            vocab.len(),
            visual,
            args.baseline_visual_input,
            args.tolerance,
        )
            .map_err(|e| CliError::usage(format!("{}:{}: {e}", p.kind.slug(), p.state)))?;
        configs.push((format!("{}-{}", p.kind.slug(), p.state), two, one));
    }

    let mut pairs = Vec::new();
    let mut curves = String::from("pair,model,kind,state,seed,epoch,train_nll,val_bleu4,val_rouge_l\n");
    let mut summary = String::from("pair,model,kind,state,parameters,seed,bleu4,rouge_l\n");
    let mut timings = serde_json::Map::new();
    for (label, two, one) in &configs {
        let mut sides = Vec::new();
        for (side, cell) in [("2d", two), ("1d", one)] {
            let parameters = count_parameters(cell, vocab.len(), visual).total;
            let mut runs = Vec::new();
            for k in 0..args.seeds {
                let seed = args.optim.seed + k as u64;
                let tc = rnn2ds::training::TrainConfig { seed, ..base_tc.clone() };
                let tag = format!("[{label} {side} seed {seed}] ");
                let fitted = fit(
                    cell.clone(),
                    Default::default(),
                    vocab.clone(),
                    &train,
                    &val,
                    &tc,
                    &tag,
                    args.quiet,
                )?;
                let (bleu4, rouge_l) = evaluate(&fitted.model, &test, tc.max_len)?;
                let dir = format!("runs/{label}/{side}/seed-{seed}");
                out.write(
                    &format!("{dir}/model.c2ds"),
                    checkpoint::encode(&fitted.model, seed, Some(&tc)),
                )?;
                out.write_json(
                    &format!("{dir}/train_log.json"),
                    &TrainLog {
                        kind: cell.kind.slug().to_string(),
                        state: cell.state.to_string(),
                        parameters,
                        vocabulary: vocab.len(),
                        best_epoch: fitted.best_epoch,
                        epochs: &fitted.log,
                    },
                )?;
                for r in &fitted.log {
                    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    writeln!(
                        curves,
                        "{label},{side},{},{},{seed},{},{},{},{}",
                        cell.kind.slug(),
                        cell.state,
                        r.epoch,
                        r.train_nll,
                        opt(r.val_bleu4),
                        opt(r.val_rouge_l)
                    )
                    .expect("writing to a string");
                }
                writeln!(
                    summary,
                    "{label},{side},{},{},{parameters},{seed},{bleu4},{rouge_l}",
                    cell.kind.slug(),
                    cell.state
                )
                .expect("writing to a string");
                timings.insert(tag.trim().to_string(), serde_json::json!(fitted.timings));
                runs.push(RunResult {
                    seed,
                    best_epoch: fitted.best_epoch,
                    bleu4,
                    rouge_l,
                    dir,
                });
            }
            sides.push(Side {
                kind: cell.kind.slug().to_string(),
                state: cell.state.to_string(),
                embedding: cell.embedding.to_string(),
                parameters,
                mean_bleu4: mean(runs.iter().map(|r| r.bleu4)),
                mean_rouge_l: mean(runs.iter().map(|r| r.rouge_l)),
                runs,
            });
        }
        let one_d = sides.pop().expect("two sides");
        let two_d = sides.pop().expect("two sides");
        pairs.push(PairReport {
            label: label.clone(),
            parameter_gap: (one_d.parameters as f64 - two_d.parameters as f64).abs()
                / two_d.parameters as f64,
            bleu4_margin: two_d.mean_bleu4 - one_d.mean_bleu4,
            two_d,
            one_d,
        });
    }
    out.write_json(
        "compare.json",
        &serde_json::json!({ "tolerance": args.tolerance, "pairs": pairs }),
    )?;
    out.write("compare.csv", summary)?;
    out.write("curves.csv", curves)?;
    let timings = serde_json::Value::Object(timings);
    if !ctx.deterministic {
        out.write_json("timings.json", &timings)?;
    }
    Ok(Report {
        seed: args.optim.seed,
        timings: Some(timings),
        failure: None,
    })
}
