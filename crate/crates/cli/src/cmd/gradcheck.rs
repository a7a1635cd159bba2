use clap::Args;
use rnn2ds::cells::{CellConfig, CellKind, Shape};
use rnn2ds::decoder::{gradient_check, DecoderModel, ModelConfig, Pooling};
use rnn2ds::tensor::Tensor;
use rnn2ds::training::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::common::Outputs;
use crate::error::{CliError, Result};
use crate::{Ctx, Report};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "rnn2ds")]
    pub cell: CellKind,
    /// [default: 8 for vector cells, 4x5x5 for 2D cells]
    #[arg(long)]
    pub state: Option<Shape>,
    #[arg(long, default_value = "mean")]
    pub pooling: Pooling,
    /// Decoding steps unrolled, including the final <eos>.
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Base step; the estimate also uses half of it.
    #[arg(long, default_value_t = 2e-3)]
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 60)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Visual extent used by the check: more channels than the state so the
/// projection is exercised, same spatial extent.
pub fn check_visual(state: Shape) -> (usize, usize, usize) {
    match state {
        Shape::Map(c, h, w) => (c + 2, h, w),
        Shape::Vector(_) => (6, 3, 3),
    }
}

fn pattern(shape: (usize, usize, usize), seed: u64) -> Tensor<f64> {
    let n = shape.0 * shape.1 * shape.2;
    let data = (0..n)
        .map(|i| {
            let k = (i as u64 + 1).wrapping_mul(2_654_435_761).wrapping_add(seed) % 1000;
            k as f64 / 1000.0 - 0.5
        })
        .collect();
    Tensor::new(&[shape.0, shape.1, shape.2], data).expect("shape matches data")
}

pub fn run(args: &GradcheckArgs, _ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    if args.steps == 0 {
        return Err(CliError::usage("at least one step is needed"));
    }
    let state = args.state.unwrap_or(if args.cell.is_2d() {
        Shape::Map(4, 5, 5)
    } else {
        Shape::Vector(8)
    });
    let cell = CellConfig::new(args.cell, state);
    cell.validate()?;
    let vocab = Vocabulary::build(["red circle top left", "blue square bottom right"], 1)?;
    let visual = check_visual(state);
    let config = ModelConfig {
        cell,
        vocab_size: vocab.len(),
        visual,
        pooling: args.pooling,
    };
    let eos = vocab.eos();
    let words = vocab.words().len();
    let model = DecoderModel::<f64>::new(config, vocab, args.seed)?;
    let mut tokens: Vec<usize> = (0..args.steps - 1).map(|i| i % words).collect();
    tokens.push(eos);
    let report = gradient_check(
        &model,
        &pattern(visual, args.seed),
        &tokens,
        args.epsilon,
        args.samples,
        args.seed,
    )?;
    let pass = report.max_rel_error < args.tolerance;
    for (name, err) in &report.per_param {
        println!("{name:>20}  {err:.3e}");
    }
    println!(
        "{} {}: max relative error {:.3e} over {} coordinates, {} skipped at kinks ({})",
        args.cell,
        state,
        report.max_rel_error,
        report.coordinates_checked,
        report.coordinates_skipped,
        if pass { "pass" } else { "FAIL" }
    );
    out.write_json(
        "gradcheck.json",
        &serde_json::json!({
            "cell": args.cell.slug(),
            "state": state.to_string(),
            "tolerance": args.tolerance,
            "pass": pass,
            "max_rel_error": report.max_rel_error,
            "coordinates_checked": report.coordinates_checked,
            "coordinates_skipped": report.coordinates_skipped,
            "per_param": report.per_param,
        }),
    )?;
    Ok(Report {
        seed: args.seed,
        timings: None,
        failure: (!pass).then(|| {
            format!(
                "max relative error {:.3e} exceeds {:.1e}",
                report.max_rel_error, args.tolerance
            )
        }),
    })
}
