use clap::Args;
use rayon::prelude::*;
use rnn2ds::corpus::object_mask;
use rnn2ds::decoder::{DecodeMode, Generation};
use rnn2ds::interpret::{
    activated_region, attention_correctness, upsampled_channel, AssociationTable, GrayImage,
    TraceLevels, DEFAULT_LAMBDA,
};
use serde::{Deserialize, Serialize};

use super::{CheckpointArgs, VAL_CORPUS_SEED};
use crate::common::{parse_extent2, Outputs};
use crate::error::{CliError, Result};
use crate::{Ctx, Report};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[group(id = "words", required = true, multiple = false, args = ["word", "all_words"])]
pub struct InterpretArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    /// Word to analyze; repeat for several.
    #[arg(long)]
    pub word: Vec<String>,
    /// Every vocabulary word that appears in a generated caption.
    #[arg(long)]
    pub all_words: bool,
    /// Activated-region threshold as a fraction of the channel maximum.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Example index to map; repeat for several [default: the first --images].
    #[arg(long)]
    pub image: Vec<usize>,
    /// Number of leading examples mapped when no --image is given.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    /// Map resolution, HxW.
    #[arg(long, value_parser = parse_extent2, default_value = "64x64")]
    pub image_size: (usize, usize),
}

#[derive(Serialize)]
struct MapEntry {
    file: String,
    word: String,
    image: usize,
    id: String,
    channel: usize,
    /// One-based step the map is taken from.
    step: usize,
    /// Whether the caption contains the word; if not, the last step is used.
    word_in_caption: bool,
    threshold: f64,
    pixels: usize,
    /// Share of the channel's activation on objects the word names, for
    /// synthetic scenes containing such objects.
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_correctness: Option<f64>,
}

pub fn run(args: &InterpretArgs, _ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    if !(0.0..=1.0).contains(&args.lambda) {
        return Err(CliError::usage(format!(
            "lambda {} is not in [0, 1]",
            args.lambda
        )));
    }
    let loaded = args.input.load(VAL_CORPUS_SEED)?;
    let model = &loaded.model;
    if !model.is_2d() {
        return Err(CliError::usage(format!(
            "{} has a vector state; maps need a 2D state",
            model.config().cell.kind
        )));
    }
    let vocab = model.vocab();
    let records = &loaded.data.records;
    let steps = loaded.max_len + 1;
    let gens: Vec<Generation<f32>> = records
        .par_iter()
        .map(|r| model.generate(&r.features, DecodeMode::Greedy, steps))
        .collect::<std::result::Result<_, _>>()?;
    let levels: Vec<TraceLevels> = gens
        .iter()
        .map(|g| TraceLevels::from_trace(&g.trace, vocab.eos()))
        .collect::<std::result::Result<_, _>>()?;
    let ids: Option<Vec<usize>> = if args.all_words {
        None
    } else {
        Some(
            args.word
                .iter()
                .map(|w| {
                    vocab
                        .id(w)
                        .filter(|&i| !vocab.is_special(i))
                        .ok_or_else(|| CliError::usage(format!("{w:?} is not in the vocabulary")))
                })
                .collect::<Result<_>>()?,
        )
    };
    let table = AssociationTable::build(&levels, vocab, ids.as_deref())?;
    out.write("associations.json", table.to_json() + "\n")?;

    let images: Vec<usize> = if args.image.is_empty() {
        (0..args.images.min(records.len())).collect()
    } else {
        args.image.clone()
    };
    if let Some(&bad) = images.iter().find(|&&i| i >= records.len()) {
        return Err(CliError::usage(format!(
            "image {bad} out of range for {} examples",
            records.len()
        )));
    }
    let words: Vec<&str> = match &ids {
        Some(_) => args.word.iter().map(String::as_str).collect(),
        None => table.rows.keys().map(String::as_str).collect(),
    };
    let mut entries = Vec::new();
    for word in words {
        let row = &table.rows[word];
        let id = vocab.id(word).expect("table words are in the vocabulary");
        for &image in &images {
            let trace = &gens[image].trace;
            let first = levels[image].first_step(id);
            let step = first.unwrap_or(trace.len());
            let region = activated_region(trace, row.argmax, step, args.image_size, args.lambda)?;
            let file = format!("maps/{word}/{image:04}.pgm");
            let path = out.path(&file)?;
            GrayImage::from_mask(&region).write(&path)?;
            let attention = match &loaded.data.scenes {
                Some(scenes) => {
                    let scene = &scenes[image];
                    let mut mask = vec![false; args.image_size.0 * args.image_size.1];
                    let mut any = false;
                    for o in &scene.objects {
                        if o.category_word() == word || o.attribute_word() == word {
                            any = true;
                            for (m, hit) in mask.iter_mut().zip(object_mask(scene, o, args.image_size)) {
                                *m |= hit;
                            }
                        }
                    }
                    let mut map =
                        upsampled_channel(trace, row.argmax, step, args.image_size)?;
                    map.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    if any {
                        attention_correctness(&map, &mask).ok()
                    } else {
                        None
                    }
                }
                None => None,
            };
            entries.push(MapEntry {
                file,
                word: word.to_string(),
                image,
                id: records[image].id.clone(),
                channel: row.argmax,
                step,
                word_in_caption: first.is_some(),
                threshold: region.threshold,
                pixels: region.count(),
                attention_correctness: attention,
            });
        }
    }
    out.write_json(
        "regions.json",
        &serde_json::json!({ "lambda": args.lambda, "maps": entries }),
    )?;
    Ok(Report {
        seed: loaded.seed,
        timings: None,
        failure: None,
    })
}
