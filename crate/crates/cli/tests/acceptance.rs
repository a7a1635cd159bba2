//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and asserts. Tests are serialized so their runtime
//! budgets are measured without contention; the task-competence model is
//! trained once and reused by the intervention, deactivation and region
//! criteria.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rnn2ds::cells::{
    count_parameters, match_vector_config, step_gru_2d, CellConfig, CellKind, Shape, VisualInput,
};
use rnn2ds::checkpoint;
use rnn2ds::corpus::{
    encode_scene, synthetic_corpus, FeatureRecord, SceneObject, SceneSpec, SynthConfig,
    CATEGORIES,
};
use rnn2ds::decoder::{
    gradient_check, DecodeMode, DecoderModel, Generation, Intervention, ModelConfig, Pooling,
};
use rnn2ds::interpret::{
    activated_region, association_score, attention_correctness, most_relevant_channel,
    AssociationTable, TraceLevels,
};
use rnn2ds::tensor::{conv2d, mean_pool_spatial, softmax, subregion_mean_pool, Region, Tensor};
use rnn2ds::training::{
    bleu4, evaluate, rouge_l, tokenize, train_with, TrainConfig, Vocabulary,
};

// Task-competence setup, calibrated once and frozen.
const C5_SCENES: usize = 2000;
const C5_HELD_OUT: usize = 200;
const C5_CORPUS_SEED: u64 = 1;
const C5_HELD_OUT_SEED: u64 = 2;
const C5_MODEL_SEED: u64 = 0;
const C5_LR: f64 = 0.004;
const C5_EPOCHS: usize = 50;
const C5_LR2: f64 = 0.001;
const C5_STAGE2_EPOCHS: usize = 10;
const C5_BATCH: usize = 32;
const C5_MAX_LEN: usize = 25;
const C5_CLIP: f64 = 5.0;
const C5_BLEU_THRESHOLD: f64 = 0.85;
const C5_BUDGET_SECONDS: f64 = 15.0 * 60.0;

const C7_SCENES: usize = 50;
const C7_THRESHOLD: f64 = 0.70;
const C8_WORDS: usize = 5;
const C8_ARGMAX_THRESHOLD: f64 = 0.50;
const C8_RANDOM_THRESHOLD: f64 = 0.10;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n}: {verdict} {detail}");
}

/// Small deterministic generator for test data.
struct Lcg(u64);

impl Lcg {
    fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        self.0 >> 11
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 42) as f64
    }

    fn symmetric(&mut self, scale: f64) -> f64 {
        (self.unit() * 2.0 - 1.0) * scale
    }

    fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.symmetric(scale))
    }
}

fn vocabulary(records: &[FeatureRecord]) -> Vocabulary {
    Vocabulary::build(
        records
            .iter()
            .flat_map(|r| r.captions.iter().map(String::as_str)),
        1,
    )
    .unwrap()
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_correctness() {
    let _g = serial();
    let started = Instant::now();
    let vocab = Vocabulary::build(["a red circle in the top left", "a blue star"], 1).unwrap();
    let mut worst = 0.0f64;
    let mut enough = true;
    let mut lines = Vec::new();
    for kind in CellKind::ALL {
        let state = if kind.is_2d() {
            Shape::Map(4, 5, 5)
        } else {
            Shape::Vector(8)
        };
        let visual = if kind.is_2d() { (6, 5, 5) } else { (6, 3, 3) };
        let config = ModelConfig {
            cell: CellConfig::new(kind, state),
            vocab_size: vocab.len(),
            visual,
            pooling: Pooling::Mean,
        };
        let model = DecoderModel::<f64>::new(config, vocab.clone(), 7).unwrap();
        let mut rng = Lcg(kind as u64 + 11);
        let v = rng.tensor(&[visual.0, visual.1, visual.2], 1.0);
        let tokens = [2, 4, vocab.eos()];
        let rep = gradient_check(&model, &v, &tokens, 2e-3, 60, 3).unwrap();
        worst = worst.max(rep.max_rel_error);
        enough &= rep.coordinates_checked >= 200;
        lines.push(format!(
            "{}={:.1e} ({} coords, {} at kinks)",
            kind.slug(),
            rep.max_rel_error,
            rep.coordinates_checked,
            rep.coordinates_skipped
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && enough && secs < 60.0;
    report(1, pass, &format!("max rel err {worst:.2e} [{}] in {secs:.1}s", lines.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_algebraic_invariants() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = Lcg(2);

    let cfg = CellConfig::new(CellKind::Gru2d, Shape::Map(4, 5, 5));
    let specs = rnn2ds::cells::param_specs(&cfg, 10, (4, 5, 5));
    let mut params = rnn2ds::cells::init_params::<f64>(&specs, 5);
    for term in ["h", "x", "v"] {
        let t = params.get_mut(&format!("cell.z.{term}.bias")).unwrap();
        t.data_mut().iter_mut().for_each(|b| *b = 100.0);
    }
    let mut gru_err = 0.0f64;
    for _ in 0..20 {
        let h = rng.tensor(&[4, 5, 5], 2.0);
        let x = rng.tensor(&[4, 5, 5], 2.0);
        let v = rng.tensor(&[4, 5, 5], 2.0);
        let next = step_gru_2d(&cfg, &params, &h, &x, &v).unwrap();
        for (a, b) in next.data().iter().zip(h.data()) {
            gru_err = gru_err.max((a - b).abs());
        }
    }

    let mut pool_exact = true;
    for _ in 0..200 {
        let (c, h, w) = (1 + rng.below(5), 1 + rng.below(8), 1 + rng.below(8));
        let m = rng.tensor(&[c, h, w], 10.0);
        let full = subregion_mean_pool(&m, Region::full(h, w)).unwrap();
        pool_exact &= full == mean_pool_spatial(&m).unwrap();
    }

    let mut softmax_err = 0.0f64;
    for _ in 0..10_000 {
        let n = 1 + rng.below(64);
        let scale = [1.0, 10.0, 100.0][rng.below(3)];
        let p = softmax(&rng.tensor(&[n], scale)).unwrap();
        softmax_err = softmax_err.max((p.data().iter().sum::<f64>() - 1.0).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = gru_err <= 1e-6 && pool_exact && softmax_err <= 1e-6;
    report(
        2,
        pass,
        &format!(
            "gru z=1 err {gru_err:.1e}, full-region pool exact {pool_exact}, softmax err {softmax_err:.1e} in {secs:.1}s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn brute_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let s = input.shape();
    let k = kernel.shape();
    let (ci, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let (co, kh, kw) = (k[0], k[2] as isize, k[3] as isize);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let oh = (h + 2 * ph - kh) / stride as isize + 1;
    let ow = (w + 2 * pw - kw) / stride as isize + 1;
    let mut out = Vec::new();
    for o in 0..co {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.data()[o];
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = y * stride as isize + dy - ph;
                            let ix = x * stride as isize + dx - pw;
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                acc += input.get(&[c, iy as usize, ix as usize]).unwrap()
                                    * kernel.get(&[o, c, dy as usize, dx as usize]).unwrap();
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn brute_association(levels: &[Vec<Vec<f64>>], words: &[Vec<usize>], word: usize, channels: usize) -> Vec<f64> {
    let mut acc = vec![0.0; channels];
    let mut n = 0.0;
    for (lv, ws) in levels.iter().zip(words) {
        let Some(pos) = ws.iter().position(|&x| x == word) else {
            continue;
        };
        let t = pos + 1;
        let len = ws.len();
        n += 1.0;
        for (c, a) in acc.iter_mut().enumerate() {
            let before: f64 = (0..t).map(|i| lv[i][c]).sum::<f64>() / t as f64;
            let after = if t == len {
                0.0
            } else {
                (t..len).map(|i| lv[i][c]).sum::<f64>() / (len - t) as f64
            };
            *a += before - after;
        }
    }
    acc.into_iter().map(|a| a / n).collect()
}

fn ngrams(s: &[usize], n: usize) -> HashMap<Vec<usize>, usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for i in 0..=s.len() - n {
            *m.entry(s[i..i + n].to_vec()).or_insert(0) += 1;
        }
    }
    m
}

fn brute_bleu(cands: &[Vec<usize>], refs: &[Vec<Vec<usize>>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = ngrams(c, n);
            for (g, &cnt) in &cg {
                let max_ref = rs
                    .iter()
                    .map(|r| ngrams(r, n).get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched += cnt.min(max_ref);
            }
            total += c.len().saturating_sub(n - 1);
        }
        let p = if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
        log_p += p.max(1e-9).ln() / 4.0;
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let mut best = rs[0].len();
            for r in rs {
                let d = r.len().abs_diff(c.len());
                let bd = best.abs_diff(c.len());
                if d < bd || (d == bd && r.len() < best) {
                    best = r.len();
                }
            }
            best
        })
        .sum();
    let bp = if c_len > r_len || c_len == 0 {
        if c_len == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * log_p.exp()
}

fn brute_lcs(a: &[usize], b: &[usize]) -> usize {
    // Every subsequence of the shorter side, longest first.
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let n = short.len();
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
        let mut it = long.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = len;
        }
    }
    best
}

fn brute_rouge(cands: &[Vec<usize>], refs: &[Vec<Vec<usize>>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut best = 0.0f64;
        for r in rs {
            let l = brute_lcs(c, r) as f64;
            if l == 0.0 {
                continue;
            }
            let p = l / c.len() as f64;
            let q = l / r.len() as f64;
            best = best.max((1.0 + beta2) * p * q / (q + beta2 * p));
        }
        sum += best;
    }
    sum / cands.len() as f64
}

#[test]
fn criterion_03_oracle_equivalence() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = Lcg(3);
    const CASES: usize = 120;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };

    for _ in 0..CASES {
        let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
        let (h, w) = (1 + rng.below(7), 1 + rng.below(7));
        let (kh, kw) = (1 + 2 * rng.below(3), 1 + 2 * rng.below(3));
        let stride = 1 + rng.below(2);
        let x = rng.tensor(&[ci, h, w], 1.0);
        let k = rng.tensor(&[co, ci, kh, kw], 1.0);
        let b = rng.tensor(&[co], 1.0);
        let fast = conv2d(&x, &k, &b, stride).unwrap();
        let slow = brute_conv(&x, &k, &b, stride);
        assert_eq!(fast.len(), slow.len());
        for (a, s) in fast.data().iter().zip(&slow) {
            note("conv2d", if (a - s).abs() < 1e-12 { 0.0 } else { relative(*a, *s) });
        }
    }

    for _ in 0..CASES {
        let channels = 1 + rng.below(5);
        let n_traces = 1 + rng.below(5);
        let mut levels = Vec::new();
        let mut words = Vec::new();
        for _ in 0..n_traces {
            let len = 1 + rng.below(8);
            levels.push((0..len).map(|_| (0..channels).map(|_| rng.symmetric(5.0)).collect()).collect::<Vec<Vec<f64>>>());
            words.push((0..len).map(|_| rng.below(4)).collect::<Vec<usize>>());
        }
        let traces: Vec<TraceLevels> = levels
            .iter()
            .zip(&words)
            .map(|(l, w)| TraceLevels::new(l.clone(), w.clone()).unwrap())
            .collect();
        let word = words[0][0];
        let fast = association_score(&traces, word).unwrap();
        let slow = brute_association(&levels, &words, word, channels);
        for (a, s) in fast.iter().zip(&slow) {
            note("association_score", if (a - s).abs() < 1e-12 { 0.0 } else { relative(*a, *s) });
        }
    }

    for _ in 0..CASES {
        let (h, w) = (1 + rng.below(10), 1 + rng.below(10));
        let map = Tensor::from_fn(&[h, w], |_| rng.unit() + 0.01);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.below(2) == 1).collect();
        let fast = attention_correctness(&map, &mask).unwrap();
        let total: f64 = map.data().iter().sum();
        let mut inside = 0.0;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                inside += map.data()[i];
            }
        }
        let slow = inside / total;
        note("attention_correctness", if (fast - slow).abs() < 1e-15 { 0.0 } else { relative(fast, slow) });
    }

    let sentence = |rng: &mut Lcg, vocab: usize| -> Vec<usize> {
        let n = 1 + rng.below(8);
        (0..n).map(|_| rng.below(vocab)).collect()
    };
    for _ in 0..CASES {
        let items = 1 + rng.below(4);
        let vocab = 2 + rng.below(4);
        let cands: Vec<Vec<usize>> = (0..items).map(|_| sentence(&mut rng, vocab)).collect();
        let refs: Vec<Vec<Vec<usize>>> = (0..items)
            .map(|_| (0..1 + rng.below(3)).map(|_| sentence(&mut rng, vocab)).collect())
            .collect();
        let fast = bleu4(&cands, &refs).unwrap();
        let slow = brute_bleu(&cands, &refs);
        note("bleu4", if (fast - slow).abs() < 1e-15 { 0.0 } else { relative(fast, slow) });
        let fast = rouge_l(&cands, &refs).unwrap();
        let slow = brute_rouge(&cands, &refs);
        note("rouge_l", if (fast - slow).abs() < 1e-15 { 0.0 } else { relative(fast, slow) });
    }

    let secs = started.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let pass = max <= 1e-6 && secs < 60.0;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    report(3, pass, &format!("{CASES} cases each, [{}] in {secs:.1}s", detail.join(" ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_overfit_smoke() {
    let _g = serial();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let started = Instant::now();
    let mut synth = SynthConfig::new(10, 1);
    synth.captions_per_scene = 1;
    let corpus = synthetic_corpus(&synth).unwrap();
    let vocab = vocabulary(&corpus.records);
    let config = ModelConfig {
        cell: CellConfig::new(CellKind::Rnn2d, Shape::Map(8, 7, 7)),
        vocab_size: vocab.len(),
        visual: (16, 7, 7),
        pooling: Pooling::Mean,
    };
    let model = DecoderModel::<f32>::new(config, vocab, 1).unwrap();
    let tc = TrainConfig {
        lr: 0.01,
        stage1_epochs: 500,
        batch_size: 10,
        ..Default::default()
    };
    let out = pool
        .install(|| train_with(model, &corpus.records, &[], &tc, |_| {}))
        .unwrap();
    let secs = started.elapsed().as_secs_f64();
    let reached = out.log.iter().find(|r| r.train_nll < 0.05).map(|r| r.epoch);
    let last = out.log.last().unwrap().train_nll;
    let pass = reached.is_some() && secs < 120.0;
    report(
        4,
        pass,
        &format!("NLL < 0.05 first at epoch {reached:?}, final {last:.4}, {secs:.1}s on one thread"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5, 7, 8, 10

struct Trained {
    model: DecoderModel<f32>,
    held_out: Vec<FeatureRecord>,
    seconds: f64,
    bleu4: f64,
    rouge_l: f64,
    best_epoch: usize,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn c5_train_config() -> TrainConfig {
    TrainConfig {
        lr: C5_LR,
        stage1_epochs: C5_EPOCHS,
        lr_stage2: C5_LR2,
        stage2_epochs: C5_STAGE2_EPOCHS,
        batch_size: C5_BATCH,
        max_len: C5_MAX_LEN,
        seed: C5_MODEL_SEED,
        clip_norm: Some(C5_CLIP),
        ..Default::default()
    }
}

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let started = Instant::now();
        let mut synth = SynthConfig::new(C5_SCENES, C5_CORPUS_SEED);
        synth.captions_per_scene = 1;
        synth.fixed_templates = true;
        let train = synthetic_corpus(&synth).unwrap().records;
        let held_out = synthetic_corpus(&SynthConfig::new(C5_HELD_OUT, C5_HELD_OUT_SEED))
            .unwrap()
            .records;
        let vocab = vocabulary(&train);
        let config = ModelConfig {
            cell: CellConfig::new(CellKind::Rnn2d, Shape::Map(16, 7, 7)),
            vocab_size: vocab.len(),
            visual: (16, 7, 7),
            pooling: Pooling::Mean,
        };
        let model = DecoderModel::<f32>::new(config, vocab, C5_MODEL_SEED).unwrap();
        let out = train_with(model, &train, &[], &c5_train_config(), |_| {}).unwrap();
        let (bleu4, rouge_l) = evaluate(&out.model, &held_out, C5_MAX_LEN).unwrap();
        Trained {
            model: out.model,
            held_out,
            seconds: started.elapsed().as_secs_f64(),
            bleu4,
            rouge_l,
            best_epoch: out.best_epoch,
        }
    })
}

#[test]
fn criterion_05_task_competence() {
    let _g = serial();
    let t = trained();
    let pass = t.bleu4 >= C5_BLEU_THRESHOLD && t.seconds < C5_BUDGET_SECONDS;
    report(
        5,
        pass,
        &format!(
            "held-out BLEU-4 {:.4} (threshold {C5_BLEU_THRESHOLD}), ROUGE-L {:.4}, epoch {}, {:.0}s",
            t.bleu4, t.rouge_l, t.best_epoch, t.seconds
        ),
    );
    assert!(pass);
}

fn caption_words(model: &DecoderModel<f32>, g: &Generation<f32>) -> HashSet<String> {
    tokenize(&model.vocab().decode(&g.tokens)).into_iter().collect()
}

#[test]
fn criterion_07_subregion_intervention() {
    let _g = serial();
    let t = trained();
    let model = &t.model;
    let mut rng = Lcg(7);
    let mut hits = 0;
    for i in 0..C7_SCENES {
        let vertical = rng.below(2) == 0;
        let a_first = rng.below(2) == 0;
        let (ca, cb) = {
            let a = rng.below(CATEGORIES.len());
            let b = (a + 1 + rng.below(CATEGORIES.len() - 1)) % CATEGORIES.len();
            (a, b)
        };
        let (ia, ib) = if a_first { (0, 2) } else { (2, 0) };
        let (oa, ob) = (rng.below(3), rng.below(3));
        let place = |side: usize, other: usize| if vertical { (side, other) } else { (other, side) };
        let (ra, cola) = place(ia, oa);
        let (rb, colb) = place(ib, ob);
        let objects = vec![
            SceneObject { category: ca, attribute: rng.below(6), row: ra, col: cola },
            SceneObject { category: cb, attribute: rng.below(6), row: rb, col: colb },
        ];
        let scene = SceneSpec::new(3, 3, objects, 10_000 + i as u64).unwrap();
        let v = encode_scene(&scene, (16, 7, 7)).unwrap();
        let region = match (vertical, a_first) {
            (true, true) => Region::new(1, 1, 7, 3),
            (true, false) => Region::new(1, 5, 7, 7),
            (false, true) => Region::new(1, 1, 3, 7),
            (false, false) => Region::new(5, 1, 7, 7),
        };
        let g = model
            .generate_with(&v, DecodeMode::Greedy, C5_MAX_LEN + 1, Some(Intervention::Region(region)))
            .unwrap();
        let words = caption_words(model, &g);
        if words.contains(CATEGORIES[ca]) && !words.contains(CATEGORIES[cb]) {
            hits += 1;
        }
    }
    let rate = hits as f64 / C7_SCENES as f64;
    let pass = rate >= C7_THRESHOLD;
    report(
        7,
        pass,
        &format!("A kept and B omitted in {hits}/{C7_SCENES} scenes ({rate:.2}, threshold {C7_THRESHOLD})"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_channel_deactivation() {
    let _g = serial();
    let t = trained();
    let model = &t.model;
    let vocab = model.vocab();
    let steps = C5_MAX_LEN + 1;
    let gens: Vec<Generation<f32>> = t
        .held_out
        .iter()
        .map(|r| model.generate(&r.features, DecodeMode::Greedy, steps).unwrap())
        .collect();
    let levels: Vec<TraceLevels> = gens
        .iter()
        .map(|g| TraceLevels::from_trace(&g.trace, vocab.eos()).unwrap())
        .collect();
    let mut freq: Vec<(usize, &str)> = CATEGORIES
        .iter()
        .map(|&w| (gens.iter().filter(|g| caption_words(model, g).contains(w)).count(), w))
        .collect();
    freq.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    let channels = model.config().cell.state.channels();
    let mut rng = Lcg(8);
    let (mut arg_removed, mut rand_removed, mut support) = (0, 0, 0);
    let mut per_word = Vec::new();
    for &(_, word) in freq.iter().take(C8_WORDS) {
        let id = vocab.id(word).unwrap();
        let table = AssociationTable::build(&levels, vocab, Some(&[id])).unwrap();
        let c_star = table.get(word).unwrap().argmax;
        assert_eq!(c_star, most_relevant_channel(&table.get(word).unwrap().scores).unwrap());
        let (mut a, mut r, mut n) = (0, 0, 0);
        for (rec, g) in t.held_out.iter().zip(&gens) {
            if !caption_words(model, g).contains(word) {
                continue;
            }
            n += 1;
            let off = |c: usize| {
                let g = model
                    .generate_with_channel_deactivated(&rec.features, c, steps)
                    .unwrap();
                !caption_words(model, &g).contains(word)
            };
            let c_rand = (c_star + 1 + rng.below(channels - 1)) % channels;
            a += off(c_star) as usize;
            r += off(c_rand) as usize;
        }
        per_word.push(format!("{word}:c{c_star}={a}/{n},random={r}/{n}"));
        arg_removed += a;
        rand_removed += r;
        support += n;
    }
    let arg_rate = arg_removed as f64 / support as f64;
    let rand_rate = rand_removed as f64 / support as f64;
    let pass = arg_rate >= C8_ARGMAX_THRESHOLD && rand_rate < C8_RANDOM_THRESHOLD;
    report(
        8,
        pass,
        &format!(
            "argmax channel removes word {arg_rate:.2} (>= {C8_ARGMAX_THRESHOLD}), random channel {rand_rate:.2} (< {C8_RANDOM_THRESHOLD}) [{}]",
            per_word.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_monotone_regions() {
    let _g = serial();
    let t = trained();
    let model = &t.model;
    let channels = model.config().cell.state.channels();
    let mut rng = Lcg(10);
    let mut checked = 0;
    let mut ok = true;
    while checked < 100 {
        let rec = &t.held_out[rng.below(t.held_out.len())];
        let g = model.generate(&rec.features, DecodeMode::Greedy, C5_MAX_LEN + 1).unwrap();
        let c = rng.below(channels);
        let step = 1 + rng.below(g.trace.len());
        let extent = (32 + rng.below(32), 32 + rng.below(32));
        let m = |l: f64| activated_region(&g.trace, c, step, extent, l).unwrap();
        let (hi, mid, lo) = (m(0.4), m(0.2), m(f64::MIN_POSITIVE));
        ok &= hi.is_subset_of(&mid) && mid.is_subset_of(&lo);
        checked += 1;
    }
    report(10, ok, &format!("mask(0.4) ⊆ mask(0.2) ⊆ mask(0+) on {checked} (channel, step) pairs"));
    assert!(ok);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_two_d_beats_vector_baseline() {
    let _g = serial();
    let started = Instant::now();
    let mut synth = SynthConfig::new(C5_SCENES, C6_CORPUS_SEED);
    synth.captions_per_scene = 1;
    synth.fixed_templates = true;
    let train = synthetic_corpus(&synth).unwrap().records;
    let test = synthetic_corpus(&SynthConfig::new(C5_HELD_OUT, C6_TEST_SEED)).unwrap().records;
    let vocab = vocabulary(&train);
    let visual = (16, 7, 7);
    let mut all_ok = true;
    let mut lines = Vec::new();
    for c in [8, 16] {
        let two = CellConfig::new(CellKind::Rnn2d, Shape::Map(c, 7, 7));
        let target = count_parameters(&two, vocab.len(), visual).total;
        let one = match_vector_config(CellKind::Lstm1d, target, vocab.len(), visual, VisualInput::Pool, 0.01)
            .unwrap();
        let n1 = count_parameters(&one, vocab.len(), visual).total;
        assert!((n1 as f64 - target as f64).abs() <= 0.01 * target as f64);
        let mut means = Vec::new();
        for cell in [&two, &one] {
            let mut scores = Vec::new();
            for seed in 0..3u64 {
                let config = ModelConfig {
                    cell: cell.clone(),
                    vocab_size: vocab.len(),
                    visual,
                    pooling: Pooling::Mean,
                };
                let model = DecoderModel::<f32>::new(config, vocab.clone(), seed).unwrap();
                let tc = TrainConfig {
                    seed,
                    ..c5_train_config()
                };
                let out = train_with(model, &train, &[], &tc, |_| {}).unwrap();
                scores.push(evaluate(&out.model, &test, C5_MAX_LEN).unwrap().0);
            }
            means.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
        let ok = means[0] > means[1];
        all_ok &= ok;
        lines.push(format!(
            "{c}x7x7 ({target} params) {:.4} vs lstm1ds L={} Lx={} ({n1}) {:.4}, margin {:+.4}",
            means[0],
            one.state,
            one.embedding,
            means[1],
            means[0] - means[1]
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = all_ok && secs < 90.0 * 60.0;
    report(6, pass, &format!("{} in {secs:.0}s", lines.join("; ")));
    assert!(pass);
}

// Same training recipe as criterion 5, fresh corpora.
const C6_CORPUS_SEED: u64 = 21;
const C6_TEST_SEED: u64 = 22;

// ---------------------------------------------------------------- 9

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rnn2ds"))
        .args(args)
        .output()
        .expect("cli runs")
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn criterion_09_determinism_and_persistence() {
    let _g = serial();
    let started = Instant::now();
    let t = trained_small();
    let bytes = checkpoint::encode(&t, 9, None);
    let (back, meta) = checkpoint::decode(&bytes).unwrap();
    let mut bit_exact = checkpoint::encode(&back, meta.seed, None) == bytes;
    for (name, p) in t.params().iter() {
        let q = back.params().get(name).unwrap();
        bit_exact &= p.shape() == q.shape()
            && p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        let train = run_cli(&[
            "--deterministic", "--out-dir", o, "train", "--cell", "rnn2ds", "--state", "4x7x7",
            "--corpus", "synth:24", "--val", "synth:6", "--epochs", "2", "--lr", "0.01",
            "--batch-size", "8", "--threshold", "1", "--seed", "5", "--quiet",
        ]);
        assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
        let train_manifest = read(&out.join("manifest.json"));
        let cap_dir = out.join("caption");
        let model = out.join("model.c2ds");
        let cap = run_cli(&[
            "--deterministic", "--out-dir", cap_dir.to_str().unwrap(), "caption",
            "--checkpoint", model.to_str().unwrap(), "--features", "synth:8",
        ]);
        assert!(cap.status.success(), "{}", String::from_utf8_lossy(&cap.stderr));
        runs.push([
            read(&model),
            train_manifest,
            read(&cap_dir.join("captions.jsonl")),
            read(&cap_dir.join("manifest.json")),
        ]);
    }
    let identical = runs[0] == runs[1];
    let secs = started.elapsed().as_secs_f64();
    let pass = bit_exact && identical;
    report(
        9,
        pass,
        &format!("checkpoint round-trip bit-exact {bit_exact}, deterministic reruns byte-identical {identical} in {secs:.1}s"),
    );
    assert!(pass);
}

fn trained_small() -> DecoderModel<f32> {
    let mut synth = SynthConfig::new(8, 4);
    synth.captions_per_scene = 1;
    let records = synthetic_corpus(&synth).unwrap().records;
    let vocab = vocabulary(&records);
    let config = ModelConfig {
        cell: CellConfig::new(CellKind::Lstm2d, Shape::Map(4, 7, 7)),
        vocab_size: vocab.len(),
        visual: (16, 7, 7),
        pooling: Pooling::Max,
    };
    let model = DecoderModel::<f32>::new(config, vocab, 3).unwrap();
    let tc = TrainConfig {
        lr: 0.01,
        stage1_epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    train_with(model, &records, &[], &tc, |_| {}).unwrap().model
}
