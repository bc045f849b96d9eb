//! One training run: data, temporal stage, finetuning and evaluation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tempora_core::data::{build_sample, generate_corpus, read_corpus, EventVocab, Scheme, VideoClip};
use tempora_core::checkpoint::Checkpoint;
use tempora_core::interface::VisualInput;
use tempora_core::moe::{load_stats, RouterDecision};
use tempora_core::model::{Example, Vlm};
use tempora_core::optim::AdamWState;
use tempora_core::pretrain::{pretrain_self_attention, PretrainConfig};
use tempora_core::tokenizer::Tokenizer;

use crate::config::{FrameSampling, RecipeConfig};
use crate::eval::{evaluate_model, QaScore};
use crate::tasks::{build_suite, vocabulary_texts, QaItem};
use crate::RecipeError;

/// SplitMix64 finalizer used to derive independent stream seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x7e3a_u64, |acc, &p| mix(acc ^ mix(p)))
}

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const TRAIN_CORPUS: u64 = 1;
    pub const EVAL_CORPUS: u64 = 2;
    pub const TEMPORAL_CORPUS: u64 = 3;
    pub const TRAIN_QA: u64 = 4;
    pub const EVAL_QA: u64 = 5;
    pub const MODEL: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const PRETRAIN: u64 = 8;
    pub const STAGE_TEMPORAL: u64 = 10;
    pub const STAGE_FINETUNE: u64 = 11;
}

/// Tokenizer covering every string the recipe can produce for `vocab`.
pub fn recipe_tokenizer(vocab: &EventVocab) -> Tokenizer {
    let mut texts = vocabulary_texts(vocab.captions());
    let caps: Vec<&str> = vocab.captions().iter().map(String::as_str).collect();
    texts.push(tempora_core::data::global_caption(&caps));
    for c in vocab.captions() {
        texts.push(tempora_core::data::moment_grounding_prompt(c));
        texts.push(format!("{c}, from 1 to 2."));
    }
    texts.push(tempora_core::data::VC_PROMPT.into());
    texts.push(tempora_core::data::DC_PROMPT.into());
    texts.push(tempora_core::data::moment_caption_prompt(1, 2));
    texts.push(tempora_core::data::grounding_target(1, 2));
    Tokenizer::fit(&texts)
}

/// Corpora, QA sets and tokenizer for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: EventVocab,
    pub tokenizer: Tokenizer,
    pub train_clips: Vec<VideoClip>,
    pub eval_clips: Vec<VideoClip>,
    pub temporal_clips: Vec<VideoClip>,
    pub train_qa: Vec<QaItem>,
    pub eval_qa: Vec<QaItem>,
}

pub fn prepare(cfg: &RecipeConfig, seed: u64) -> Result<Prepared, RecipeError> {
    let vocab = EventVocab::new(
        tempora_core::data::DEFAULT_CAPTIONS.iter().map(|s| s.to_string()).collect(),
        cfg.data.render,
    )?;
    let suite = cfg.data.suite;
    let load = |path: &Option<std::path::PathBuf>, n: usize, tag: u64| -> Result<Vec<VideoClip>, RecipeError> {
        match path {
            Some(p) => Ok(read_corpus(p, &vocab)?),
            None => Ok(generate_corpus(derive_seed(&[seed, tag]), &suite.corpus_spec(n), &vocab)?),
        }
    };
    let train_clips = load(&cfg.data.train_corpus, cfg.data.train_clips, stream::TRAIN_CORPUS)?;
    let eval_clips = load(&cfg.data.eval_corpus, cfg.data.eval_clips, stream::EVAL_CORPUS)?;
    let temporal_clips = if cfg.step >= 2 {
        load(&None, cfg.data.temporal_clips, stream::TEMPORAL_CORPUS)?
    } else {
        Vec::new()
    };
    let train_qa = build_suite(suite, &train_clips, derive_seed(&[seed, stream::TRAIN_QA]));
    let eval_qa = build_suite(suite, &eval_clips, derive_seed(&[seed, stream::EVAL_QA]));
    Ok(Prepared {
        tokenizer: recipe_tokenizer(&vocab),
        vocab,
        train_clips,
        eval_clips,
        temporal_clips,
        train_qa,
        eval_qa,
    })
}

/// Frames of `clip` as the model sees them under `sampling`.
pub fn visual_input(clip: &VideoClip, sampling: FrameSampling, seed: u64, split: u64, index: usize) -> Result<VisualInput, RecipeError> {
    match sampling {
        FrameSampling::All => Ok(VisualInput::full(clip.frames.clone())),
        FrameSampling::Random { frames } => {
            let f = clip.num_frames();
            if frames >= f {
                return Ok(VisualInput::full(clip.frames.clone()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::SAMPLING, split, index as u64]));
            let mut idx = rand::seq::index::sample(&mut rng, f, frames).into_vec();
            idx.sort_unstable();
            Ok(VisualInput::subset(&clip.frames, &idx)?)
        }
    }
}

pub fn qa_examples(
    items: &[QaItem],
    clips: &[VideoClip],
    tok: &Tokenizer,
    sampling: FrameSampling,
    seed: u64,
    split: u64,
) -> Result<Vec<Example>, RecipeError> {
    let visuals = clips
        .iter()
        .enumerate()
        .map(|(i, c)| visual_input(c, sampling, seed, split, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(items
        .iter()
        .map(|q| Example {
            visual: visuals[q.clip].clone(),
            prompt: tok.encode(&q.question),
            target: tok.encode(&q.answer),
        })
        .collect())
}

/// Scheme-formatted examples: VC and DC once per clip, MC and MG per event.
pub fn temporal_examples(
    clips: &[VideoClip],
    schemes: &[Scheme],
    tok: &Tokenizer,
    sampling: FrameSampling,
    seed: u64,
) -> Result<Vec<Example>, RecipeError> {
    let mut out = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let visual = visual_input(clip, sampling, seed, stream::TEMPORAL_CORPUS, i)?;
        for &scheme in schemes {
            let events: Vec<Option<usize>> = if scheme.needs_event() {
                (0..clip.events.len()).map(Some).collect()
            } else {
                vec![None]
            };
            for e in events {
                let s = build_sample(clip, scheme, e)?;
                out.push(Example {
                    visual: visual.clone(),
                    prompt: tok.encode(&s.prompt),
                    target: tok.encode(&s.target),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
}

/// Routing diagnostics over the last logged training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub fractions: Vec<f64>,
    pub mean_prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub seed: u64,
    pub step: u8,
    pub suite: String,
    pub num_questions: usize,
    /// Exact-match accuracy over all questions.
    pub accuracy: f64,
    pub per_kind: BTreeMap<String, f64>,
    /// Position-wise token accuracy of caption answers.
    pub caption_token_accuracy: f64,
    pub loss_curve: Vec<LossPoint>,
    pub final_loss: f64,
    pub routing: Option<RoutingReport>,
    pub parameters: usize,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    /// The report with timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

pub struct RunOutput {
    pub report: EvalReport,
    pub model: Vlm,
    pub optimizer: AdamWState,
    pub tokenizer: Tokenizer,
}

/// Trains `model` for `steps` steps from `start`. The batch of step `t` is
/// drawn from an RNG seeded by `(seed, stage, t)`, so resuming at any step
/// replays the same batches.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut Vlm,
    opt: &mut AdamWState,
    cfg: &RecipeConfig,
    examples: &[Example],
    seed: u64,
    stage: u64,
    start: usize,
    steps: usize,
    curve: &mut Vec<LossPoint>,
    routing: &mut Vec<RouterDecision>,
) -> Result<Vec<f64>, RecipeError> {
    if examples.is_empty() {
        return Err(RecipeError::Invariant("training stage has no examples".into()));
    }
    let label = if stage == stream::STAGE_TEMPORAL { "temporal" } else { "finetune" };
    let b = cfg.train.batch_size.min(examples.len());
    let total = if stage == stream::STAGE_TEMPORAL { cfg.train.temporal_steps } else { cfg.train.finetune_steps };
    let mut losses = Vec::with_capacity(steps);
    for t in start..start + steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stage, t as u64]));
        let batch: Vec<&Example> = (0..b).map(|_| &examples[rng.random_range(0..examples.len())]).collect();
        let optimizer = cfg.train.schedule.apply(&cfg.optimizer, t, total);
        let out = model.train_step(&batch, opt, &optimizer, cfg.train.max_grad_norm)?;
        if t % cfg.train.log_every == 0 || t + 1 == start + steps {
            curve.push(LossPoint {
                stage: label.into(),
                step: t,
                loss: out.loss,
            });
        }
        if t + 10 >= start + steps {
            routing.extend(out.routing);
        }
        losses.push(out.loss);
    }
    Ok(losses)
}

/// Runs the full recipe for one seed.
pub fn run(cfg: &RecipeConfig, seed: u64) -> Result<RunOutput, RecipeError> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare(cfg, seed)?;
    let tok = &data.tokenizer;
    let mut model = Vlm::<f32>::new(&cfg.vlm_config(), tok.vocab_size(), derive_seed(&[seed, stream::MODEL]))?;
    if cfg.interface.pretrained_init {
        let texts: Vec<Vec<usize>> = vocabulary_texts(data.vocab.captions())
            .iter()
            .chain(data.vocab.captions())
            .map(|t| tok.encode(t))
            .collect();
        let prefixes = model.interface.self_attention_prefixes();
        let block = cfg.vlm_config().dims().block(false);
        let pcfg = PretrainConfig {
            steps: cfg.train.pretrain_steps,
            seed: derive_seed(&[seed, stream::PRETRAIN]),
            optimizer: cfg.optimizer,
            ..Default::default()
        };
        pretrain_self_attention(&mut model.store, &prefixes, &block, &texts, tok.vocab_size(), &pcfg)?;
    }
    let mut opt = AdamWState::new(&model.store);
    let mut curve = Vec::new();
    let mut routing = Vec::new();
    let mut last = f64::NAN;
    if cfg.step >= 2 && cfg.train.temporal_steps > 0 {
        let ex = temporal_examples(&data.temporal_clips, &cfg.schemes, tok, cfg.data.sampling, seed)?;
        let l = train_stage(&mut model, &mut opt, cfg, &ex, seed, stream::STAGE_TEMPORAL, 0, cfg.train.temporal_steps, &mut curve, &mut routing)?;
        last = *l.last().expect("positive step count");
    }
    if cfg.train.finetune_steps > 0 {
        let ex = qa_examples(&data.train_qa, &data.train_clips, tok, cfg.data.sampling, seed, stream::TRAIN_CORPUS)?;
        routing.clear();
        let l = train_stage(&mut model, &mut opt, cfg, &ex, seed, stream::STAGE_FINETUNE, 0, cfg.train.finetune_steps, &mut curve, &mut routing)?;
        last = *l.last().expect("positive step count");
    }
    let eval_ex = qa_examples(&data.eval_qa, &data.eval_clips, tok, cfg.data.sampling, seed, stream::EVAL_CORPUS)?;
    let QaScore {
        accuracy,
        per_kind,
        caption_token_accuracy,
    } = evaluate_model(&model, tok, &data.eval_qa, &eval_ex, cfg.train.max_answer_tokens)?;
    let routing = if routing.is_empty() {
        None
    } else {
        let s = load_stats(&routing)?;
        Some(RoutingReport {
            fractions: s.fractions,
            mean_prob: s.mean_prob,
        })
    };
    let report = EvalReport {
        name: cfg.name.clone(),
        seed,
        step: cfg.step,
        suite: cfg.data.suite.to_string(),
        num_questions: data.eval_qa.len(),
        accuracy,
        per_kind,
        caption_token_accuracy,
        loss_curve: curve,
        final_loss: last,
        routing,
        parameters: model.store.num_scalars(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        report,
        model,
        optimizer: opt,
        tokenizer: data.tokenizer,
    })
}

/// Evaluates a saved model on the eval split of `(cfg, seed)`.
pub fn evaluate_checkpoint(cfg: &RecipeConfig, seed: u64, ck: &Checkpoint) -> Result<EvalReport, RecipeError> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare(cfg, seed)?;
    let tok = &data.tokenizer;
    let mut model = Vlm::<f32>::new(&cfg.vlm_config(), tok.vocab_size(), derive_seed(&[seed, stream::MODEL]))?;
    model.restore(ck)?;
    let eval_ex = qa_examples(&data.eval_qa, &data.eval_clips, tok, cfg.data.sampling, seed, stream::EVAL_CORPUS)?;
    let score = evaluate_model(&model, tok, &data.eval_qa, &eval_ex, cfg.train.max_answer_tokens)?;
    Ok(EvalReport {
        name: cfg.name.clone(),
        seed,
        step: cfg.step,
        suite: cfg.data.suite.to_string(),
        num_questions: data.eval_qa.len(),
        accuracy: score.accuracy,
        per_kind: score.per_kind,
        caption_token_accuracy: score.caption_token_accuracy,
        loss_curve: Vec::new(),
        final_loss: f64::NAN,
        routing: None,
        parameters: model.store.num_scalars(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Runs one seed and writes its artifacts under `dir`: `seed{n}.ckpt`,
/// `tokenizer.json`, and one appended line of `reports.jsonl`.
pub fn run_and_save(cfg: &RecipeConfig, seed: u64, dir: &Path) -> Result<RunOutput, RecipeError> {
    let out = run(cfg, seed)?;
    std::fs::create_dir_all(dir)?;
    out.model
        .checkpoint(Some(&out.optimizer))
        .write(dir.join(format!("seed{seed}.ckpt")))?;
    std::fs::write(dir.join("tokenizer.json"), out.tokenizer.to_json())?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    crate::report::append_reports(&dir.join("reports.jsonl"), std::slice::from_ref(&out.report))?;
    Ok(out)
}
