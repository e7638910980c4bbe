//! Small planted-rule datasets and the tiny gradient-check suite.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{MemeRecord, MemeSample, Sentiment, Task, TaskLabelSet};
use crate::embeddings::Vocab;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{corpus_vocab, init_params, ModelConfig, ModelParams, PreparedMeme};
use crate::tensor::Tensor;
use crate::visual_filter::FeatureMap;

const FILLER: [&str; 12] = [
    "the", "a", "cat", "when", "you", "monday", "dog", "me", "code", "coffee", "meme", "just",
];
const SENTIMENT_WORDS: [&str; 3] = ["joy", "meh", "grim"];
/// Keywords for intensity levels 1.. of each affect dimension.
const LEVEL_WORDS: [&[&str]; 4] = [
    &["haha", "lol", "rofl"],
    &["sure", "totally", "obviously"],
    &["rude", "nasty", "vile"],
    &["grind"],
];

#[derive(Debug, Clone)]
pub struct SyntheticMeme {
    pub sample: MemeSample,
    pub features: FeatureMap,
}

/// Sizes of a generated fixture.
#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub memes: usize,
    pub regions: usize,
    pub width: usize,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn for_config(cfg: &ModelConfig, seed: u64) -> Self {
        FixtureSpec {
            memes: 24,
            regions: cfg.regions,
            width: cfg.feature_dim(),
            seed,
        }
    }
}

/// Memes with 2–3 segments of filler words. The sentiment keyword and one
/// keyword per present affect (its level word) are planted in random
/// segments; sentiment is balanced across the set.
pub fn fixture(spec: FixtureSpec) -> Vec<SyntheticMeme> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.memes)
        .map(|i| {
            let sentiment = Sentiment::ALL[i % 3];
            let mut levels = [0u8; 4];
            for (a, words) in LEVEL_WORDS.iter().enumerate() {
                // roughly half the memes carry each affect
                if rng.random_bool(0.5) {
                    levels[a] = rng.random_range(1..=words.len()) as u8;
                }
            }
            let affect = levels.map(|l| u8::from(l > 0));
            let n_seg = rng.random_range(2..=3);
            let mut segments: Vec<Vec<&str>> = (0..n_seg)
                .map(|_| {
                    let n = rng.random_range(2..=4);
                    (0..n).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect()
                })
                .collect();
            let mut plant = |w: &'static str, rng: &mut ChaCha8Rng| {
                let s = rng.random_range(0..segments.len());
                let at = rng.random_range(0..=segments[s].len());
                segments[s].insert(at, w);
            };
            plant(SENTIMENT_WORDS[sentiment.index()], &mut rng);
            for (a, &l) in levels.iter().enumerate() {
                if l > 0 {
                    plant(LEVEL_WORDS[a][l as usize - 1], &mut rng);
                }
            }
            // f32 draws so the in-memory map equals what the MFM1 file stores
            let values = (0..spec.regions * spec.width).map(|_| f64::from(rng.random::<f32>())).collect();
            let features = FeatureMap::new(Tensor::matrix(spec.regions, spec.width, values).expect("finite"))
                .expect("valid feature map");
            let id = format!("syn{i:03}");
            let feature_path = format!("{id}.mfm");
            SyntheticMeme {
                sample: MemeSample {
                    resolved_feature_path: PathBuf::from(&feature_path),
                    feature_path,
                    id,
                    segments: segments.iter().map(|s| s.join(" ")).collect(),
                    labels: Some(TaskLabelSet {
                        sentiment,
                        affect,
                        levels,
                    }),
                },
                features,
            }
        })
        .collect()
}

pub fn samples(memes: &[SyntheticMeme]) -> Vec<MemeSample> {
    memes.iter().map(|m| m.sample.clone()).collect()
}

/// Builds a freshly initialised model whose vocabulary covers the fixture.
pub fn model_for(cfg: &ModelConfig, task: Task, memes: &[SyntheticMeme], seed: u64) -> Result<ModelParams> {
    init_params(cfg, task, &corpus_vocab(&samples(memes)), None, seed)
}

pub fn prepare(params: &mut ModelParams, memes: &[SyntheticMeme]) -> Result<Vec<PreparedMeme>> {
    memes
        .iter()
        .map(|m| params.prepare_with_features(&m.sample, m.features.clone()))
        .collect()
}

/// Writes `<dir>/<name>` (JSONL) and one `.mfm` file per meme beside it.
pub fn write_fixture(memes: &[SyntheticMeme], dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in memes {
        m.features.write(&dir.join(&m.sample.feature_path))?;
    }
    let path = dir.join(name);
    let records: Vec<MemeRecord> = memes.iter().map(|m| MemeRecord::from_sample(&m.sample)).collect();
    crate::data::write_records(&records, &path)?;
    Ok(path)
}

/// Smallest configuration that still exercises every module.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        lstm_hidden: 2,
        lstm_layers: 2,
        regions: 4,
        text_hops: 2,
        text_hidden: 3,
        visual_hops: 2,
        visual_hidden: 3,
        segment_hops: 2,
        segment_hidden: 3,
        tower: vec![3, 1],
        // larger than training init so no gradient entry sits at numerical noise
        init_std: 0.8,
        attention_penalty: 0.0,
    }
}

pub const GRADCHECK_STEP: f64 = 1e-4;

/// Central-difference check of every parameter of the tiny sentiment model on
/// one two-segment meme with at most three tokens per segment.
pub fn gradcheck_suite(seed: u64) -> Result<GradCheckReport> {
    gradcheck_suite_with(&gradcheck_config(), seed)
}

pub fn gradcheck_suite_with(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = ["joy cat me", "grim dog"];
    let vocab = Vocab::from_tokens(segments.iter().flat_map(|s| s.split(' ')));
    let mut params = init_params(cfg, Task::Sentiment, &vocab, None, seed)?;
    // head biases start at zero; perturb them so their gradients are generic
    let layout = params.layout()?;
    for h in &layout.heads {
        let b = params.store.get_mut(&h.bias)?;
        b.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let values = (0..cfg.regions * cfg.feature_dim()).map(|_| rng.random::<f64>()).collect();
    let features = FeatureMap::new(Tensor::matrix(cfg.regions, cfg.feature_dim(), values)?)?;
    let sample = MemeSample {
        id: "gradcheck".into(),
        segments: segments.iter().map(|s| s.to_string()).collect(),
        feature_path: String::new(),
        resolved_feature_path: PathBuf::new(),
        labels: Some(TaskLabelSet {
            sentiment: Sentiment::Neutral,
            affect: [0; 4],
            levels: [0; 4],
        }),
    };
    let meme = params.prepare_with_features(&sample, features)?;
    let labels = meme.labels.expect("labelled");
    let weights = crate::data::default_class_weights(Task::Sentiment);
    let layout = params.layout()?;
    let cfg = params.config.clone();
    grad_check(&params.store, GRADCHECK_STEP, |tape| {
        let out = crate::model::forward_with_layout(tape, &layout, &cfg, &meme)?;
        crate::model::compute_loss(tape, &out, &labels, Task::Sentiment, &weights, 0.0)
    })
}
