//! End-to-end network: per-segment encode → filter → attend → fuse, then
//! segment-level attention and one softmax head per task output.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{multihop_attend, redundancy_penalty, AttentionRole, MhaParams};
use crate::data::{MemeSample, Task, TaskLabelSet, TaskSpec};
use crate::embeddings::{oov_row, EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{atmf_fuse, AtmfParams};
use crate::metrics::{self, MetricsReport};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::{ParamStore, Tensor};
use crate::text_encoder::{bilstm_encode, LstmParams};
use crate::visual_filter::{image_encoding_filter, load_feature_map_with_extents, FeatureMap, FilterParams};

pub const EMBEDDING: &str = "embedding.weight";

/// Architecture sizes. Defaults are the full-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Units per LSTM direction; text and visual features are `2 ×` this wide.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Spatial regions per feature map.
    pub regions: usize,
    pub text_hops: usize,
    pub text_hidden: usize,
    pub visual_hops: usize,
    pub visual_hidden: usize,
    pub segment_hops: usize,
    pub segment_hidden: usize,
    pub tower: Vec<usize>,
    pub init_std: f64,
    /// Coefficient of the ‖AAᵀ − I‖² attention penalty; 0 disables it.
    pub attention_penalty: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 200,
            lstm_hidden: 256,
            lstm_layers: 2,
            regions: 49,
            text_hops: 30,
            text_hidden: 350,
            visual_hops: 30,
            visual_hidden: 350,
            segment_hops: 10,
            segment_hidden: 100,
            tower: vec![256, 64, 8, 1],
            init_std: 0.02,
            attention_penalty: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Width of the flattened segment-level representation fed to the heads.
    pub fn head_input(&self) -> usize {
        self.segment_hops * self.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("regions", self.regions),
            ("text_hops", self.text_hops),
            ("text_hidden", self.text_hidden),
            ("visual_hops", self.visual_hops),
            ("visual_hidden", self.visual_hidden),
            ("segment_hops", self.segment_hops),
            ("segment_hidden", self.segment_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.text_hops != self.visual_hops {
            return Err(Error::Config("text and visual hop counts must match for fusion".into()));
        }
        if self.tower.is_empty() || self.tower.contains(&0) || self.tower.last() != Some(&1) {
            return Err(Error::Config(format!("fusion tower {:?} must be positive and end in 1", self.tower)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if !(self.attention_penalty >= 0.0 && self.attention_penalty.is_finite()) {
            return Err(Error::Config("attention_penalty must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub name: String,
    pub classes: usize,
    pub weight: String,
    pub bias: String,
}

/// Parameter names of every module, derived from config and task.
#[derive(Debug, Clone)]
pub struct Layout {
    pub lstm: LstmParams,
    pub filter: FilterParams,
    pub text: MhaParams,
    pub visual: MhaParams,
    pub segment: MhaParams,
    pub atmf: AtmfParams,
    pub heads: Vec<HeadParams>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig, task: &TaskSpec) -> Result<Self> {
        Ok(Layout {
            lstm: LstmParams::named("lstm", cfg.lstm_hidden, cfg.lstm_layers),
            filter: FilterParams::named("filter"),
            text: MhaParams::named("mha", AttentionRole::Text, cfg.text_hops, cfg.text_hidden),
            visual: MhaParams::named("mha", AttentionRole::Visual, cfg.visual_hops, cfg.visual_hidden),
            segment: MhaParams::named("mha", AttentionRole::Segment, cfg.segment_hops, cfg.segment_hidden),
            atmf: AtmfParams::named("atmf", cfg.feature_dim(), &cfg.tower)?,
            heads: task
                .heads
                .iter()
                .map(|h| HeadParams {
                    name: h.name.clone(),
                    classes: h.classes,
                    weight: format!("head.{}.weight", h.name),
                    bias: format!("head.{}.bias", h.name),
                })
                .collect(),
        })
    }

    /// (name, rows, cols) of every tensor except the embedding, in registration order.
    pub fn shapes(&self, cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
        let f = cfg.feature_dim();
        let mut out = self.lstm.shapes(cfg.embed_dim);
        out.push((self.filter.w_b.clone(), f, f));
        for m in [&self.text, &self.visual, &self.segment] {
            out.push((m.w1.clone(), m.hidden, f));
            out.push((m.w2.clone(), m.hops, m.hidden));
        }
        out.extend(self.atmf.shapes(f));
        for h in &self.heads {
            out.push((h.weight.clone(), cfg.head_input(), h.classes));
            out.push((h.bias.clone(), 1, h.classes));
        }
        out
    }
}

/// Every learnable tensor of the network plus what is needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub task: TaskSpec,
    pub vocab: Vocab,
    pub oov_seed: u64,
    pub store: ParamStore,
}

/// A sample ready for the network: token ids per segment and its feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedMeme {
    pub id: String,
    pub token_ids: Vec<Vec<usize>>,
    pub features: FeatureMap,
    pub labels: Option<TaskLabelSet>,
}

/// Recorded outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// 1 × classes probability row per head.
    pub probs: Vec<Var>,
    pub segments: Vec<SegmentTrace>,
    /// segment_hops × l
    pub segment_attention: Var,
    /// l × f stacked fused segments
    pub stacked: Var,
    /// 1 × (segment_hops · f)
    pub flat: Var,
    /// Sum of attention penalties, present only when the penalty is on.
    pub penalty: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentTrace {
    pub h: Var,
    pub relevance: Var,
    pub word_attention: Var,
    pub filtered: Var,
    pub text_attention: Var,
    pub visual_attention: Var,
    pub m: Var,
    pub n: Var,
    pub modality_scores: Var,
    pub gamma: Var,
    pub x: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPrediction {
    pub head: String,
    pub probs: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemePrediction {
    pub id: String,
    pub heads: Vec<HeadPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAttention {
    /// text hops × tokens
    pub text_attention: Vec<Vec<f64>>,
    /// visual hops × regions
    pub visual_attention: Vec<Vec<f64>>,
    /// regions × tokens; each row is the word distribution for that region
    pub word_attention: Vec<Vec<f64>>,
    /// per-region relevance (cosine distance)
    pub relevance: Vec<f64>,
    pub s_t: f64,
    pub s_v: f64,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub id: String,
    pub segments: Vec<SegmentAttention>,
    /// segment hops × segments
    pub segment_attention: Vec<Vec<f64>>,
    pub prediction: MemePrediction,
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Collects every token of `samples` into a vocabulary, in first-occurrence order.
pub fn corpus_vocab(samples: &[MemeSample]) -> Vocab {
    let mut v = Vocab::new();
    for s in samples {
        for seg in s.tokens() {
            for t in &seg {
                v.add(t);
            }
        }
    }
    v
}

/// Draws every trainable tensor from N(0, init_std²), except forget-gate
/// biases (1.0) and head biases (0). Embedding rows come from `pretrained`
/// where available and from seeded per-token draws otherwise.
pub fn init_params(
    config: &ModelConfig,
    task: Task,
    vocab: &Vocab,
    pretrained: Option<&EmbeddingTable>,
    seed: u64,
) -> Result<ModelParams> {
    config.validate()?;
    let spec = task.spec();
    let layout = Layout::new(config, &spec)?;
    let mut store = ParamStore::new();
    let table = EmbeddingTable::for_vocab(vocab, pretrained, config.embed_dim, seed, config.init_std)?;
    store.insert(EMBEDDING, table.weight().clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let u = config.lstm_hidden;
    let head_biases: HashSet<&str> = layout.heads.iter().map(|h| h.bias.as_str()).collect();
    for (name, r, c) in layout.shapes(config) {
        let mut values: Vec<f64> = if head_biases.contains(name.as_str()) {
            vec![0.0; r * c]
        } else {
            (0..r * c).map(|_| normal.sample(&mut rng)).collect()
        };
        if name.starts_with("lstm.") && name.ends_with(".bias") {
            values[u..2 * u].iter_mut().for_each(|v| *v = 1.0);
        }
        store.insert(name, Tensor::matrix(r, c, values)?)?;
    }
    Ok(ModelParams {
        config: config.clone(),
        task: spec,
        vocab: vocab.clone(),
        oov_seed: seed,
        store,
    })
}

impl ModelParams {
    pub fn layout(&self) -> Result<Layout> {
        Layout::new(&self.config, &self.task)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Adds `token` with embedding `row` unless it is already known.
    pub fn add_token(&mut self, token: &str, row: &[f64]) -> Result<usize> {
        if let Some(i) = self.vocab.get(token) {
            return Ok(i);
        }
        self.store.get_mut(EMBEDDING)?.push_row(row)?;
        Ok(self.vocab.insert(token))
    }

    /// Token ids for `tokens`, adding seeded OOV rows for unseen tokens.
    pub fn token_ids(&mut self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| match self.vocab.get(t) {
                Some(i) => Ok(i),
                None => {
                    let row = oov_row(self.oov_seed, t, self.config.embed_dim, self.config.init_std);
                    self.add_token(t, &row)
                }
            })
            .collect()
    }

    /// Tokenises segments and loads the feature map at the configured extents.
    pub fn prepare(&mut self, sample: &MemeSample) -> Result<PreparedMeme> {
        let features =
            load_feature_map_with_extents(&sample.resolved_feature_path, self.config.regions, self.config.feature_dim())?;
        self.prepare_with_features(sample, features)
    }

    pub fn prepare_with_features(&mut self, sample: &MemeSample, features: FeatureMap) -> Result<PreparedMeme> {
        let token_ids = sample
            .tokens()
            .iter()
            .map(|seg| self.token_ids(seg))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedMeme {
            id: sample.id.clone(),
            token_ids,
            features,
            labels: sample.labels,
        })
    }

    pub fn prepare_all(&mut self, samples: &[MemeSample]) -> Result<Vec<PreparedMeme>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    /// Records the full forward pass for one meme on `tape`.
    pub fn forward(&self, tape: &mut Tape, meme: &PreparedMeme) -> Result<ForwardOutput> {
        forward_with_layout(tape, &self.layout()?, &self.config, meme)
    }

    pub fn predict(&self, meme: &PreparedMeme) -> Result<MemePrediction> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, meme)?;
        Ok(self.read_prediction(&tape, &out, &meme.id))
    }

    fn read_prediction(&self, tape: &Tape, out: &ForwardOutput, id: &str) -> MemePrediction {
        MemePrediction {
            id: id.to_string(),
            heads: self
                .task
                .heads
                .iter()
                .zip(&out.probs)
                .map(|(h, &p)| {
                    let probs = tape.value(p).to_vec();
                    HeadPrediction {
                        head: h.name.clone(),
                        label: argmax(&probs),
                        probs,
                    }
                })
                .collect(),
        }
    }

    /// Per-level attention matrices and fusion weights for inspection.
    pub fn export_attention(&self, meme: &PreparedMeme) -> Result<AttentionExport> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, meme)?;
        let segments = out
            .segments
            .iter()
            .map(|s| {
                let scores = tape.value(s.modality_scores);
                SegmentAttention {
                    text_attention: tape.to_rows(s.text_attention),
                    visual_attention: tape.to_rows(s.visual_attention),
                    word_attention: tape.to_rows(s.word_attention),
                    relevance: tape.value(s.relevance).to_vec(),
                    s_t: scores[0],
                    s_v: scores[1],
                    gamma: tape.value(s.gamma).to_vec(),
                }
            })
            .collect();
        Ok(AttentionExport {
            id: meme.id.clone(),
            segments,
            segment_attention: tape.to_rows(out.segment_attention),
            prediction: self.read_prediction(&tape, &out, &meme.id),
        })
    }

    /// Loss and gradients for one labelled meme.
    pub fn sample_gradients(&self, meme: &PreparedMeme, weights: &[Vec<f64>]) -> Result<SampleStep> {
        let labels = meme
            .labels
            .ok_or_else(|| Error::Validation {
                id: meme.id.clone(),
                msg: "training sample has no labels".into(),
            })?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, meme)?;
        let loss = compute_loss(&mut tape, &out, &labels, self.task.task, weights, self.config.attention_penalty)?;
        let value = tape.scalar(loss)?;
        let grads = tape.backward(loss)?;
        let predicted = out.probs.iter().map(|&p| argmax(tape.value(p))).collect();
        Ok(SampleStep {
            loss: value,
            grads,
            predicted,
        })
    }

    pub fn evaluate(&self, memes: &[PreparedMeme]) -> Result<MetricsReport> {
        let heads = self.task.heads.len();
        let mut pred = vec![Vec::with_capacity(memes.len()); heads];
        let mut gold = vec![Vec::with_capacity(memes.len()); heads];
        for m in memes {
            let labels = m.labels.ok_or_else(|| Error::Validation {
                id: m.id.clone(),
                msg: "evaluation sample has no labels".into(),
            })?;
            let p = self.predict(m)?;
            for (h, hp) in p.heads.iter().enumerate() {
                pred[h].push(hp.label);
                gold[h].push(labels.gold(self.task.task, h));
            }
        }
        metrics::report(&self.task, &pred, &gold)
    }
}

pub struct SampleStep {
    pub loss: f64,
    pub grads: crate::tape::Gradients,
    pub predicted: Vec<usize>,
}

/// Forward pass against an explicit layout.
pub fn forward_with_layout(tape: &mut Tape, layout: &Layout, config: &ModelConfig, meme: &PreparedMeme) -> Result<ForwardOutput> {
    if meme.token_ids.is_empty() {
        return Err(Error::Contract(format!("meme `{}` has no text segments", meme.id)));
    }
    let (regions, width) = meme.features.tensor().dims2()?;
    if width != config.feature_dim() {
        return Err(Error::dim(
            "forward",
            format!("feature width {width}, model expects {}", config.feature_dim()),
        ));
    }
    let embedding = tape.param(EMBEDDING)?;
    let features = tape.constant(regions, width, meme.features.tensor().values().to_vec())?;
    let penalty_on = config.attention_penalty > 0.0;
    let mut penalties = Vec::new();

    let mut segments = Vec::with_capacity(meme.token_ids.len());
    for ids in &meme.token_ids {
        if ids.is_empty() {
            return Err(Error::Contract(format!("meme `{}` has an empty segment", meme.id)));
        }
        let e = tape.gather(embedding, ids)?;
        let h = bilstm_encode(tape, e, &layout.lstm)?;
        let filtered = image_encoding_filter(tape, h, features, &layout.filter)?;
        let text = multihop_attend(tape, h, &layout.text)?;
        let visual = multihop_attend(tape, filtered.u, &layout.visual)?;
        let fused = atmf_fuse(tape, text.features, visual.features, &layout.atmf)?;
        if penalty_on {
            penalties.push(redundancy_penalty(tape, text.weights)?);
            penalties.push(redundancy_penalty(tape, visual.weights)?);
        }
        segments.push(SegmentTrace {
            h,
            relevance: filtered.relevance,
            word_attention: filtered.word_attention,
            filtered: filtered.u,
            text_attention: text.weights,
            visual_attention: visual.weights,
            m: text.features,
            n: visual.features,
            modality_scores: fused.modality_scores,
            gamma: fused.gamma,
            x: fused.x,
        });
    }
    let xs: Vec<Var> = segments.iter().map(|s| s.x).collect();
    let stacked = tape.concat(&xs, Axis::Rows)?;
    let seg = multihop_attend(tape, stacked, &layout.segment)?;
    if penalty_on {
        penalties.push(redundancy_penalty(tape, seg.weights)?);
    }
    let flat = tape.flatten(seg.features)?;
    let probs = layout
        .heads
        .iter()
        .map(|h| {
            let w = tape.param(&h.weight)?;
            let b = tape.param(&h.bias)?;
            let logits = tape.matmul(flat, w)?;
            let logits = tape.add_row(logits, b)?;
            tape.softmax_rows(logits)
        })
        .collect::<Result<Vec<_>>>()?;
    let penalty = match penalties.split_first() {
        Some((&first, rest)) => {
            let mut total = first;
            for &p in rest {
                total = tape.add(total, p)?;
            }
            Some(total)
        }
        None => None,
    };
    Ok(ForwardOutput {
        probs,
        segments,
        segment_attention: seg.weights,
        stacked,
        flat,
        penalty,
    })
}

/// Σ over heads of `−w[gold] · ln Z[gold]`, plus the scaled attention penalty when present.
pub fn compute_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    gold: &TaskLabelSet,
    task: Task,
    weights: &[Vec<f64>],
    penalty_coef: f64,
) -> Result<Var> {
    if weights.len() != out.probs.len() {
        return Err(Error::Config(format!("{} weight vectors for {} heads", weights.len(), out.probs.len())));
    }
    let mut total: Option<Var> = None;
    for (h, (&p, w)) in out.probs.iter().zip(weights).enumerate() {
        let g = gold.gold(task, h);
        let weight = *w
            .get(g)
            .ok_or_else(|| Error::Config(format!("no class weight for class {g} of head {h}")))?;
        let nll = tape.weighted_nll(p, g, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    let mut loss = total.ok_or_else(|| Error::Config("task has no heads".into()))?;
    if let Some(pen) = out.penalty {
        let scaled = tape.scale(pen, penalty_coef)?;
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}
