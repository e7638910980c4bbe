//! Naive loop oracles and random instance builders shared by the integration tests.
#![allow(dead_code)]

use memefuse_core::data::{MemeSample, Sentiment, Task, TaskLabelSet};
use memefuse_core::embeddings::Vocab;
use memefuse_core::model::{init_params, ModelConfig, ModelParams, PreparedMeme};
use memefuse_core::tensor::{ParamStore, Tensor};
use memefuse_core::visual_filter::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(store: &ParamStore, name: &str) -> Mat {
    store.get(name).unwrap().to_rows()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(lo..hi)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

// ── per-module oracles ──────────────────────────────────────────────────

/// One LSTM direction, gate by gate, scalar by scalar.
pub fn lstm_direction(x: &Mat, w_ih: &Mat, w_hh: &Mat, b: &[f64], u: usize, reverse: bool) -> Mat {
    let n = x.len();
    let mut h = vec![0.0; u];
    let mut c = vec![0.0; u];
    let mut out = vec![vec![0.0; u]; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let pre = |col: usize, h: &[f64]| {
            let mut s = b[col];
            for (k, xv) in x[t].iter().enumerate() {
                s += xv * w_ih[k][col];
            }
            for (k, hv) in h.iter().enumerate() {
                s += hv * w_hh[k][col];
            }
            s
        };
        let mut nh = vec![0.0; u];
        let mut nc = vec![0.0; u];
        for j in 0..u {
            let i_g = sigmoid(pre(j, &h));
            let f_g = sigmoid(pre(u + j, &h));
            let g_g = pre(2 * u + j, &h).tanh();
            let o_g = sigmoid(pre(3 * u + j, &h));
            nc[j] = f_g * c[j] + i_g * g_g;
            nh[j] = o_g * nc[j].tanh();
        }
        h = nh;
        c = nc;
        out[t] = h.clone();
    }
    out
}

pub fn bilstm(store: &ParamStore, prefix: &str, layers: usize, u: usize, e: &Mat) -> Mat {
    let mut x = e.clone();
    for l in 0..layers {
        let dir = |d: &str, reverse: bool| {
            let p = format!("{prefix}.l{l}.{d}");
            lstm_direction(
                &x,
                &rows(store, &format!("{p}.w_ih")),
                &rows(store, &format!("{p}.w_hh")),
                &rows(store, &format!("{p}.bias"))[0],
                u,
                reverse,
            )
        };
        let f = dir("fwd", false);
        let b = dir("bwd", true);
        x = f.iter().zip(&b).map(|(a, c)| a.iter().chain(c).cloned().collect()).collect();
    }
    x
}

pub struct FilterOracle {
    pub u: Mat,
    pub relevance: Vec<f64>,
    /// m × n
    pub alpha: Mat,
}

/// Explicit sums over words i and regions j, one cosine per region.
pub fn filter(w_b: &Mat, h: &Mat, f: &Mat) -> FilterOracle {
    let (n, m, d) = (h.len(), f.len(), f[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += h[i][a] * w_b[a][b] * f[j][b];
                }
            }
            c[i][j] = s.tanh();
        }
    }
    let mut alpha = vec![vec![0.0; n]; m];
    let mut relevance = vec![0.0; m];
    let mut u = vec![vec![0.0; d]; m];
    for j in 0..m {
        let z: f64 = (0..n).map(|i| c[i][j].exp()).sum();
        for i in 0..n {
            alpha[j][i] = c[i][j].exp() / z;
        }
        let a_h: Vec<f64> = (0..d).map(|k| (0..n).map(|i| alpha[j][i] * h[i][k]).sum()).collect();
        let dot: f64 = (0..d).map(|k| f[j][k] * a_h[k]).sum();
        let nf = f[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        let na = a_h.iter().map(|v| v * v).sum::<f64>().sqrt();
        relevance[j] = if nf * na < 1e-12 { 1.0 } else { 1.0 - dot / (nf * na) };
        for k in 0..d {
            u[j][k] = relevance[j] * f[j][k];
        }
    }
    FilterOracle { u, relevance, alpha }
}

/// Returns (A: hops × rows, M: hops × width).
pub fn mha(w1: &Mat, w2: &Mat, x: &Mat) -> (Mat, Mat) {
    let (r, d) = (x.len(), x[0].len());
    let hidden = w1.len();
    let act: Mat = (0..hidden)
        .map(|j| (0..r).map(|t| (0..d).map(|k| w1[j][k] * x[t][k]).sum::<f64>().tanh()).collect())
        .collect();
    let a: Mat = w2
        .iter()
        .map(|w| {
            let logits: Vec<f64> = (0..r).map(|t| (0..hidden).map(|j| w[j] * act[j][t]).sum()).collect();
            softmax(&logits)
        })
        .collect();
    let m = a
        .iter()
        .map(|ar| (0..d).map(|k| (0..r).map(|t| ar[t] * x[t][k]).sum()).collect())
        .collect();
    (a, m)
}

pub struct AtmfOracle {
    pub x: Vec<f64>,
    pub scores: [f64; 2],
    pub gamma: Vec<f64>,
}

fn tower(store: &ParamStore, prefix: &str, widths: &[usize], input: &[f64]) -> f64 {
    let mut h = input.to_vec();
    for (i, &w) in widths.iter().enumerate() {
        let weight = rows(store, &format!("{prefix}.tower.{i}.weight"));
        let last = i + 1 == widths.len();
        let bias = if last { vec![0.0; w] } else { rows(store, &format!("{prefix}.tower.{i}.bias"))[0].clone() };
        h = (0..w)
            .map(|o| {
                let s = bias[o] + h.iter().enumerate().map(|(k, v)| v * weight[k][o]).sum::<f64>();
                if last {
                    s
                } else {
                    s.tanh()
                }
            })
            .collect();
    }
    h[0]
}

pub fn atmf(store: &ParamStore, prefix: &str, widths: &[usize], m: &Mat, n: &Mat) -> AtmfOracle {
    let (k, d) = (m.len(), m[0].len());
    let mean = |x: &Mat| -> Vec<f64> { (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / k as f64).collect() };
    let z_t = tower(store, prefix, widths, &mean(m));
    let z_v = tower(store, prefix, widths, &mean(n));
    let s = softmax(&[z_t, z_v]);
    let mut q: Mat = m.iter().map(|r| r.iter().map(|v| (1.0 + s[0]) * v).collect()).collect();
    q.extend(n.iter().map(|r| r.iter().map(|v| (1.0 + s[1]) * v).collect()));
    let w_proj = rows(store, &format!("{prefix}.w_proj"));
    let w_score = rows(store, &format!("{prefix}.w_score"));
    let logits: Vec<f64> = q
        .iter()
        .map(|row| {
            (0..d)
                .map(|a| (0..d).map(|b| row[b] * w_proj[a][b]).sum::<f64>().tanh() * w_score[a][0])
                .sum()
        })
        .collect();
    let gamma = softmax(&logits);
    let x = (0..d).map(|c| (0..2 * k).map(|r| gamma[r] * q[r][c]).sum()).collect();
    AtmfOracle {
        x,
        scores: [s[0], s[1]],
        gamma,
    }
}

/// Full network as a composition of the loop oracles; returns head probabilities.
pub fn forward(p: &ModelParams, meme: &PreparedMeme) -> Mat {
    let cfg = &p.config;
    let s = &p.store;
    let emb = rows(s, "embedding.weight");
    let f = meme.features.tensor().to_rows();
    let fused: Mat = meme
        .token_ids
        .iter()
        .map(|ids| {
            let e: Mat = ids.iter().map(|&i| emb[i].clone()).collect();
            let h = bilstm(s, "lstm", cfg.lstm_layers, cfg.lstm_hidden, &e);
            let filt = filter(&rows(s, "filter.w_b"), &h, &f);
            let (_, m) = mha(&rows(s, "mha.text.w1"), &rows(s, "mha.text.w2"), &h);
            let (_, n) = mha(&rows(s, "mha.visual.w1"), &rows(s, "mha.visual.w2"), &filt.u);
            atmf(s, "atmf", &cfg.tower, &m, &n).x
        })
        .collect();
    let (_, seg) = mha(&rows(s, "mha.segment.w1"), &rows(s, "mha.segment.w2"), &fused);
    let flat: Vec<f64> = seg.into_iter().flatten().collect();
    p.task
        .heads
        .iter()
        .map(|h| {
            let w = rows(s, &format!("head.{}.weight", h.name));
            let b = &rows(s, &format!("head.{}.bias", h.name))[0];
            let z: Vec<f64> = (0..h.classes)
                .map(|c| b[c] + flat.iter().enumerate().map(|(i, v)| v * w[i][c]).sum::<f64>())
                .collect();
            softmax(&z)
        })
        .collect()
}

// ── random instances ────────────────────────────────────────────────────

pub fn tiny_config() -> ModelConfig {
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
        tower: vec![3, 2, 1],
        init_std: 0.5,
        attention_penalty: 0.0,
    }
}

/// Scaled-down network used for the overfit experiments.
pub fn overfit_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        lstm_hidden: 8,
        lstm_layers: 2,
        regions: 8,
        text_hops: 4,
        text_hidden: 16,
        visual_hops: 4,
        visual_hidden: 16,
        segment_hops: 2,
        segment_hidden: 8,
        tower: vec![8, 4, 1],
        init_std: 0.1,
        attention_penalty: 0.0,
    }
}

pub const WORDS: [&str; 6] = ["cat", "dog", "smile", "grim", "monday", "!"];

fn labels(rng: &mut ChaCha8Rng) -> TaskLabelSet {
    let mut levels = [0u8; 4];
    for (a, l) in levels.iter_mut().enumerate() {
        *l = rng.random_range(0..TaskLabelSet::LEVEL_CLASSES[a]) as u8;
    }
    TaskLabelSet {
        sentiment: Sentiment::ALL[rng.random_range(0..3)],
        affect: levels.map(|l| u8::from(l > 0)),
        levels,
    }
}

/// Model with every tensor (head biases included) redrawn uniformly so no
/// structural zeros hide mistakes.
pub fn random_model(seed: u64, task: Task, cfg: &ModelConfig) -> ModelParams {
    let mut p = init_params(cfg, task, &Vocab::from_tokens(WORDS), None, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let names: Vec<String> = p.store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = p.store.get_mut(&n).unwrap();
        t.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    p
}

pub fn random_meme(rng: &mut ChaCha8Rng, p: &mut ModelParams, max_segments: usize) -> PreparedMeme {
    let l = rng.random_range(1..=max_segments);
    let segments: Vec<String> = (0..l)
        .map(|_| {
            let n = rng.random_range(1..=3);
            (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let (r, w) = (p.config.regions, p.config.feature_dim());
    let features = FeatureMap::new(tensor(&random_mat(rng, r, w, 0.0, 1.0))).unwrap();
    let sample = MemeSample {
        id: format!("r{}", rng.random::<u32>()),
        segments,
        feature_path: String::new(),
        resolved_feature_path: PathBuf::new(),
        labels: Some(labels(rng)),
    };
    p.prepare_with_features(&sample, features).unwrap()
}

// ── metrics oracle ──────────────────────────────────────────────────────

/// Confusion matrix → precision/recall per class → F1 (0 when undefined).
pub fn confusion_f1(pred: &[usize], gold: &[usize], classes: usize) -> (f64, f64) {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &g) in pred.iter().zip(gold) {
        cm[g][p] += 1;
    }
    let f1 = |tp: f64, predicted: f64, actual: f64| {
        let prec = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let rec = if actual > 0.0 { tp / actual } else { 0.0 };
        if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        }
    };
    let mut macro_sum = 0.0;
    let (mut tp_all, mut pred_all, mut act_all) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = cm[c][c] as f64;
        let predicted = (0..classes).map(|g| cm[g][c]).sum::<usize>() as f64;
        let actual = cm[c].iter().sum::<usize>() as f64;
        macro_sum += f1(tp, predicted, actual);
        tp_all += tp;
        pred_all += predicted;
        act_all += actual;
    }
    (macro_sum / classes as f64, f1(tp_all, pred_all, act_all))
}

// ── tape vs oracle on one random instance ───────────────────────────────

use memefuse_core::attention::{multihop_attend, AttentionRole, MhaParams};
use memefuse_core::fusion::{atmf_fuse, AtmfParams};
use memefuse_core::tape::Tape;
use memefuse_core::text_encoder::{bilstm_encode, LstmParams};
use memefuse_core::visual_filter::{image_encoding_filter, FilterParams};

/// Largest deviation between tape and oracle for each module, in the order
/// lstm, filter, mha, atmf, forward.
pub fn oracle_deviations(seed: u64) -> [f64; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let mut p = random_model(seed, Task::Affect, &cfg);
    let meme = random_meme(&mut rng, &mut p, 3);
    let s = &p.store;
    let d = cfg.feature_dim();

    let e = random_mat(&mut rng, 3, cfg.embed_dim, -1.0, 1.0);
    let mut t = Tape::new(s);
    let ev = t.leaf(&tensor(&e)).unwrap();
    let h = bilstm_encode(&mut t, ev, &LstmParams::named("lstm", cfg.lstm_hidden, cfg.lstm_layers)).unwrap();
    let lstm_dev = max_abs_diff(&t.to_rows(h), &bilstm(s, "lstm", cfg.lstm_layers, cfg.lstm_hidden, &e));

    let h_m = random_mat(&mut rng, 3, d, -1.0, 1.0);
    let f_m = random_mat(&mut rng, 4, d, 0.0, 1.0);
    let mut t = Tape::new(s);
    let hv = t.leaf(&tensor(&h_m)).unwrap();
    let fv = t.leaf(&tensor(&f_m)).unwrap();
    let out = image_encoding_filter(&mut t, hv, fv, &FilterParams::named("filter")).unwrap();
    let o = filter(&rows(s, "filter.w_b"), &h_m, &f_m);
    let filter_dev = max_abs_diff(&t.to_rows(out.u), &o.u)
        .max(max_abs_diff(&t.to_rows(out.word_attention), &o.alpha))
        .max(max_abs_diff(&t.to_rows(out.relevance), &o.relevance.iter().map(|&r| vec![r]).collect()));

    let x = random_mat(&mut rng, 4, d, -1.0, 1.0);
    let mut t = Tape::new(s);
    let xv = t.leaf(&tensor(&x)).unwrap();
    let att = multihop_attend(&mut t, xv, &MhaParams::named("mha", AttentionRole::Text, cfg.text_hops, cfg.text_hidden)).unwrap();
    let (a, m) = mha(&rows(s, "mha.text.w1"), &rows(s, "mha.text.w2"), &x);
    let mha_dev = max_abs_diff(&t.to_rows(att.weights), &a).max(max_abs_diff(&t.to_rows(att.features), &m));

    let mm = random_mat(&mut rng, cfg.text_hops, d, -1.0, 1.0);
    let nn = random_mat(&mut rng, cfg.text_hops, d, -1.0, 1.0);
    let mut t = Tape::new(s);
    let mv = t.leaf(&tensor(&mm)).unwrap();
    let nv = t.leaf(&tensor(&nn)).unwrap();
    let fused = atmf_fuse(&mut t, mv, nv, &AtmfParams::named("atmf", d, &cfg.tower).unwrap()).unwrap();
    let o = atmf(s, "atmf", &cfg.tower, &mm, &nn);
    let atmf_dev = max_abs_diff(&t.to_rows(fused.x), &vec![o.x])
        .max(max_abs_diff(&t.to_rows(fused.gamma), &vec![o.gamma]))
        .max(max_abs_diff(&t.to_rows(fused.modality_scores), &vec![o.scores.to_vec()]));

    let mut t = Tape::new(s);
    let out = p.forward(&mut t, &meme).unwrap();
    let got: Mat = out.probs.iter().map(|&v| t.value(v).to_vec()).collect();
    let forward_dev = max_abs_diff(&got, &forward(&p, &meme));

    [lstm_dev, filter_dev, mha_dev, atmf_dev, forward_dev]
}
