//! GloVe-format word vectors, corpus vocabulary and deterministic OOV rows.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the pretrained tweet vectors.
pub const GLOVE_DIM: usize = 200;

/// Standard deviation of randomly initialised OOV rows.
pub const OOV_STD: f64 = 0.02;

/// Lowercases, splits every non-alphanumeric, non-space character into its own
/// token and splits the rest on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Dense token index with occurrence counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary in first-occurrence order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    /// Counts one occurrence, inserting the token if new; returns its index.
    pub fn add(&mut self, token: &str) -> usize {
        let idx = self.insert(token);
        self.counts[idx] += 1;
        idx
    }

    /// Inserts without counting.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.to_string(), i);
        self.tokens.push(token.to_string());
        self.counts.push(0);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn count(&self, idx: usize) -> u64 {
        self.counts[idx]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Fraction of token types found in `pretrained`.
    pub fn coverage(&self, pretrained: &EmbeddingTable) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self.tokens.iter().filter(|t| pretrained.contains(t)).count();
        hits as f64 / self.len() as f64
    }

    /// Fraction of token occurrences found in `pretrained`.
    pub fn occurrence_coverage(&self, pretrained: &EmbeddingTable) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let hits: u64 = self
            .tokens
            .iter()
            .zip(&self.counts)
            .filter(|(t, _)| pretrained.contains(t))
            .map(|(_, c)| c)
            .sum();
        hits as f64 / total as f64
    }

    /// `token<TAB>index<TAB>count` lines.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{t}\t{i}\t{c}")?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("tokens are UTF-8")
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut v = Vocab::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |msg: &str| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let mut fields = line.split('\t');
            let (Some(tok), Some(idx), Some(count), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(parse_err("expected token<TAB>index<TAB>count"));
            };
            let idx: usize = idx.parse().map_err(|_| parse_err("bad index"))?;
            let count: u64 = count.parse().map_err(|_| parse_err("bad count"))?;
            if idx != v.len() || v.get(tok).is_some() {
                return Err(parse_err("indices must be dense and tokens unique"));
            }
            let i = v.insert(tok);
            v.counts[i] = count;
        }
        Ok(v)
    }
}

/// Deterministic OOV vector for `token` under `seed`.
pub fn oov_row(seed: u64, token: &str, dim: usize, std: f64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let normal = Normal::new(0.0, std).expect("std is positive");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Word → trainable vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: Vocab,
    weight: Tensor,
    oov_seed: u64,
    pretrained_rows: usize,
}

impl EmbeddingTable {
    pub fn empty(dim: usize, oov_seed: u64) -> Self {
        EmbeddingTable {
            dim,
            vocab: Vocab::new(),
            weight: Tensor::zeros(vec![0, dim]),
            oov_seed,
            pretrained_rows: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    /// Rows read from the pretrained file (the rest were OOV-initialised).
    pub fn pretrained_rows(&self) -> usize {
        self.pretrained_rows
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.get(token).is_some()
    }

    pub fn row(&self, token: &str) -> Option<&[f64]> {
        self.vocab.get(token).map(|i| self.weight.row(i))
    }

    fn push(&mut self, token: &str, row: &[f64]) -> usize {
        let idx = self.vocab.insert(token);
        self.weight.push_row(row).expect("row width matches table dim");
        idx
    }

    /// Index of `token`, inserting a seeded random row the first time it is seen.
    pub fn lookup_or_insert(&mut self, token: &str) -> usize {
        match self.vocab.get(token) {
            Some(i) => i,
            None => {
                let row = oov_row(self.oov_seed, token, self.dim, OOV_STD);
                self.push(token, &row)
            }
        }
    }

    /// Embeds a segment as an n×dim matrix.
    pub fn embed_segment(&mut self, tokens: &[String]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Contract("a segment must contain at least one token".into()));
        }
        let mut values = Vec::with_capacity(tokens.len() * self.dim);
        for t in tokens {
            let i = self.lookup_or_insert(t);
            values.extend_from_slice(self.weight.row(i));
        }
        Tensor::matrix(tokens.len(), self.dim, values)
    }

    /// Table whose rows follow `vocab`: pretrained vectors where available,
    /// seeded OOV rows otherwise.
    pub fn for_vocab(vocab: &Vocab, pretrained: Option<&EmbeddingTable>, dim: usize, oov_seed: u64, std: f64) -> Result<Self> {
        if let Some(p) = pretrained {
            if p.dim != dim {
                return Err(Error::Config(format!("pretrained vectors are {}-d, model expects {dim}-d", p.dim)));
            }
        }
        let mut values = Vec::with_capacity(vocab.len() * dim);
        let mut hits = 0;
        for tok in vocab.tokens() {
            match pretrained.and_then(|p| p.row(tok)) {
                Some(r) => {
                    hits += 1;
                    values.extend_from_slice(r);
                }
                None => values.extend(oov_row(oov_seed, tok, dim, std)),
            }
        }
        let weight = if vocab.is_empty() {
            Tensor::zeros(vec![0, dim])
        } else {
            Tensor::matrix(vocab.len(), dim, values)?
        };
        Ok(EmbeddingTable {
            dim,
            vocab: vocab.clone(),
            weight,
            oov_seed,
            pretrained_rows: hits,
        })
    }
}

/// Loads every vector from a GloVe text file.
pub fn load_glove(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    load_glove_filtered(path, dim, None)
}

/// Loads GloVe vectors, keeping only tokens in `keep` when given.
pub fn load_glove_filtered(path: &Path, dim: usize, keep: Option<&HashSet<String>>) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable::empty(dim, 0);
    let mut row = Vec::with_capacity(dim);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        row.clear();
        for f in fields {
            let v: f64 = f.parse().map_err(|_| parse_err(format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value {f:?}")));
            }
            row.push(v);
        }
        if row.len() != dim {
            return Err(parse_err(format!("expected {dim} values after `{token}`, got {}", row.len())));
        }
        if keep.is_some_and(|k| !k.contains(token)) || table.contains(token) {
            continue;
        }
        table.push(token, &row);
    }
    table.pretrained_rows = table.vocab.len();
    Ok(table)
}
