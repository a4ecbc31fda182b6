//! Word tokenizer and transformer text encoder.

use std::collections::HashMap;
use std::path::Path;

use findkit_autograd::{Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::nn::{Init, LayerNorm, RelativeBias, TransformerLayer};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased words with punctuation treated as whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Vocabulary {
    /// Words seen at least `min_count` times, ordered by descending frequency
    /// then lexicographically, after the reserved tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Text("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in normalize_words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str())).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(|(w, _)| w)).collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Text(format!("vocabulary line {}: expected token<TAB>id", n + 1)))?;
            let id: usize =
                id.trim().parse().map_err(|_| Error::Text(format!("vocabulary line {}: bad id {id:?}", n + 1)))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        for (expect, (id, _)) in entries.iter().enumerate() {
            if *id != expect {
                return Err(Error::Text(format!("vocabulary ids are not dense: expected {expect}, found {id}")));
            }
        }
        let tokens: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED.map(String::from) {
            return Err(Error::Text("vocabulary must start with <pad>, <unk>, <bos>".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Drops trailing padding. Encoder outputs at real tokens are unchanged
    /// because padded keys are masked and relative offsets are preserved.
    pub fn trimmed(&self) -> TokenSequence {
        let n = self.mask.iter().rposition(|&m| m).map_or(0, |p| p + 1);
        TokenSequence { ids: self.ids[..n].to_vec(), mask: self.mask[..n].to_vec() }
    }
}

/// Unknown words map to UNK; output is truncated or right-padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<usize> = normalize_words(text).iter().take(max_len).map(|w| vocab.id(w).unwrap_or(UNK)).collect();
    let n = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < n).collect();
    TokenSequence { ids, mask }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_len: DEFAULT_MAX_LEN,
            num_buckets: 32,
            max_distance: 128,
        }
    }
}

impl TextConfig {
    /// Named sizes: small / base / large.
    pub fn sized(name: &str) -> Result<Self> {
        let (layers, dim) = match name {
            "small" => (2, 64),
            "base" => (4, 128),
            "large" => (6, 256),
            other => return Err(Error::Config(format!("unknown text encoder size {other:?}"))),
        };
        Ok(TextConfig { layers, dim, ..TextConfig::default() })
    }
}

/// Token features `[T, D]` inside a graph, with the mask carried along.
#[derive(Clone, Debug)]
pub struct TextFeatures {
    pub features: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab_size: usize,
    pub embedding: findkit_autograd::ParamId,
    pub bias: RelativeBias,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Scalar>(init: &mut Init<T>, vocab_size: usize, config: &TextConfig) -> Result<Self> {
        if !config.dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("text dim {} not divisible by {} heads", config.dim, config.heads)));
        }
        let embedding = init.normal("embedding", &[vocab_size, config.dim], 1.0, false);
        let bias = RelativeBias::new(init, "rel_bias", config.heads, config.num_buckets, config.max_distance);
        let layers = (0..config.layers)
            .map(|i| TransformerLayer::new(init, &format!("layer{i}"), config.dim, config.heads, config.mlp_ratio))
            .collect();
        let final_norm = LayerNorm::new(init, "final_norm", config.dim);
        Ok(TextEncoder { config: config.clone(), vocab_size, embedding, bias, layers, final_norm })
    }

    /// Full-length encoding, output `[T, D]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, tokens: &TokenSequence) -> Result<TextFeatures> {
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Text(format!("token id {bad} out of range for vocabulary of {}", self.vocab_size)));
        }
        if tokens.ids.len() != tokens.mask.len() {
            return Err(Error::Shape("token ids and mask differ in length".into()));
        }
        let seq = tokens.len();
        let table = g.param(self.embedding);
        let mut x = g.embedding(table, &tokens.ids);
        let bias = (!self.layers.is_empty() && seq > 0).then(|| self.bias.forward(g, seq));
        for layer in &self.layers {
            x = layer.forward(g, x, bias, &tokens.mask);
        }
        let x = self.final_norm.forward(g, x);
        Ok(TextFeatures { features: x, mask: tokens.mask.clone() })
    }
}
