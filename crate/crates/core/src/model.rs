//! Pre-norm causal transformer decoder with a language-model head,
//! end-of-history feature extraction and two-tower pair-scoring heads.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbpe::{TokenId, Vocab};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::util::{rng_for, sha256_hex};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    BadToken { id: TokenId, vocab: usize },
    #[error("sequence has no end-of-history token")]
    MissingEoh,
    #[error("rec head {0} does not exist")]
    NoRecHead(usize),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Share the LM output projection with the token embedding.
    #[serde(default = "yes")]
    pub tied_head: bool,
    /// Number of independent `(W_u, W_i)` pairs; 0 for LM-only models.
    #[serde(default = "one")]
    pub rec_heads: usize,
    pub eoh_id: TokenId,
    pub pad_id: TokenId,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// Tensors per decoder block, in declared order.
const BLOCK: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.w_qkv",
    "attn.b_qkv",
    "attn.w_out",
    "attn.b_out",
    "ln2.gamma",
    "ln2.beta",
    "ffn.w_in",
    "ffn.b_in",
    "ffn.w_out",
    "ffn.b_out",
];

impl ModelConfig {
    /// 4 layers, width 32, 4 heads, FFN 128.
    pub fn desk(vocab: &Vocab, max_seq_len: usize) -> Result<Self, ModelError> {
        Self::for_vocab(vocab, 4, 32, 4, 128, max_seq_len)
    }

    /// One layer, width 4, 2 heads, FFN 8: small enough for dense Hessians.
    pub fn tiny(vocab: &Vocab, max_seq_len: usize) -> Result<Self, ModelError> {
        Self::for_vocab(vocab, 1, 4, 2, 8, max_seq_len)
    }

    pub fn for_vocab(
        vocab: &Vocab,
        n_layers: usize,
        d_emb: usize,
        n_heads: usize,
        d_ffn: usize,
        max_seq_len: usize,
    ) -> Result<Self, ModelError> {
        let special = |r: Result<TokenId, _>| r.map_err(|e: crate::bbpe::BbpeError| ModelError::Config(e.to_string()));
        let config = Self {
            n_layers,
            d_emb,
            n_heads,
            d_ffn,
            vocab_size: vocab.len(),
            max_seq_len,
            tied_head: true,
            rec_heads: 1,
            eoh_id: special(vocab.eoh())?,
            pad_id: special(vocab.pad())?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.d_emb == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return bad("n_layers, d_emb, n_heads and d_ffn must be positive".into());
        }
        if self.d_emb % self.n_heads != 0 {
            return bad(format!("d_emb {} is not divisible by n_heads {}", self.d_emb, self.n_heads));
        }
        if self.max_seq_len < 3 {
            return bad(format!("max_seq_len {} is below 3", self.max_seq_len));
        }
        for (name, id) in [("eoh_id", self.eoh_id), ("pad_id", self.pad_id)] {
            if id as usize >= self.vocab_size {
                return bad(format!("{name} {id} is outside the vocabulary of {}", self.vocab_size));
            }
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.n_layers {
            names.extend(BLOCK.iter().map(|b| format!("block{l}.{b}")));
        }
        names.push("ln_f.gamma".into());
        names.push("ln_f.beta".into());
        if !self.tied_head {
            names.push("lm_head".into());
        }
        for h in 0..self.rec_heads {
            names.push(format!("rec{h}.w_user"));
            names.push(format!("rec{h}.w_item"));
        }
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (v, d, f) = (self.vocab_size, self.d_emb, self.d_ffn);
        let mut shapes = vec![vec![v, d], vec![self.max_seq_len, d]];
        for _ in 0..self.n_layers {
            shapes.extend([
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        if !self.tied_head {
            shapes.push(vec![v, d]);
        }
        for _ in 0..self.rec_heads {
            shapes.push(vec![d, d]);
            shapes.push(vec![d, d]);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Parameters of the decoder alone: no rec heads, tied output head.
    pub fn backbone_param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_emb, self.d_ffn, self.n_layers);
        v * d + self.max_seq_len * d + l * (4 * d + 3 * d * d + 3 * d + d * d + d + d * f + f + f * d + d) + 2 * d
    }

    fn lnf_index(&self) -> usize {
        2 + BLOCK.len() * self.n_layers
    }

    fn head_index(&self) -> usize {
        if self.tied_head {
            0
        } else {
            self.lnf_index() + 2
        }
    }

    /// Indices of `(W_u, W_i)` for rec head `h`.
    pub fn rec_indices(&self, h: usize) -> Result<(usize, usize), ModelError> {
        if h >= self.rec_heads {
            return Err(ModelError::NoRecHead(h));
        }
        let base = self.lnf_index() + 2 + usize::from(!self.tied_head) + 2 * h;
        Ok((base, base + 1))
    }

    /// Indices of every tensor that belongs to the decoder (not a rec head).
    pub fn backbone_indices(&self) -> std::ops::Range<usize> {
        0..self.lnf_index() + 2 + usize::from(!self.tied_head)
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.max_seq_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(ModelError::BadToken {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Additive mask: a query sees itself and earlier non-pad keys.
    fn attention_mask<T: Scalar>(&self, ids: &[TokenId]) -> Tensor<T> {
        let n = ids.len();
        let mut m = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                if j > i || (j != i && ids[j] == self.pad_id) {
                    m[i * n + j] = T::from_f64(MASKED);
                }
            }
        }
        Tensor::matrix(n, n, m).expect("n×n")
    }

    /// Final-layer hidden states (after the final layer norm), `len × d`.
    pub fn hidden<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], ids: &[TokenId]) -> Result<Var, ModelError> {
        self.check_tokens(ids)?;
        let n = ids.len();
        let d = self.d_emb;
        let dh = d / self.n_heads;
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = tape.embedding(p[0], &idx)?;
        let pos = tape.slice_rows(p[1], 0, n)?;
        let mut x = tape.add(tok, pos)?;
        let mask = tape.constant(self.attention_mask(ids));
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..self.n_layers {
            let w = &p[2 + BLOCK.len() * l..2 + BLOCK.len() * (l + 1)];
            let h = tape.layer_norm(x, w[0], w[1], LN_EPS)?;
            let qkv = tape.matmul(h, w[2])?;
            let qkv = tape.add_row(qkv, w[3])?;
            let mut heads = Vec::with_capacity(self.n_heads);
            for hd in 0..self.n_heads {
                let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
                let k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh)?;
                let v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, inv_sqrt);
                let s = tape.add(s, mask)?;
                let a = tape.softmax(s)?;
                heads.push(tape.matmul(a, v)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = tape.matmul(cat, w[4])?;
            let o = tape.add_row(o, w[5])?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, w[6], w[7], LN_EPS)?;
            let f = tape.matmul(h, w[8])?;
            let f = tape.add_row(f, w[9])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w[10])?;
            let f = tape.add_row(f, w[11])?;
            x = tape.add(x, f)?;
        }
        let lnf = self.lnf_index();
        Ok(tape.layer_norm(x, p[lnf], p[lnf + 1], LN_EPS)?)
    }

    /// Next-token logits for stacked hidden rows.
    pub fn lm_logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], hidden: Var) -> Result<Var, ModelError> {
        Ok(tape.matmul_nt(hidden, p[self.head_index()])?)
    }

    /// Hidden row at the last end-of-history position, `1 × d`.
    pub fn feature<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], ids: &[TokenId]) -> Result<Var, ModelError> {
        let at = self.eoh_position(ids)?;
        let h = self.hidden(tape, p, ids)?;
        Ok(tape.slice_rows(h, at, at + 1)?)
    }

    pub fn eoh_position(&self, ids: &[TokenId]) -> Result<usize, ModelError> {
        ids.iter().rposition(|&t| t == self.eoh_id).ok_or(ModelError::MissingEoh)
    }

    /// `⟨W_u z_u, W_i z_i⟩` per row of stacked user/item features (`B×d`),
    /// returned as `B×1` logits.
    pub fn pair_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        w_user: Var,
        w_item: Var,
        users: Var,
        items: Var,
    ) -> Result<Var, ModelError> {
        pair_logits(tape, w_user, w_item, users, items)
    }
}

/// `⟨W_u z_u, W_i z_i⟩` per row; rows of `users`/`items` are features.
pub fn pair_logits<T: Scalar>(
    tape: &mut Tape<T>,
    w_user: Var,
    w_item: Var,
    users: Var,
    items: Var,
) -> Result<Var, ModelError> {
    let u = tape.matmul_nt(users, w_user)?;
    let i = tape.matmul_nt(items, w_item)?;
    let prod = tape.mul(u, i)?;
    Ok(tape.sum_cols(prod)?)
}

/// Decoder weights plus rec heads, in the order of [`ModelConfig::param_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Model {
    /// Normal(0, 0.02) weights with residual output projections scaled by
    /// `1/√(2·n_layers)`, unit layer-norm gains, zero biases, and rec heads
    /// drawn with std `1/d`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_for(seed, &[b"model-init"]);
        let names = config.param_names();
        let shapes = config.param_shapes();
        let resid = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let rec_std = 1.0 / config.d_emb as f64;
        let mut params = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(shapes) {
            let len: usize = shape.iter().product();
            let std = if name.ends_with("gamma") {
                None
            } else if name.contains(".b_") || name.ends_with("beta") {
                Some(0.0)
            } else if name.ends_with("attn.w_out") || name.ends_with("ffn.w_out") {
                Some(resid)
            } else if name.starts_with("rec") {
                Some(rec_std)
            } else {
                Some(INIT_STD)
            };
            let data = match std {
                None => vec![1.0; len],
                Some(s) if s == 0.0 => vec![0.0; len],
                Some(s) => {
                    let normal = Normal::new(0.0, s).expect("positive std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(ModelError::Dim(format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for ((s, p), name) in shapes.iter().zip(&params).zip(config.param_names()) {
            if s.as_slice() != p.shape() {
                return Err(ModelError::Dim(format!("{name}: expected {s:?}, got {:?}", p.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Replaces the rec heads with `n` freshly initialized pairs, keeping the
    /// decoder.
    pub fn with_rec_heads(&self, n: usize, seed: u64) -> Result<Self, ModelError> {
        let mut config = self.config.clone();
        config.rec_heads = n;
        let fresh = Self::init(config.clone(), seed)?;
        let keep = self.config.backbone_indices().end;
        let mut params = self.params[..keep].to_vec();
        params.extend_from_slice(&fresh.params[keep..]);
        Self::from_parts(config, params)
    }

    fn bind(&self, tape: &mut Tape<f64>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Next-token logits, `len × vocab_size`.
    pub fn forward_lm(&self, ids: &[TokenId]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let h = self.config.hidden(&mut tape, &p, ids)?;
        let logits = self.config.lm_logits(&mut tape, &p, h)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean next-token NLL of a sequence (targets are inputs shifted by one,
    /// padding excluded).
    pub fn lm_nll(&self, ids: &[TokenId]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let h = self.config.hidden(&mut tape, &p, ids)?;
        let logits = self.config.lm_logits(&mut tape, &p, h)?;
        let targets = shifted_targets(ids, self.config.pad_id);
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(tape.scalar(loss))
    }

    /// Hidden state at the end-of-history token.
    pub fn extract_feature(&self, ids: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let z = self.config.feature(&mut tape, &p, ids)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// `(W_u, W_i)` of rec head `h`.
    pub fn rec_head(&self, h: usize) -> Result<(&Tensor, &Tensor), ModelError> {
        let (u, i) = self.config.rec_indices(h)?;
        Ok((&self.params[u], &self.params[i]))
    }

    /// Hash over config and parameter bytes.
    pub fn hash(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serializes");
        for p in &self.params {
            for x in p.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Next-token targets for `ids`: position `t` predicts `ids[t+1]`; the last
/// position and positions whose target is padding are masked.
pub fn shifted_targets(ids: &[TokenId], pad: TokenId) -> Vec<Option<usize>> {
    (0..ids.len())
        .map(|t| match ids.get(t + 1) {
            Some(&next) if next != pad && ids[t] != pad => Some(next as usize),
            _ => None,
        })
        .collect()
}

/// `Wz` for a `d×d` matrix stored row-major.
pub fn transform(w: &Tensor, z: &[f64]) -> Result<Vec<f64>, ModelError> {
    let (r, c) = w
        .dims2()
        .ok_or_else(|| ModelError::Dim(format!("expected a matrix, got {:?}", w.shape())))?;
    if c != z.len() {
        return Err(ModelError::Dim(format!("matrix {r}×{c} applied to vector of {}", z.len())));
    }
    Ok(w.data().chunks(c).map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect())
}

/// `⟨W_u z_u, W_i z_i⟩`.
pub fn pair_logit(z_u: &[f64], z_i: &[f64], w_user: &Tensor, w_item: &Tensor) -> Result<f64, ModelError> {
    let u = transform(w_user, z_u)?;
    let i = transform(w_item, z_i)?;
    if u.len() != i.len() {
        return Err(ModelError::Dim(format!("transformed widths {} and {} differ", u.len(), i.len())));
    }
    Ok(u.iter().zip(&i).map(|(a, b)| a * b).sum())
}

/// Interaction probability `sigmoid(⟨W_u z_u, W_i z_i⟩)`.
pub fn score_pair(z_u: &[f64], z_i: &[f64], w_user: &Tensor, w_item: &Tensor) -> Result<f64, ModelError> {
    let x = pair_logit(z_u, z_i, w_user, w_item)?;
    Ok(1.0 / (1.0 + (-x).exp()))
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"TXRCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    step: u64,
    meta: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>)>,
}

/// A model with the vocabulary it was trained against and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_hash: String,
    pub step: u64,
    /// Free-form provenance such as the resolved run-config hash.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model, vocab_hash: impl Into<String>, step: u64) -> Self {
        Self {
            model,
            vocab_hash: vocab_hash.into(),
            step,
            meta: BTreeMap::new(),
        }
    }

    /// `magic | version u32 | header length u64 | JSON header | f64 LE data`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: self
                .model
                .config
                .param_names()
                .into_iter()
                .zip(self.model.params.iter().map(|p| p.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.params {
            for x in p.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let err = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let mut at = MAGIC.len();
        let version = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
        }
        at += 4;
        let len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        let json = bytes.get(at..at + len).ok_or_else(|| err("truncated header"))?;
        at += len;
        let header: Header = serde_json::from_slice(json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        header.config.validate()?;
        if header.tensors.iter().map(|t| &t.0).ne(header.config.param_names().iter()) {
            return Err(err("tensor names do not match the config"));
        }
        let mut params = Vec::with_capacity(header.tensors.len());
        for (_, shape) in &header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes.get(at..at + 8 * n).ok_or_else(|| err("truncated tensor data"))?;
            at += 8 * n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        if at != bytes.len() {
            return Err(err("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: Model::from_parts(header.config, params)?,
            vocab_hash: header.vocab_hash,
            step: header.step,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbpe::DEFAULT_SPECIALS;

    fn vocab() -> Vocab {
        Vocab::bytes_only(&DEFAULT_SPECIALS).unwrap()
    }

    fn small(seed: u64) -> Model {
        let config = ModelConfig::for_vocab(&vocab(), 2, 8, 2, 16, 32).unwrap();
        Model::init(config, seed).unwrap()
    }

    #[test]
    fn config_validation() {
        let v = vocab();
        assert!(ModelConfig::for_vocab(&v, 1, 6, 4, 8, 16).is_err());
        assert!(ModelConfig::for_vocab(&v, 1, 8, 2, 8, 2).is_err());
        assert!(ModelConfig::for_vocab(&v, 1, 8, 2, 8, 3).is_ok());
    }

    #[test]
    fn param_count_matches_shapes() {
        let v = vocab();
        let c = ModelConfig::desk(&v, 128).unwrap();
        let m = Model::init(c.clone(), 0).unwrap();
        assert_eq!(m.param_count(), c.param_count());
        assert_eq!(c.param_count(), c.backbone_param_count() + 2 * 32 * 32);
        let tiny = ModelConfig::tiny(&v, 8).unwrap();
        assert!(tiny.param_count() < 2_000, "{}", tiny.param_count());
    }

    #[test]
    fn published_sizes_have_the_right_order_of_magnitude() {
        // (layers, width, heads, ffn, approximate published size)
        let rows = [(4, 32, 4, 128, 1.7e6), (12, 768, 12, 3072, 125e6)];
        for (l, d, h, f, published) in rows {
            let c = ModelConfig {
                n_layers: l,
                d_emb: d,
                n_heads: h,
                d_ffn: f,
                vocab_size: 50_258,
                max_seq_len: 2048,
                tied_head: true,
                rec_heads: 0,
                eoh_id: 0,
                pad_id: 1,
            };
            let ratio = c.backbone_param_count() as f64 / published;
            assert!((0.3..3.0).contains(&ratio), "{l}-layer count ratio {ratio}");
        }
    }

    #[test]
    fn logits_shape_and_single_token() {
        let m = small(1);
        assert_eq!(m.forward_lm(&[5]).unwrap().shape(), &[1, 259]);
        assert_eq!(m.forward_lm(&[5, 6, 7]).unwrap().shape(), &[3, 259]);
        assert!(matches!(m.forward_lm(&[1; 33]), Err(ModelError::TooLong { .. })));
        assert!(matches!(m.forward_lm(&[300]), Err(ModelError::BadToken { .. })));
        assert!(matches!(m.forward_lm(&[]), Err(ModelError::Empty)));
    }

    #[test]
    fn causal_mask_every_position() {
        let m = small(2);
        let base: Vec<TokenId> = (0..12).map(|i| (i * 17 + 3) % 256).collect();
        let reference = m.forward_lm(&base).unwrap();
        for t in 0..base.len() {
            let mut changed = base.clone();
            changed[t] = (changed[t] + 1) % 256;
            let out = m.forward_lm(&changed).unwrap();
            let cols = 259;
            assert_eq!(&out.data()[..t * cols], &reference.data()[..t * cols], "position {t}");
            assert_ne!(&out.data()[t * cols..(t + 1) * cols], &reference.data()[t * cols..(t + 1) * cols]);
        }
    }

    #[test]
    fn zero_head_gives_uniform_predictions() {
        let v = vocab();
        let mut c = ModelConfig::for_vocab(&v, 1, 8, 2, 16, 16).unwrap();
        c.tied_head = false;
        let mut m = Model::init(c.clone(), 3).unwrap();
        let head = c.head_index();
        m.params_mut()[head] = Tensor::zeros(&[259, 8]);
        let nll = m.lm_nll(&[10, 20, 30, 40]).unwrap();
        assert!((nll - (259f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn feature_ignores_trailing_padding() {
        let m = small(4);
        let v = vocab();
        let mut ids = v.encode("blue hat");
        ids.push(v.eoh().unwrap());
        let z = m.extract_feature(&ids).unwrap();
        assert_eq!(z.len(), 8);
        let mut padded = ids.clone();
        padded.extend([v.pad().unwrap(); 5]);
        let zp = m.extract_feature(&padded).unwrap();
        for (a, b) in z.iter().zip(&zp) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(m.extract_feature(&[1, 2]), Err(ModelError::MissingEoh)));
    }

    #[test]
    fn padding_before_the_end_is_invisible() {
        // Changing the pad embedding must not move any non-pad position.
        let mut m = small(4);
        let v = vocab();
        let (pad, eoh) = (v.pad().unwrap(), v.eoh().unwrap());
        let ids = [7, pad, 9, eoh];
        let before = m.forward_lm(&ids).unwrap();
        let d = m.config().d_emb;
        for x in &mut m.params_mut()[0].data_mut()[pad as usize * d..(pad as usize + 1) * d] {
            *x += 0.5;
        }
        let after = m.forward_lm(&ids).unwrap();
        let cols = 259;
        // The tied head reads the pad row too, so its own logit column moves.
        for t in [0, 2, 3] {
            for c in (0..cols).filter(|&c| c != pad as usize) {
                assert_eq!(before.data()[t * cols + c], after.data()[t * cols + c], "position {t}");
            }
        }
    }

    #[test]
    fn distinct_histories_give_distinct_features() {
        let m = small(5);
        let v = vocab();
        let enc = |s: &str| {
            let mut ids = v.encode(s);
            ids.push(v.eoh().unwrap());
            ids
        };
        let a = m.extract_feature(&enc("red shoes")).unwrap();
        let b = m.extract_feature(&enc("green tea")).unwrap();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
    }

    /// Straight-line single-layer forward over nested loops.
    fn oracle_feature(m: &Model, ids: &[TokenId]) -> Vec<f64> {
        let c = m.config();
        let (d, nh, f) = (c.d_emb, c.n_heads, c.d_ffn);
        let dh = d / nh;
        let p = m.params();
        let at = |t: &Tensor, r: usize, col: usize| t.data()[r * t.shape()[1] + col];
        let ln = |x: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        };
        let n = ids.len();
        let mut x: Vec<Vec<f64>> = (0..n)
            .map(|t| (0..d).map(|j| at(&p[0], ids[t] as usize, j) + at(&p[1], t, j)).collect())
            .collect();
        let w = &p[2..14];
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &w[0], &w[1])).collect();
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|r| (0..3 * d).map(|o| (0..d).map(|i| r[i] * at(&w[2], i, o)).sum::<f64>() + w[3].data()[o]).collect())
            .collect();
        let mut attn = vec![vec![0.0; d]; n];
        for hd in 0..nh {
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|e| qkv[i][hd * dh + e] * qkv[j][d + hd * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let a = (s - mx).exp() / z;
                    for e in 0..dh {
                        attn[i][hd * dh + e] += a * qkv[j][2 * d + hd * dh + e];
                    }
                }
            }
        }
        for i in 0..n {
            for o in 0..d {
                x[i][o] += (0..d).map(|k| attn[i][k] * at(&w[4], k, o)).sum::<f64>() + w[5].data()[o];
            }
            let h2 = ln(&x[i], &w[6], &w[7]);
            let hid: Vec<f64> = (0..f)
                .map(|o| {
                    let u = (0..d).map(|k| h2[k] * at(&w[8], k, o)).sum::<f64>() + w[9].data()[o];
                    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
                })
                .collect();
            for o in 0..d {
                x[i][o] += (0..f).map(|k| hid[k] * at(&w[10], k, o)).sum::<f64>() + w[11].data()[o];
            }
        }
        ln(&x[n - 1], &p[14], &p[15])
    }

    #[test]
    fn feature_matches_straight_line_oracle() {
        let v = vocab();
        let c = ModelConfig::for_vocab(&v, 1, 8, 2, 12, 16).unwrap();
        let m = Model::init(c, 9).unwrap();
        let mut ids = v.encode("oracle");
        ids.push(v.eoh().unwrap());
        let got = m.extract_feature(&ids).unwrap();
        let want = oracle_feature(&m, &ids);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    #[test]
    fn score_pair_examples() {
        let i2 = eye(2);
        assert_eq!(score_pair(&[1.0, 0.0], &[0.0, 1.0], &i2, &i2).unwrap(), 0.5);
        let p = score_pair(&[3f64.ln(), 0.0], &[1.0, 0.0], &i2, &i2).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        assert!(score_pair(&[1.0], &[1.0, 0.0], &i2, &i2).is_err());
    }

    #[test]
    fn scaling_user_feature_keeps_candidate_order() {
        let wu = Tensor::matrix(2, 2, vec![0.3, -1.0, 0.7, 0.2]).unwrap();
        let wi = Tensor::matrix(2, 2, vec![1.1, 0.4, -0.5, 0.9]).unwrap();
        let zu = [0.4, -0.8];
        let cands = [[1.0, 0.5], [-0.2, 0.3], [0.9, -1.5], [0.0, 2.0]];
        let order = |scale: f64| {
            let z: Vec<f64> = zu.iter().map(|x| x * scale).collect();
            let mut idx: Vec<usize> = (0..4).collect();
            let s: Vec<f64> = cands.iter().map(|c| score_pair(&z, c, &wu, &wi).unwrap()).collect();
            idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
            idx
        };
        assert_eq!(order(1.0), order(3.5));
        assert_eq!(order(1.0), order(0.2));
    }

    #[test]
    fn score_is_symmetric_in_towers() {
        let wu = Tensor::matrix(2, 2, vec![0.3, -1.0, 0.7, 0.2]).unwrap();
        let wi = Tensor::matrix(2, 2, vec![1.1, 0.4, -0.5, 0.9]).unwrap();
        let (a, b) = ([0.4, -0.8], [1.5, 0.1]);
        assert_eq!(pair_logit(&a, &b, &wu, &wi).unwrap(), pair_logit(&b, &a, &wi, &wu).unwrap());
    }

    #[test]
    fn tape_pair_logits_match_scalar_version() {
        let m = small(6);
        let (wu, wi) = m.rec_head(0).unwrap();
        let zu = Tensor::matrix(2, 8, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let zi = Tensor::matrix(2, 8, (0..16).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b, u, i) = (tape.constant(wu.clone()), tape.constant(wi.clone()), tape.constant(zu.clone()), tape.constant(zi.clone()));
        let out = pair_logits(&mut tape, a, b, u, i).unwrap();
        for r in 0..2 {
            let want = pair_logit(&zu.data()[r * 8..(r + 1) * 8], &zi.data()[r * 8..(r + 1) * 8], wu, wi).unwrap();
            assert!((tape.value(out).data()[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new(small(7), vocab().hash(), 42);
        ck.meta.insert("config_hash".into(), "abc".into());
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let path2 = dir.path().join("b.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(small(1), small(1));
        assert_ne!(small(1), small(2));
    }

    #[test]
    fn swapping_rec_heads_keeps_the_decoder() {
        let m = small(8);
        let two = m.with_rec_heads(2, 99).unwrap();
        assert_eq!(two.config().rec_heads, 2);
        let keep = m.config().backbone_indices().end;
        assert_eq!(&two.params()[..keep], &m.params()[..keep]);
        assert!(two.rec_head(1).is_ok());
        assert!(m.rec_head(1).is_err());
    }
}
