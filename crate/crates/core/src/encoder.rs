//! Pre-norm transformer encoder classifier that exposes every layer's hidden
//! states and attention probabilities.

use std::fmt;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bpe::PAD_ID;
use crate::error::{Error, Result};
use crate::io::{parse_key_values, write_atomic};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Number of encoder blocks.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            max_len: 64,
            ffn_mult: 4,
            vocab_size: 1024,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.layers < 1 {
            return fail("encoder needs at least one layer".into());
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.ffn_mult == 0 || self.vocab_size <= PAD_ID as usize + 4 {
            return fail("ffn_mult and vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0,1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("layers".into(), self.layers.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("ffn_mult".into(), self.ffn_mult.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("dropout".into(), format!("{:?}", self.dropout)),
        ]
    }

    /// Applies `key = value` overrides; unknown keys are returned untouched.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::invalid(format!("bad value {value:?} for encoder key {key}"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "layers" => self.layers = int(value)?,
            "hidden" => self.hidden = int(value)?,
            "heads" => self.heads = int(value)?,
            "max_len" => self.max_len = int(value)?,
            "ffn_mult" => self.ffn_mult = int(value)?,
            "vocab_size" => self.vocab_size = int(value)?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Which optimizer learning rate a parameter uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Body,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Layout of the per-block parameters, in storage order.
const BLOCK_PARAMS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];
const EMBED_PARAMS: usize = 2;
const HEAD_PARAMS: usize = 4;

/// Per-layer captured tensors plus classifier logits.
///
/// `hidden[0]` is the embedding output and `hidden[p]` the output of block
/// `p`; `attn[p - 1]` holds block `p`'s attention probabilities with shape
/// `(batch, heads, len, len)`. Both lists are empty when capture is off.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Vec<Var>,
    pub attn: Vec<Var>,
    pub logits: Var,
}

/// A batch of equal-length token-id rows, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl IdBatch {
    pub fn new(rows: &[&[u32]]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || rows.iter().any(|r| r.len() != len) {
            return Err(Error::dim("id batch rows must be nonempty and of equal length"));
        }
        Ok(IdBatch {
            ids: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            batch: rows.len(),
            len,
        })
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD_ID).collect()
    }
}

/// Plain-tensor result of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub hidden: Vec<Tensor>,
    pub attn: Vec<Tensor>,
    pub logits: Tensor,
}

impl Inference {
    /// Probability of class 1 for each row.
    pub fn positive_scores(&self) -> Vec<f64> {
        self.logits
            .data()
            .chunks(2)
            .map(|r| 1.0 / (1.0 + (r[0] - r[1]).exp()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<NamedParam>,
    frozen: bool,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Encoder {
    /// Randomly initialised encoder; linear maps use Xavier-uniform bounds,
    /// layer norms start at identity.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let f = d * config.ffn_mult;
        let xavier = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor, group| params.push(NamedParam { name, value, group });
        push("embed.token".into(), uniform(&[config.vocab_size, d], 0.1, &mut rng), ParamGroup::Body);
        push("embed.position".into(), uniform(&[config.max_len, d], 0.1, &mut rng), ParamGroup::Body);
        for p in 0..config.layers {
            for name in BLOCK_PARAMS {
                let value = match name {
                    "ln1.gain" | "ln2.gain" => Tensor::full(&[d], 1.0),
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => uniform(&[d, d], xavier(d, d), &mut rng),
                    "ffn.w1" => uniform(&[d, f], xavier(d, f), &mut rng),
                    "ffn.w2" => uniform(&[f, d], xavier(f, d), &mut rng),
                    "ffn.b1" => Tensor::zeros(&[f]),
                    _ => Tensor::zeros(&[d]),
                };
                push(format!("block{p}.{name}"), value, ParamGroup::Body);
            }
        }
        push("head.ln.gain".into(), Tensor::full(&[d], 1.0), ParamGroup::Classifier);
        push("head.ln.bias".into(), Tensor::zeros(&[d]), ParamGroup::Classifier);
        push("head.weight".into(), uniform(&[d, 2], xavier(d, 2), &mut rng), ParamGroup::Classifier);
        push("head.bias".into(), Tensor::zeros(&[2]), ParamGroup::Classifier);
        Ok(Encoder {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Excludes every parameter from training. Forward passes still work and
    /// can capture intermediate tensors, but record no gradients.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Records all parameters on `g`: trainable leaves, or constants when
    /// the model is frozen.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if self.frozen {
                    g.constant(p.value.clone())
                } else {
                    g.param(p.value.clone())
                }
            })
            .collect()
    }

    fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Runs the encoder on `batch` using parameter handles from [`bind`].
    ///
    /// Dropout is applied only when `rng` is given.
    ///
    /// [`bind`]: Encoder::bind
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        batch: &IdBatch,
        capture: bool,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        if params.len() != self.params.len() {
            return Err(Error::State(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let (b, l, d, h) = (batch.batch, batch.len, cfg.hidden, cfg.heads);
        let dh = cfg.head_dim();
        if l > cfg.max_len || l == 0 {
            return Err(Error::dim(format!(
                "sequence length {l} outside 1..={}",
                cfg.max_len
            )));
        }
        if let Some(bad) = batch.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} >= vocab_size {}",
                cfg.vocab_size
            )));
        }
        let p_drop = if rng.is_some() { cfg.dropout } else { 0.0 };
        let key_valid = batch.key_valid();

        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let tok = g.embedding(params[0], &ids, &[b, l])?;
        let pos = g.embedding(params[1], &positions, &[b, l])?;
        let mut x = g.add(tok, pos)?;
        let mut hidden = Vec::new();
        let mut attn = Vec::new();
        if capture {
            hidden.push(x);
        }
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in 0..cfg.layers {
            let w = &params[EMBED_PARAMS + layer * BLOCK_PARAMS.len()..][..BLOCK_PARAMS.len()];
            let n1 = g.layernorm(x, w[0], w[1], LAYERNORM_EPS)?;
            let split = |g: &mut Graph, t: Var| -> Result<Var> {
                let t = g.reshape(t, &[b, l, h, dh])?;
                g.swap_axes12(t)
            };
            let q = Self::linear(g, n1, w[2], w[3])?;
            let q = split(g, q)?;
            let k = Self::linear(g, n1, w[4], w[5])?;
            let k = split(g, k)?;
            let v = Self::linear(g, n1, w[6], w[7])?;
            let v = split(g, v)?;
            let kt = g.transpose_last2(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let probs = g.masked_softmax(scores, &key_valid)?;
            if capture {
                attn.push(probs);
            }
            let probs = match rng.as_deref_mut() {
                Some(r) => g.dropout(probs, p_drop, r)?,
                None => probs,
            };
            let ctx = g.matmul(probs, v)?;
            let ctx = g.swap_axes12(ctx)?;
            let ctx = g.reshape(ctx, &[b, l, d])?;
            let o = Self::linear(g, ctx, w[8], w[9])?;
            let o = match rng.as_deref_mut() {
                Some(r) => g.dropout(o, p_drop, r)?,
                None => o,
            };
            x = g.add(x, o)?;

            let n2 = g.layernorm(x, w[10], w[11], LAYERNORM_EPS)?;
            let f = Self::linear(g, n2, w[12], w[13])?;
            let f = g.gelu(f);
            let f = Self::linear(g, f, w[14], w[15])?;
            let f = match rng.as_deref_mut() {
                Some(r) => g.dropout(f, p_drop, r)?,
                None => f,
            };
            x = g.add(x, f)?;
            if capture {
                hidden.push(x);
            }
        }
        let head = &params[params.len() - HEAD_PARAMS..];
        let cls = g.select_position(x, 0)?;
        let cls = g.layernorm(cls, head[0], head[1], LAYERNORM_EPS)?;
        let logits = Self::linear(g, cls, head[2], head[3])?;
        Ok(EncoderOutput {
            hidden,
            attn,
            logits,
        })
    }

    /// Dropout-free forward pass returning plain tensors.
    pub fn infer(&self, batch: &IdBatch, capture: bool) -> Result<Inference> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let out = self.forward(&mut g, &params, batch, capture, None)?;
        Ok(Inference {
            hidden: out.hidden.iter().map(|&v| g.value(v).clone()).collect(),
            attn: out.attn.iter().map(|&v| g.value(v).clone()).collect(),
            logits: g.value(out.logits).clone(),
        })
    }

    /// Final-layer `[CLS]` vectors, shape `(batch, hidden)`.
    pub fn extract_cls_embeddings(&self, batch: &IdBatch) -> Result<Tensor> {
        let inf = self.infer(batch, true)?;
        let last = inf.hidden.last().expect("at least one layer");
        let (b, l, d) = (batch.batch, batch.len, self.config.hidden);
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            data.extend_from_slice(&last.data()[i * l * d..i * l * d + d]);
        }
        Tensor::new(vec![b, d], data)
    }

    // ------------------------------------------------------------------
    // checkpoints

    const MAGIC: &'static [u8; 8] = b"DSGKDCK1";

    /// Serialises config and parameters; see the README for the layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut cfg_text = String::new();
        for (k, v) in self.config.to_key_values() {
            cfg_text.push_str(&format!("{k}={v}\n"));
        }
        cfg_text.push_str(&format!("frozen={}\n", self.frozen));
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.group {
                ParamGroup::Body => 0,
                ParamGroup::Classifier => 1,
            });
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &dim in p.value.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != Self::MAGIC {
            return Err(Error::invalid("not an encoder checkpoint (bad magic)"));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::invalid("checkpoint config is not UTF-8"))?;
        let mut config = EncoderConfig::default();
        let mut frozen = false;
        for (k, v) in parse_key_values(cfg_text, "checkpoint")? {
            if k == "frozen" {
                frozen = v == "true";
            } else if !config.apply(&k, &v)? {
                return Err(Error::invalid(format!("unknown checkpoint config key {k}")));
            }
        }
        config.validate()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::invalid("parameter name is not UTF-8"))?;
            let group = match r.take(1)?[0] {
                0 => ParamGroup::Body,
                1 => ParamGroup::Classifier,
                other => return Err(Error::invalid(format!("bad parameter group {other}"))),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(NamedParam {
                name,
                value: Tensor::new(shape, data)?,
                group,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        let reference = Encoder::new(config.clone(), 0)?;
        if reference.params.len() != params.len()
            || reference
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::invalid("checkpoint parameters do not match its config"));
        }
        Ok(Encoder {
            config,
            params,
            frozen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Encoder::from_bytes(&bytes)
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={} d={} h={} l={} ffn={}x vocab={}",
            self.layers, self.hidden, self.heads, self.max_len, self.ffn_mult, self.vocab_size
        )
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::invalid("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
