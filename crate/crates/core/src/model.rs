//! Encoder-decoder transformer with bucketed relative-position attention
//! bias, pre-normalization residual blocks and a tied output projection.
//!
//! Parameters live behind `Arc` so binding them to a tape is free. All math
//! goes through [`Tape`], which keeps training and evaluation on one code
//! path and lets the 64-bit build serve as a gradient oracle.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;
const MASK_VALUE: f64 = -1e9;
const CHECKPOINT_MAGIC: &str = "UFACKPT1";
const MANIFEST_END: &str = "end";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub relpos_buckets: usize,
    pub relpos_max_distance: usize,
    pub dropout_rate: f64,
    pub tie_embeddings: bool,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_encoder_layers: 8,
            n_decoder_layers: 8,
            n_heads: 6,
            d_model: 512,
            d_ff: 2048,
            vocab_size: 8000,
            relpos_buckets: 32,
            relpos_max_distance: 128,
            dropout_rate: 0.1,
            tie_embeddings: true,
            max_source_len: 512,
            max_target_len: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("relpos_buckets", self.relpos_buckets),
            ("relpos_max_distance", self.relpos_max_distance),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.relpos_buckets < 4 {
            return Err(Error::config("relpos_buckets", "needs at least 4 buckets"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Named tensor shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, h) = (self.d_model, self.d_ff, self.n_heads);
        let mut out = vec![
            ("shared.embedding".to_string(), vec![self.vocab_size, d]),
            ("encoder.relpos_bias".to_string(), vec![self.relpos_buckets, h]),
            ("decoder.relpos_bias".to_string(), vec![self.relpos_buckets, h]),
        ];
        let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{prefix}.{m}"), vec![d, d]));
            }
            out.push((format!("{prefix}.norm"), vec![d]));
        };
        let ff = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.ff.wi"), vec![d, f]));
            out.push((format!("{prefix}.ff.wo"), vec![f, d]));
            out.push((format!("{prefix}.ff.norm"), vec![d]));
        };
        for l in 0..self.n_encoder_layers {
            attn(&mut out, &format!("encoder.{l}.self_attn"));
            ff(&mut out, &format!("encoder.{l}"));
        }
        out.push(("encoder.final_norm".into(), vec![d]));
        for l in 0..self.n_decoder_layers {
            attn(&mut out, &format!("decoder.{l}.self_attn"));
            attn(&mut out, &format!("decoder.{l}.cross_attn"));
            ff(&mut out, &format!("decoder.{l}"));
        }
        out.push(("decoder.final_norm".into(), vec![d]));
        if !self.tie_embeddings {
            out.push(("lm_head".into(), vec![d, self.vocab_size]));
        }
        out
    }

    fn to_manifest(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_encoder_layers", self.n_encoder_layers.to_string()),
            ("n_decoder_layers", self.n_decoder_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("relpos_buckets", self.relpos_buckets.to_string()),
            ("relpos_max_distance", self.relpos_max_distance.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("max_source_len", self.max_source_len.to_string()),
            ("max_target_len", self.max_target_len.to_string()),
        ]
    }

    fn from_manifest(fields: &HashMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(fields: &HashMap<String, String>, key: &str) -> Result<V> {
            fields
                .get(key)
                .ok_or_else(|| Error::Format(format!("manifest lacks config field `{key}`")))?
                .parse()
                .map_err(|_| Error::Format(format!("manifest config field `{key}` is malformed")))
        }
        Ok(Self {
            n_encoder_layers: get(fields, "n_encoder_layers")?,
            n_decoder_layers: get(fields, "n_decoder_layers")?,
            n_heads: get(fields, "n_heads")?,
            d_model: get(fields, "d_model")?,
            d_ff: get(fields, "d_ff")?,
            vocab_size: get(fields, "vocab_size")?,
            relpos_buckets: get(fields, "relpos_buckets")?,
            relpos_max_distance: get(fields, "relpos_max_distance")?,
            dropout_rate: get(fields, "dropout_rate")?,
            tie_embeddings: get(fields, "tie_embeddings")?,
            max_source_len: get(fields, "max_source_len")?,
            max_target_len: get(fields, "max_target_len")?,
        })
    }
}

/// Right-padded rectangle of token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R], pad_id: u32) -> Self {
        let cols = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat(pad_id).take(cols - r.len()));
        }
        Self {
            rows: rows.len(),
            cols,
            ids,
        }
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.cols..(i + 1) * self.cols]
    }

    /// Decoder input: each row shifted right by one with `pad_id` in front.
    pub fn shifted_right(&self, pad_id: u32) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len());
        for i in 0..self.rows {
            ids.push(pad_id);
            ids.extend_from_slice(&self.row(i)[..self.cols.saturating_sub(1)]);
        }
        Self { ids, ..*self }
    }
}

/// Bucket of a key position relative to a query position, following the
/// T5 scheme: exact buckets for small distances, logarithmic beyond.
pub fn relative_position_bucket(relative: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let n = if bidirectional {
        buckets /= 2;
        if relative > 0 {
            ret += buckets;
        }
        relative.abs()
    } else {
        (-relative).max(0)
    };
    let max_exact = buckets / 2;
    if n < max_exact {
        return (ret + n) as usize;
    }
    let scaled = ((n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
        * (buckets - max_exact) as f64) as i64;
    (ret + (max_exact + scaled).min(buckets - 1)) as usize
}

#[derive(Clone, Debug)]
pub struct ModelParameters<T: Float> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Float> PartialEq for ModelParameters<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl<T: Float> ModelParameters<T> {
    /// Truncated-normal projections (std `1/sqrt(d_model)`, cut at 2σ) and
    /// unit normalization scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (config.d_model as f64).sqrt();
        let entries = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with("norm") {
                    vec![T::one(); n]
                } else {
                    (0..n).map(|_| T::from_f64_lossy(std * truncated_normal(&mut rng))).collect()
                };
                (name, Tensor::new(shape, data).expect("shape matches data"))
            })
            .collect();
        Self::from_entries(config.clone(), entries)
    }

    /// Assembles parameters, checking every name and shape against `config`.
    pub fn from_entries(config: ModelConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut by_name: HashMap<String, Tensor<T>> = entries.into_iter().collect();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let t = by_name.remove(&name).ok_or_else(|| Error::Checkpoint {
                tensor: name.clone(),
                message: format!("missing; expected shape {shape:?}"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    tensor: name,
                    message: format!("expected shape {shape:?}, found {:?}", t.shape()),
                });
            }
            names.push(name);
            tensors.push(Arc::new(t));
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Checkpoint {
                tensor: extra.clone(),
                message: "not part of this configuration".into(),
            });
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor<T>>] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Mutable access; clones the tensor first if it is shared.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(Arc::clone(t), true)
                } else {
                    tape.constant(Arc::clone(t))
                }
            })
            .collect()
    }

    /// Evaluation-mode logits `[batch, tgt_len, vocab]` under teacher forcing.
    pub fn forward(&self, input: &TokenBatch, target: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut net = Network::new(self, &vars, None);
        let enc = net.encode(&mut tape, input)?;
        let logits = net.decode(&mut tape, &enc, &target.shifted_right(0))?;
        Ok(tape.value(logits).clone())
    }

    /// Evaluation-mode mean cross entropy over non-padding targets.
    pub fn loss(&self, input: &TokenBatch, target: &TokenBatch) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let loss = self.loss_on_tape(&mut tape, &vars, input, target, None)?;
        Ok(tape.value(loss).item())
    }

    /// Records the teacher-forced loss on `tape` using the bound `vars`.
    /// Dropout is active only when `rng` is given.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: &TokenBatch,
        target: &TokenBatch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if target.ids.iter().all(|&t| t == 0) {
            return Err(Error::DegenerateBatch);
        }
        if input.rows != target.rows {
            return Err(Error::Shape {
                op: "loss",
                lhs: vec![input.rows, input.cols],
                rhs: vec![target.rows, target.cols],
            });
        }
        let mut net = Network::new(self, vars, rng);
        let enc = net.encode(tape, input)?;
        let logits = net.decode(tape, &enc, &target.shifted_right(0))?;
        let targets: Vec<usize> = target.ids.iter().map(|&t| t as usize).collect();
        tape.cross_entropy_with_ignore(logits, &targets, 0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Serializes as the 32-bit checkpoint format.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{CHECKPOINT_MAGIC}\n");
        for (k, v) in self.config.to_manifest() {
            manifest.push_str(&format!("config {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {} f32 {offset}\n", shape.join(",")));
            offset += t.numel() * 4;
        }
        manifest.push_str(MANIFEST_END);
        manifest.push('\n');
        let mut bytes = manifest.into_bytes();
        bytes.reserve(offset);
        for t in &self.tensors {
            for &v in t.data() {
                bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        bytes
    }
}

impl ModelParameters<f32> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Loads and verifies that the checkpoint matches `expected`; a
    /// mismatch names the first tensor whose shape differs.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let params = Self::load(path)?;
        if params.config != *expected {
            let wanted = expected.parameter_shapes();
            for (name, shape) in &wanted {
                match params.get(name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Checkpoint {
                            tensor: name.clone(),
                            message: format!("expected shape {shape:?}, found {:?}", t.shape()),
                        })
                    }
                    None => {
                        return Err(Error::Checkpoint {
                            tensor: name.clone(),
                            message: format!("missing; expected shape {shape:?}"),
                        })
                    }
                }
            }
            return Err(Error::Checkpoint {
                tensor: "<config>".into(),
                message: format!("configuration differs: expected {expected:?}, found {:?}", params.config),
            });
        }
        Ok(params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let header_end = find_manifest_end(bytes)?;
        let manifest = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
        let payload = &bytes[header_end + MANIFEST_END.len() + 1..];
        let mut lines = manifest.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Format(format!("missing `{CHECKPOINT_MAGIC}` magic")));
        }
        let mut fields = HashMap::new();
        let mut entries = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["config", k, v] => {
                    fields.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, shape, "f32", offset] => {
                    let shape: Vec<usize> = if shape.is_empty() {
                        Vec::new()
                    } else {
                        shape
                            .split(',')
                            .map(|d| d.parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::Format(format!("bad shape for tensor `{name}`")))?
                    };
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| Error::Format(format!("bad offset for tensor `{name}`")))?;
                    let n: usize = shape.iter().product();
                    let end = offset + n * 4;
                    let raw = payload.get(offset..end).ok_or_else(|| {
                        Error::Format(format!("checkpoint truncated inside tensor `{name}`"))
                    })?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    entries.push((name.to_string(), Tensor::new(shape, data)?));
                }
                _ => return Err(Error::Format(format!("unrecognized manifest line `{line}`"))),
            }
        }
        let config = ModelConfig::from_manifest(&fields)?;
        Self::from_entries(config, entries)
    }
}

fn find_manifest_end(bytes: &[u8]) -> Result<usize> {
    let marker = format!("\n{MANIFEST_END}\n");
    bytes
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .map(|p| p + 1)
        .ok_or_else(|| Error::Format("checkpoint manifest is incomplete".into()))
}

fn truncated_normal(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Encoder output plus the additive key mask its padding implies.
pub struct Encoded {
    pub hidden: Var,
    pub key_mask: Var,
    pub rows: usize,
    pub len: usize,
}

/// One forward pass over bound parameter vars.
pub struct Network<'a, 'r, T: Float> {
    params: &'a ModelParameters<T>,
    vars: &'a [Var],
    rng: Option<&'r mut dyn RngCore>,
}

impl<'a, 'r, T: Float> Network<'a, 'r, T> {
    pub fn new(params: &'a ModelParameters<T>, vars: &'a [Var], rng: Option<&'r mut dyn RngCore>) -> Self {
        Self { params, vars, rng }
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.params.index[name]]
    }

    fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn drop(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let rate = self.params.config.dropout_rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
            _ => Ok(x),
        }
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, scale: &str) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let n = tape.rms_normalize(x, axis, T::from_f64_lossy(NORM_EPS))?;
        tape.mul(n, self.p(scale))
    }

    fn embed(&self, tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
        let v = self.config().vocab_size;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        if let Some(pos) = ids.iter().position(|&i| i >= v) {
            return Err(Error::Decode {
                position: pos,
                id: ids[pos] as u32,
            });
        }
        tape.embedding_gather(self.p("shared.embedding"), &ids, &[batch.rows, batch.cols])
    }

    /// `[1, H, q, k]` bias from the stack's bucket table.
    fn relpos(&self, tape: &mut Tape<T>, table: &str, q: usize, k: usize, bidirectional: bool) -> Result<Var> {
        let c = self.config();
        let mut buckets = Vec::with_capacity(q * k);
        for i in 0..q {
            for j in 0..k {
                buckets.push(relative_position_bucket(
                    j as i64 - i as i64,
                    bidirectional,
                    c.relpos_buckets,
                    c.relpos_max_distance,
                ));
            }
        }
        let g = tape.embedding_gather(self.p(table), &buckets, &[q, k])?;
        let h = tape.permute(g, &[2, 0, 1])?;
        tape.reshape(h, &[1, c.n_heads, q, k])
    }

    fn attention(&mut self, tape: &mut Tape<T>, query: Var, memory: Var, bias: Var, prefix: &str) -> Result<Var> {
        let (h, dh, d) = (self.config().n_heads, self.config().d_head(), self.config().d_model);
        let (b, tq) = (tape.shape(query)[0], tape.shape(query)[1]);
        let tk = tape.shape(memory)[1];
        let q = tape.matmul(query, self.p(&format!("{prefix}.q")))?;
        let q = tape.reshape(q, &[b, tq, h, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = tape.matmul(memory, self.p(&format!("{prefix}.k")))?;
        let k = tape.reshape(k, &[b, tk, h, dh])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let v = tape.matmul(memory, self.p(&format!("{prefix}.v")))?;
        let v = tape.reshape(v, &[b, tk, h, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let scores = tape.add(scores, bias)?;
        let probs = tape.softmax(scores, 3)?;
        let probs = self.drop(tape, probs)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, tq, d])?;
        tape.matmul(ctx, self.p(&format!("{prefix}.o")))
    }

    fn feed_forward(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(tape, x, &format!("{prefix}.ff.norm"))?;
        let h = tape.matmul(h, self.p(&format!("{prefix}.ff.wi")))?;
        let h = tape.relu(h);
        let h = self.drop(tape, h)?;
        let h = tape.matmul(h, self.p(&format!("{prefix}.ff.wo")))?;
        let h = self.drop(tape, h)?;
        tape.add(x, h)
    }

    pub fn encode(&mut self, tape: &mut Tape<T>, input: &TokenBatch) -> Result<Encoded> {
        let c = self.config().clone();
        if input.cols > c.max_source_len {
            return Err(Error::Length {
                which: "source",
                len: input.cols,
                max: c.max_source_len,
            });
        }
        let (b, s) = (input.rows, input.cols);
        let mask: Vec<T> = input
            .ids
            .iter()
            .map(|&t| if t == 0 { T::from_f64_lossy(MASK_VALUE) } else { T::zero() })
            .collect();
        let key_mask = tape.constant(Tensor::new(vec![b, 1, 1, s], mask)?);
        let rel = self.relpos(tape, "encoder.relpos_bias", s, s, true)?;
        let bias = tape.add(rel, key_mask)?;

        let x = self.embed(tape, input)?;
        let mut x = self.drop(tape, x)?;
        for l in 0..c.n_encoder_layers {
            let prefix = format!("encoder.{l}.self_attn");
            let h = self.norm(tape, x, &format!("{prefix}.norm"))?;
            let a = self.attention(tape, h, h, bias, &prefix)?;
            let a = self.drop(tape, a)?;
            x = tape.add(x, a)?;
            x = self.feed_forward(tape, x, &format!("encoder.{l}"))?;
        }
        let x = self.norm(tape, x, "encoder.final_norm")?;
        let hidden = self.drop(tape, x)?;
        Ok(Encoded {
            hidden,
            key_mask,
            rows: b,
            len: s,
        })
    }

    /// Logits `[batch, len, vocab]` for the given decoder inputs.
    pub fn decode(&mut self, tape: &mut Tape<T>, enc: &Encoded, decoder_input: &TokenBatch) -> Result<Var> {
        let c = self.config().clone();
        if decoder_input.cols > c.max_target_len {
            return Err(Error::Length {
                which: "target",
                len: decoder_input.cols,
                max: c.max_target_len,
            });
        }
        if decoder_input.rows != enc.rows {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![enc.rows, enc.len],
                rhs: vec![decoder_input.rows, decoder_input.cols],
            });
        }
        let t = decoder_input.cols;
        let mut causal = vec![T::zero(); t * t];
        for i in 0..t {
            for j in i + 1..t {
                causal[i * t + j] = T::from_f64_lossy(MASK_VALUE);
            }
        }
        let causal = tape.constant(Tensor::new(vec![1, 1, t, t], causal)?);
        let rel = self.relpos(tape, "decoder.relpos_bias", t, t, false)?;
        let self_bias = tape.add(rel, causal)?;

        let x = self.embed(tape, decoder_input)?;
        let mut x = self.drop(tape, x)?;
        for l in 0..c.n_decoder_layers {
            let prefix = format!("decoder.{l}.self_attn");
            let h = self.norm(tape, x, &format!("{prefix}.norm"))?;
            let a = self.attention(tape, h, h, self_bias, &prefix)?;
            let a = self.drop(tape, a)?;
            x = tape.add(x, a)?;

            let prefix = format!("decoder.{l}.cross_attn");
            let h = self.norm(tape, x, &format!("{prefix}.norm"))?;
            let a = self.attention(tape, h, enc.hidden, enc.key_mask, &prefix)?;
            let a = self.drop(tape, a)?;
            x = tape.add(x, a)?;
            x = self.feed_forward(tape, x, &format!("decoder.{l}"))?;
        }
        let x = self.norm(tape, x, "decoder.final_norm")?;
        let x = self.drop(tape, x)?;
        if c.tie_embeddings {
            let x = tape.scale(x, T::from_f64_lossy(1.0 / (c.d_model as f64).sqrt()));
            let et = tape.transpose(self.p("shared.embedding"))?;
            tape.matmul(x, et)
        } else {
            tape.matmul(x, self.p("lm_head"))
        }
    }
}
