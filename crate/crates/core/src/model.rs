//! Small post-layer-norm BERT encoder with MLM and NSP heads.
//!
//! Student and teacher share this one implementation; they differ only in
//! the parameter set they register and in [`Mode`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{read_named_tensors, write_named_tensors, Graph, Mode, NamedTensors, Tensor, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;
/// Standard deviation of a unit normal truncated to [-2, 2].
const TRUNCATED_UNIT_STD: f64 = 0.879_625_6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_len: 128, dropout_p: 0.1, ln_eps: 1e-12 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_len];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid("model extents must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || self.ln_eps <= 0.0 {
            return Err(Error::Invalid("dropout_p must be in [0, 1) and ln_eps positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

pub mod names {
    pub const TOKEN_EMB: &str = "embeddings.token";
    pub const POSITION_EMB: &str = "embeddings.position";
    pub const SEGMENT_EMB: &str = "embeddings.segment";
    pub const EMB_LN_GAIN: &str = "embeddings.ln.gain";
    pub const EMB_LN_BIAS: &str = "embeddings.ln.bias";
    pub const POOLER_W: &str = "pooler.weight";
    pub const POOLER_B: &str = "pooler.bias";
    pub const MLM_TRANSFORM_W: &str = "mlm.transform.weight";
    pub const MLM_TRANSFORM_B: &str = "mlm.transform.bias";
    pub const MLM_LN_GAIN: &str = "mlm.ln.gain";
    pub const MLM_LN_BIAS: &str = "mlm.ln.bias";
    pub const MLM_OUTPUT_BIAS: &str = "mlm.output.bias";
    pub const NSP_W: &str = "nsp.weight";
    pub const NSP_B: &str = "nsp.bias";

    pub fn layer(i: usize, rest: &str) -> String {
        format!("layers.{i}.{rest}")
    }
}

/// Whether decoupled weight decay applies to a parameter.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".ln.") || name.ends_with("_ln.gain"))
}

/// All trainable tensors of the encoder and both heads, by name. The MLM
/// output projection is tied to the token embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: NamedTensors<T>,
}

fn layer_shapes(cfg: &ModelConfig, i: usize) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut v = Vec::new();
    for p in ["q", "k", "v", "o"] {
        v.push((names::layer(i, &format!("attn.{p}.weight")), vec![d, d]));
        v.push((names::layer(i, &format!("attn.{p}.bias")), vec![d]));
    }
    v.push((names::layer(i, "attn_ln.gain"), vec![d]));
    v.push((names::layer(i, "attn_ln.bias"), vec![d]));
    v.push((names::layer(i, "ffn.in.weight"), vec![d, f]));
    v.push((names::layer(i, "ffn.in.bias"), vec![f]));
    v.push((names::layer(i, "ffn.out.weight"), vec![f, d]));
    v.push((names::layer(i, "ffn.out.bias"), vec![d]));
    v.push((names::layer(i, "ffn_ln.gain"), vec![d]));
    v.push((names::layer(i, "ffn_ln.bias"), vec![d]));
    v
}

/// Every parameter name with its shape, in a fixed order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut v = vec![
        (names::TOKEN_EMB.to_string(), vec![cfg.vocab_size, d]),
        (names::POSITION_EMB.to_string(), vec![cfg.max_len, d]),
        (names::SEGMENT_EMB.to_string(), vec![2, d]),
        (names::EMB_LN_GAIN.to_string(), vec![d]),
        (names::EMB_LN_BIAS.to_string(), vec![d]),
    ];
    for i in 0..cfg.n_layers {
        v.extend(layer_shapes(cfg, i));
    }
    v.extend([
        (names::POOLER_W.to_string(), vec![d, d]),
        (names::POOLER_B.to_string(), vec![d]),
        (names::MLM_TRANSFORM_W.to_string(), vec![d, d]),
        (names::MLM_TRANSFORM_B.to_string(), vec![d]),
        (names::MLM_LN_GAIN.to_string(), vec![d]),
        (names::MLM_LN_BIAS.to_string(), vec![d]),
        (names::MLM_OUTPUT_BIAS.to_string(), vec![cfg.vocab_size]),
        (names::NSP_W.to_string(), vec![d, 2]),
        (names::NSP_B.to_string(), vec![2]),
    ]);
    v
}

/// Sample from a normal truncated at ±2 of its own σ, rescaled so the
/// realized standard deviation is `std`.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std / TRUNCATED_UNIT_STD;
        }
    }
}

/// Truncated-normal weights (realized std 0.02, cut at ±2σ), unit layer-norm
/// gains, zero biases.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = NamedTensors::new();
    for (name, shape) in param_shapes(config) {
        let t = if name.ends_with(".gain") {
            Tensor::filled(&shape, T::one())
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| c::<T>(truncated_normal(&mut rng, INIT_STD))).collect();
            Tensor::new(shape, data)?
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { config: config.clone(), tensors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    #[serde(flatten)]
    pub config: ModelConfig,
    /// Free-form training context (resolved run config, recipe, seed, …).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

/// `<prefix>.bin` and `<prefix>.json` for a checkpoint prefix.
pub fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let s = prefix.as_os_str().to_string_lossy();
    let strip = s.strip_suffix(".bin").or_else(|| s.strip_suffix(".json")).unwrap_or(&s).to_string();
    (PathBuf::from(format!("{strip}.bin")), PathBuf::from(format!("{strip}.json")))
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that names and shapes match the config exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expect = param_shapes(&self.config);
        if expect.len() != self.tensors.len() {
            return Err(Error::Invalid(format!("expected {} tensors, found {}", expect.len(), self.tensors.len())));
        }
        for (name, shape) in expect {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("params", format!("{name}: {:?} != {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn save(&self, prefix: &Path, step: usize, train: Option<serde_json::Value>) -> Result<()> {
        let (bin, json) = checkpoint_paths(prefix);
        write_named_tensors(&bin, &self.tensors)?;
        let meta = CheckpointMeta { format_version: CHECKPOINT_FORMAT_VERSION, step, config: self.config.clone(), train };
        let text = serde_json::to_string_pretty(&meta)?;
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }

    pub fn load(prefix: &Path) -> Result<(Self, CheckpointMeta)> {
        let (bin, json) = checkpoint_paths(prefix);
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format {
                path: json.display().to_string(),
                reason: format!("unsupported checkpoint version {}", meta.format_version),
            });
        }
        let tensors = read_named_tensors(&bin)?;
        let p = ModelParams { config: meta.config.clone(), tensors };
        p.validate()?;
        Ok((p, meta))
    }

    /// Places every tensor on `g`, trainable or frozen.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }))
            .collect();
        ParamVars { vars }
    }
}

/// Parameter handles on a particular graph.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not registered"))
    }
}

/// One (possibly right-padded) input row.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub segment_ids: &'a [u8],
    /// `true` at real tokens; real tokens must form a prefix.
    pub padding_mask: &'a [bool],
}

impl<'a> EncoderInput<'a> {
    /// Input without padding.
    pub fn unpadded(ids: &'a [u32], segment_ids: &'a [u8], all_true: &'a [bool]) -> Self {
        Self { ids, segment_ids, padding_mask: &all_true[..ids.len()] }
    }

    fn attention_len(&self) -> Result<usize> {
        let n = self.padding_mask.iter().take_while(|&&m| m).count();
        if self.padding_mask[n..].iter().any(|&m| m) {
            return Err(Error::Invalid("padding must be on the right".into()));
        }
        if n == 0 {
            return Err(Error::Invalid("input has no real tokens".into()));
        }
        Ok(n)
    }
}

/// Forward activations on a graph; hidden states have padding rows removed.
#[derive(Debug, Clone)]
pub struct ActivationVars {
    /// `n_layers + 1` states; index 0 is the embedding output.
    pub hidden: Vec<Var>,
    pub pooled: Var,
    /// Attention probabilities per layer and head (full padded width).
    pub attention: Vec<Vec<Var>>,
    pub attention_len: usize,
}

impl ActivationVars {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("at least the embedding output")
    }
}

/// Plain activation tensors, for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderActivations<T> {
    pub hidden: Vec<Tensor<T>>,
    pub pooled: Tensor<T>,
}

pub fn forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamVars,
    input: EncoderInput<'_>,
    mode: Mode,
    rng: &mut R,
) -> Result<ActivationVars> {
    let m = input.ids.len();
    if m == 0 || input.segment_ids.len() != m || input.padding_mask.len() != m {
        return Err(Error::shape("forward", "ids, segment ids and padding mask must share one non-zero length"));
    }
    if m > cfg.max_len {
        return Err(Error::Overlong { len: m, max_len: cfg.max_len });
    }
    if let Some(&bad) = input.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::IdOutOfRange { id: bad, vocab_size: cfg.vocab_size });
    }
    if input.segment_ids.iter().any(|&s| s > 1) {
        return Err(Error::Invalid("segment ids must be 0 or 1".into()));
    }
    let n = input.attention_len()?;
    let eps = c::<T>(cfg.ln_eps);
    let pdrop = cfg.dropout_p;

    let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..m).collect();
    let segs: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();
    let tok = g.embedding_lookup(p.get(names::TOKEN_EMB), &ids)?;
    let pos = g.embedding_lookup(p.get(names::POSITION_EMB), &positions)?;
    let seg = g.embedding_lookup(p.get(names::SEGMENT_EMB), &segs)?;
    let e = g.add(tok, pos)?;
    let e = g.add(e, seg)?;
    let e = g.layer_norm(e, p.get(names::EMB_LN_GAIN), p.get(names::EMB_LN_BIAS), eps)?;
    let mut x = g.dropout(e, pdrop, mode, rng)?;

    let mut full_states = vec![x];
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let dh = cfg.head_dim();
    let score_scale = c::<T>(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.n_layers {
        let w = |s: &str| p.get(&names::layer(l, s));
        let q = g.linear(x, w("attn.q.weight"), w("attn.q.bias"))?;
        let k = g.linear(x, w("attn.k.weight"), w("attn.k.bias"))?;
        let v = g.linear(x, w("attn.v.weight"), w("attn.v.bias"))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, score_scale)?;
            let a = g.masked_softmax(s, 1, Some(input.padding_mask))?;
            probs.push(a);
            let a = g.dropout(a, pdrop, mode, rng)?;
            heads.push(g.matmul(a, vh)?);
        }
        attention.push(probs);
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let o = g.linear(ctx, w("attn.o.weight"), w("attn.o.bias"))?;
        let o = g.dropout(o, pdrop, mode, rng)?;
        let r = g.add(x, o)?;
        let x1 = g.layer_norm(r, w("attn_ln.gain"), w("attn_ln.bias"), eps)?;
        let f = g.linear(x1, w("ffn.in.weight"), w("ffn.in.bias"))?;
        let f = g.gelu(f)?;
        let f = g.linear(f, w("ffn.out.weight"), w("ffn.out.bias"))?;
        let f = g.dropout(f, pdrop, mode, rng)?;
        let r = g.add(x1, f)?;
        x = g.layer_norm(r, w("ffn_ln.gain"), w("ffn_ln.bias"), eps)?;
        full_states.push(x);
    }

    let cls = g.select_rows(x, &[0])?;
    let pooled = g.linear(cls, p.get(names::POOLER_W), p.get(names::POOLER_B))?;
    let pooled = g.tanh(pooled)?;

    let hidden = if n == m {
        full_states
    } else {
        let keep: Vec<usize> = (0..n).collect();
        full_states.into_iter().map(|h| g.select_rows(h, &keep)).collect::<Result<Vec<_>>>()?
    };
    Ok(ActivationVars { hidden, pooled, attention, attention_len: n })
}

/// MLM logits for the given hidden rows: dense, GELU, layer norm, then the
/// tied token-embedding projection plus output bias.
pub fn mlm_logits<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, p: &ParamVars, hidden: Var) -> Result<Var> {
    let t = g.linear(hidden, p.get(names::MLM_TRANSFORM_W), p.get(names::MLM_TRANSFORM_B))?;
    let t = g.gelu(t)?;
    let t = g.layer_norm(t, p.get(names::MLM_LN_GAIN), p.get(names::MLM_LN_BIAS), c(cfg.ln_eps))?;
    let logits = g.matmul_t(t, p.get(names::TOKEN_EMB))?;
    g.add_row(logits, p.get(names::MLM_OUTPUT_BIAS))
}

/// Two-way NSP logits (`[1, 2]`, class 0 = is next) from the pooled vector.
pub fn nsp_logits<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, pooled: Var) -> Result<Var> {
    g.linear(pooled, p.get(names::NSP_W), p.get(names::NSP_B))
}

/// Inference-mode forward returning plain tensors.
pub fn encode<T: Scalar>(params: &ModelParams<T>, input: EncoderInput<'_>) -> Result<EncoderActivations<T>> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let acts = forward(&mut g, &params.config, &p, input, Mode::Infer, &mut unused)?;
    Ok(EncoderActivations {
        hidden: acts.hidden.iter().map(|&h| g.value(h).clone()).collect(),
        pooled: g.value(acts.pooled).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 30, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_len: 16, dropout_p: 0.1, ln_eps: 1e-12 }
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let a = init_params::<f32>(&tiny(), 11).unwrap();
        let b = init_params::<f32>(&tiny(), 11).unwrap();
        assert_eq!(crate::tensor::encode_named_tensors(&a.tensors), crate::tensor::encode_named_tensors(&b.tensors));
        a.validate().unwrap();
        assert!(a.get(names::EMB_LN_GAIN).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get(&names::layer(1, "ffn_ln.gain")).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get(names::NSP_B).unwrap().data().iter().all(|&v| v == 0.0));
        let w = a.get(names::TOKEN_EMB).unwrap();
        assert!(w.data().iter().all(|&v| v.abs() <= 2.0 * 0.02 / 0.8796));
    }

    #[test]
    fn init_std_matches_target() {
        let cfg = ModelConfig { vocab_size: 4000, d_model: 64, ..tiny() };
        let p = init_params::<f64>(&cfg, 3).unwrap();
        let w = p.get(names::TOKEN_EMB).unwrap().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - INIT_STD).abs() < 0.001, "std {std}");
        assert!(mean.abs() < 0.001);
    }

    #[test]
    fn decay_eligibility() {
        assert!(is_decayed("layers.0.attn.q.weight"));
        assert!(is_decayed(names::TOKEN_EMB));
        assert!(!is_decayed("layers.0.attn.q.bias"));
        assert!(!is_decayed("layers.1.ffn_ln.gain"));
        assert!(!is_decayed(names::EMB_LN_GAIN));
        assert!(!is_decayed(names::MLM_OUTPUT_BIAS));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params::<f32>(&tiny(), 5).unwrap();
        let prefix = dir.path().join("ckpt");
        p.save(&prefix, 17, None).unwrap();
        let (q, meta) = ModelParams::<f32>::load(&prefix).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta.step, 17);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ckpt.json")).unwrap()).unwrap();
        assert_eq!(json["format_version"], 1);
        assert_eq!(json["d_model"], 8);
    }

    #[test]
    fn shapes_and_infer_determinism() {
        let cfg = tiny();
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let ids = [2u32, 7, 8, 9, 3];
        let segs = [0u8; 5];
        let all = [true; 5];
        let a = encode(&p, EncoderInput::unpadded(&ids, &segs, &all)).unwrap();
        let b = encode(&p, EncoderInput::unpadded(&ids, &segs, &all)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hidden.len(), cfg.n_layers + 1);
        assert!(a.hidden.iter().all(|h| h.shape() == [5, 8] && h.is_finite()));
        assert_eq!(a.pooled.shape(), [1, 8]);

        let mut g = Graph::new();
        let pv = p.register(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let acts = forward(&mut g, &cfg, &pv, EncoderInput::unpadded(&ids, &segs, &all), Mode::Infer, &mut rng).unwrap();
        let ml = mlm_logits(&mut g, &cfg, &pv, acts.last()).unwrap();
        assert_eq!(g.value(ml).shape(), [5, 30]);
        let nl = nsp_logits(&mut g, &pv, acts.pooled).unwrap();
        assert_eq!(g.value(nl).shape(), [1, 2]);
    }

    #[test]
    fn invalid_inputs() {
        let cfg = tiny();
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let all = [true; 20];
        let segs = [0u8; 20];
        assert!(matches!(
            encode(&p, EncoderInput::unpadded(&[2, 99, 3], &segs[..3], &all)),
            Err(Error::IdOutOfRange { id: 99, .. })
        ));
        let long = [5u32; 17];
        assert!(matches!(encode(&p, EncoderInput::unpadded(&long, &segs[..17], &all)), Err(Error::Overlong { .. })));
        let mask = [true, false, true];
        assert!(encode(&p, EncoderInput { ids: &[2, 5, 3], segment_ids: &segs[..3], padding_mask: &mask }).is_err());
        let bad = ModelConfig { n_heads: 3, ..cfg };
        assert!(init_params::<f32>(&bad, 0).is_err());
    }
}
