//! Continual pre-training: frozen teacher, trainable student, AdamW with a
//! linear warmup/decay schedule, global gradient clipping, checkpoints and
//! exact resume.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_nsp_pair, EncodedCorpus, CLS, SEP};
use crate::error::{Error, Result};
use crate::masking::{apply_masking, pad_batch, Batch, IndicatorMode, MaskedExample, MaskingConfig};
use crate::model::{self, is_decayed, EncoderInput, ModelConfig, ModelParams, ParamVars};
use crate::objectives::{
    mlm_loss, nsp_loss, sent_cl_loss, tacl_terms, total_loss, LossBreakdown, LossConfig, LossParts, LossWeights,
    MetricsRecord, TaclReduction, Terms,
};
use crate::scalar::{c, Scalar};
use crate::tensor::{read_named_tensors, write_named_tensors, Graph, Mode, NamedTensors, Tensor, Var};

/// Named training recipes, mirroring the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipe {
    /// First-stage MLM + NSP training from random initialization.
    #[serde(rename = "pretrain-base")]
    PretrainBase,
    /// More MLM + NSP training of the base model.
    #[serde(rename = "baseline-mt", alias = "baseline")]
    BaselineMt,
    /// MLM + NSP + sentence-level contrastive.
    #[serde(rename = "model-1")]
    Model1,
    /// Token-aware contrastive only.
    #[serde(rename = "model-2")]
    Model2,
    /// MLM + NSP + token-aware contrastive.
    #[serde(rename = "tacl")]
    Tacl,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [Recipe::PretrainBase, Recipe::BaselineMt, Recipe::Model1, Recipe::Model2, Recipe::Tacl];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::PretrainBase => "pretrain-base",
            Recipe::BaselineMt => "baseline-mt",
            Recipe::Model1 => "model-1",
            Recipe::Model2 => "model-2",
            Recipe::Tacl => "tacl",
        }
    }

    pub fn terms(self) -> Terms {
        match self {
            Recipe::PretrainBase | Recipe::BaselineMt => Terms::BASELINE,
            Recipe::Model1 => Terms::MODEL_1,
            Recipe::Model2 => Terms::MODEL_2,
            Recipe::Tacl => Terms::TACL,
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Recipe::BaselineMt),
            _ => Recipe::ALL
                .into_iter()
                .find(|r| r.name() == s)
                .ok_or_else(|| Error::Invalid(format!("unknown recipe {s:?}"))),
        }
    }
}

/// Flat run configuration. Model extents only apply when training from
/// scratch; continual runs take them from the base checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub max_len: usize,
    pub tau: f64,
    pub tacl_reduction: TaclReduction,
    pub tacl_include_specials: bool,
    pub w_mlm: f64,
    pub w_nsp: f64,
    pub w_tacl: f64,
    pub w_sent_cl: f64,
    pub select_rate: f64,
    pub indicator: IndicatorMode,
    /// Draw the example pool once and cycle through it instead of
    /// re-sampling pairs and masks every step.
    pub static_data: bool,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Tacl,
            steps: 300,
            batch_size: 16,
            lr_peak: 1e-4,
            warmup_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            seed: 13,
            checkpoint_every: 0,
            max_len: 64,
            tau: 0.01,
            tacl_reduction: TaclReduction::Mean,
            tacl_include_specials: true,
            w_mlm: 1.0,
            w_nsp: 1.0,
            w_tacl: 1.0,
            w_sent_cl: 1.0,
            select_rate: 0.15,
            indicator: IndicatorMode::Selected,
            static_data: false,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            dropout_p: 0.1,
        }
    }
}

fn known_keys() -> Vec<String> {
    match toml::Table::try_from(TrainConfig::default()) {
        Ok(t) => t.keys().cloned().collect(),
        Err(_) => Vec::new(),
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl TrainConfig {
    pub fn for_recipe(recipe: Recipe) -> Self {
        Self { recipe, ..Self::default() }
    }

    /// Builds a config from TOML text plus `key=value` overrides, on top of
    /// `base`. Every unknown key and invalid value is reported at once.
    pub fn from_toml_with(base: &TrainConfig, text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(base.clone()).map_err(|e| Error::Invalid(e.to_string()))?;
        let file: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config { keys: vec![], messages: vec![e.to_string()] })?;
        let known = known_keys();
        let mut keys = Vec::new();
        let mut messages = Vec::new();
        let mut entries: Vec<(String, toml::Value)> = file.into_iter().collect();
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => entries.push((k.trim().to_string(), parse_override_value(v.trim()))),
                None => {
                    keys.push(o.clone());
                    messages.push(format!("override {o:?} is not key=value"));
                }
            }
        }
        for (k, v) in entries {
            if known.contains(&k) {
                table.insert(k, v);
            } else {
                messages.push(format!("unknown key {k:?}"));
                keys.push(k);
            }
        }
        for k in known.iter() {
            let Some(v) = table.get(k) else { continue };
            let mut probe = toml::Table::try_from(base.clone()).map_err(|e| Error::Invalid(e.to_string()))?;
            probe.insert(k.clone(), v.clone());
            if let Err(e) = probe.try_into::<TrainConfig>() {
                keys.push(k.clone());
                messages.push(format!("{k}: {}", e.message()));
            }
        }
        let bad_types = keys.iter().any(|k| known.contains(k));
        let parsed: Option<TrainConfig> = if bad_types { None } else { table.try_into().ok() };
        if let Some(cfg) = &parsed {
            if let Err(Error::Config { keys: k, messages: m }) = cfg.validate() {
                keys.extend(k);
                messages.extend(m);
            }
        }
        match parsed {
            Some(cfg) if keys.is_empty() => Ok(cfg),
            _ => Err(Error::Config { keys, messages }),
        }
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with(&Self::default(), text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Checks every field and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<(&str, String)> = Vec::new();
        let mut check = |ok: bool, key: &'static str, msg: String| {
            if !ok {
                bad.push((key, msg));
            }
        };
        check(self.steps > 0, "steps", "must be positive".into());
        check(self.batch_size > 0, "batch_size", "must be positive".into());
        check(
            self.recipe.terms().sent_cl.then_some(self.batch_size >= 2).unwrap_or(true),
            "batch_size",
            "sentence-level contrastive recipes need at least 2".into(),
        );
        check(self.lr_peak > 0.0 && self.lr_peak.is_finite(), "lr_peak", format!("must be positive, got {}", self.lr_peak));
        check((0.0..1.0).contains(&self.warmup_ratio), "warmup_ratio", format!("must be in [0, 1), got {}", self.warmup_ratio));
        check((0.0..1.0).contains(&self.beta1), "beta1", format!("must be in [0, 1), got {}", self.beta1));
        check((0.0..1.0).contains(&self.beta2), "beta2", format!("must be in [0, 1), got {}", self.beta2));
        check(self.adam_eps > 0.0, "adam_eps", "must be positive".into());
        check(self.weight_decay >= 0.0, "weight_decay", "must be non-negative".into());
        check(self.grad_clip_norm > 0.0, "grad_clip_norm", "must be positive".into());
        check(self.max_len >= 5, "max_len", "must hold [CLS] a [SEP] b [SEP]".into());
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", format!("must be positive, got {}", self.tau));
        for (k, w) in [("w_mlm", self.w_mlm), ("w_nsp", self.w_nsp), ("w_tacl", self.w_tacl), ("w_sent_cl", self.w_sent_cl)] {
            if !(w >= 0.0 && w.is_finite()) {
                bad.push((k, "must be a non-negative finite weight".into()));
            }
        }
        let mut check = |ok: bool, key: &'static str, msg: String| {
            if !ok {
                bad.push((key, msg));
            }
        };
        check(self.select_rate > 0.0 && self.select_rate <= 1.0, "select_rate", "must be in (0, 1]".into());
        check((0.0..1.0).contains(&self.dropout_p), "dropout_p", "must be in [0, 1)".into());
        if self.recipe == Recipe::PretrainBase {
            let m = self.model_config(100);
            if let Err(e) = m.validate() {
                bad.push(("d_model", e.to_string()));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                keys: bad.iter().map(|(k, _)| k.to_string()).collect(),
                messages: bad.iter().map(|(k, m)| format!("{k}: {m}")).collect(),
            })
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout_p: self.dropout_p,
            ln_eps: 1e-12,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            terms: self.recipe.terms(),
            weights: LossWeights { mlm: self.w_mlm, nsp: self.w_nsp, tacl: self.w_tacl, sent_cl: self.w_sent_cl },
            tacl_reduction: self.tacl_reduction,
            tacl_include_specials: self.tacl_include_specials,
        }
    }

    pub fn masking_config(&self) -> MaskingConfig {
        MaskingConfig { select_rate: self.select_rate, indicator: self.indicator, ..MaskingConfig::default() }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.steps as f64).floor() as usize
    }
}

/// Learning rate for update `step`: linear warmup from 0 to `lr_peak` over
/// the warmup steps, then linear decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps();
    let step = step.min(cfg.steps);
    if step < w {
        cfg.lr_peak * (step as f64 / w as f64)
    } else if cfg.steps == w {
        cfg.lr_peak
    } else {
        cfg.lr_peak * ((cfg.steps - step) as f64 / (cfg.steps - w) as f64)
    }
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: NamedTensors<T>,
    pub v: NamedTensors<T>,
    /// Number of updates applied so far.
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps, weight_decay: c.weight_decay }
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &NamedTensors<T>) -> Self {
        let zeros: NamedTensors<T> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn to_named(&self) -> NamedTensors<T> {
        let mut out = NamedTensors::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    fn from_named(named: NamedTensors<T>, step: usize, params: &NamedTensors<T>) -> Result<Self> {
        let mut s = Self { m: NamedTensors::new(), v: NamedTensors::new(), step };
        for (k, t) in named {
            if let Some(name) = k.strip_prefix("m.") {
                s.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                s.v.insert(name.to_string(), t);
            } else {
                return Err(Error::Invalid(format!("unexpected optimizer tensor {k}")));
            }
        }
        for (k, p) in params {
            for moments in [&s.m, &s.v] {
                match moments.get(k) {
                    Some(t) if t.shape() == p.shape() => {}
                    _ => return Err(Error::Invalid(format!("optimizer moments missing or misshapen for {k}"))),
                }
            }
        }
        Ok(s)
    }
}

/// One decoupled-weight-decay Adam update. Decay multiplies eligible
/// parameters by `1 - lr * weight_decay` before the Adam step.
pub fn adamw_step<T: Scalar>(
    params: &mut NamedTensors<T>,
    grads: &NamedTensors<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::TrainingAborted { step: state.step + 1, reason: format!("non-finite gradient in {name}") });
        }
    }
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::Invalid(format!("no gradient for {name}")))?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::Invalid(format!("no moment for {name}")))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::Invalid(format!("no moment for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::shape("adamw_step", format!("{name}: {:?} vs {:?}", g.shape(), p.shape())));
        }
        let decay = if is_decayed(name) { 1.0 - lr * hp.weight_decay } else { 1.0 };
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = gi.to_f64_lossy();
            let mi = hp.beta1 * md[i].to_f64_lossy() + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * vd[i].to_f64_lossy() + (1.0 - hp.beta2) * gi * gi;
            md[i] = c(mi);
            vd[i] = c(vi);
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + hp.eps);
            pd[i] = c(pd[i].to_f64_lossy() * decay - update);
        }
    }
    state.step += 1;
    Ok(())
}

/// Euclidean norm of all gradients together, accumulated in name order.
pub fn global_grad_norm<T: Scalar>(grads: &NamedTensors<T>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|&x| x.to_f64_lossy().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients when their global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut NamedTensors<T>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let s: T = c(max_norm / (norm + 1e-6));
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// A training example: the masked pair, plus a second independent masking
/// of the same pair for sentence-level contrastive recipes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub view: MaskedExample,
    pub second_view: Option<MaskedExample>,
}

/// RNG for everything that happens in update `step`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn draw_example<R: rand::Rng + ?Sized>(
    data: &EncodedCorpus,
    vocab_size: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainExample> {
    let mcfg = cfg.masking_config();
    let (seq, is_next) = make_nsp_pair(data, rng, cfg.max_len)?;
    let view = apply_masking(&seq, is_next, vocab_size, &mcfg, rng)?;
    let second_view =
        if cfg.recipe.terms().sent_cl { Some(apply_masking(&seq, is_next, vocab_size, &mcfg, rng)?) } else { None };
    Ok(TrainExample { view, second_view })
}

/// Where batches come from: fresh draws every step, or one fixed pool.
#[derive(Debug, Clone)]
pub enum ExampleSource {
    Dynamic,
    Static(Vec<TrainExample>),
}

impl ExampleSource {
    pub fn new(data: &EncodedCorpus, vocab_size: usize, cfg: &TrainConfig) -> Result<Self> {
        if !cfg.static_data {
            return Ok(ExampleSource::Dynamic);
        }
        let pool_size = data.sentences().count().max(cfg.batch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let pool = (0..pool_size).map(|_| draw_example(data, vocab_size, cfg, &mut rng)).collect::<Result<_>>()?;
        Ok(ExampleSource::Static(pool))
    }

    /// Examples for 1-based update `step`. The static pool wraps around.
    pub fn batch<R: rand::Rng + ?Sized>(
        &self,
        step: usize,
        data: &EncodedCorpus,
        vocab_size: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Vec<TrainExample>> {
        match self {
            ExampleSource::Dynamic => (0..cfg.batch_size).map(|_| draw_example(data, vocab_size, cfg, rng)).collect(),
            ExampleSource::Static(pool) => {
                let start = (step - 1) * cfg.batch_size;
                Ok((0..cfg.batch_size).map(|i| pool[(start + i) % pool.len()].clone()).collect())
            }
        }
    }
}

/// Padded tensors of one update: the masked view, and the second view for
/// sentence-level contrastive recipes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepBatch {
    pub view: Batch,
    pub second_view: Option<Batch>,
}

impl StepBatch {
    /// Pads to the longest example, or to `pad_to` when given.
    pub fn new(examples: &[TrainExample], pad_to: Option<usize>) -> Result<Self> {
        let longest = examples.iter().map(|e| e.view.attention_len).max().unwrap_or(0);
        let width = pad_to.unwrap_or(longest).max(longest);
        let view: Vec<MaskedExample> = examples.iter().map(|e| e.view.clone()).collect();
        let second: Option<Vec<MaskedExample>> = examples.iter().map(|e| e.second_view.clone()).collect();
        Ok(Self {
            view: pad_batch(&view, width)?,
            second_view: match second {
                Some(s) if !s.is_empty() => Some(pad_batch(&s, width)?),
                _ => None,
            },
        })
    }
}

fn row_input(b: &Batch, i: usize, masked: bool) -> EncoderInput<'_> {
    EncoderInput {
        ids: if masked { &b.masked_ids[i] } else { &b.original_ids[i] },
        segment_ids: &b.segment_ids[i],
        padding_mask: &b.padding_mask[i],
    }
}

/// Teacher final-layer states of every row (unmasked input, infer mode),
/// padding rows removed.
pub fn teacher_states<T: Scalar>(teacher: &ModelParams<T>, batch: &Batch) -> Result<Vec<Tensor<T>>> {
    (0..batch.len())
        .map(|i| {
            let acts = model::encode(teacher, row_input(batch, i, false))?;
            Ok(acts.hidden.last().expect("final layer").clone())
        })
        .collect()
}

/// Builds the composite loss of a batch on `g`. `teacher` holds per-row
/// final-layer teacher states when the recipe uses the token-aware term.
/// Every term is normalized over the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Scalar, R: rand::Rng + ?Sized>(
    g: &mut Graph<T>,
    mcfg: &ModelConfig,
    student: &ParamVars,
    batch: &StepBatch,
    teacher: Option<&[Tensor<T>]>,
    lcfg: &LossConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    lcfg.validate()?;
    let terms = lcfg.terms;
    let view = &batch.view;
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut pooled = Vec::new();
    let mut tacl_sum: Option<Var> = None;
    let mut tacl_count = 0usize;
    let mut cls1 = Vec::new();
    let mut cls2 = Vec::new();

    for b in 0..view.len() {
        let n = view.lengths[b];
        let acts = model::forward(g, mcfg, student, row_input(view, b, true), mode, rng)?;
        let last = acts.last();
        if terms.mlm {
            let rows: Vec<usize> = view.mlm_targets[b].iter().map(|&(p, _)| p).collect();
            let base = mlm_targets.len();
            mlm_rows.push(g.select_rows(last, &rows)?);
            mlm_targets.extend(view.mlm_targets[b].iter().enumerate().map(|(k, &(_, id))| (base + k, id)));
        }
        if terms.nsp {
            pooled.push(acts.pooled);
        }
        if terms.tacl {
            let states = teacher.ok_or_else(|| Error::Invalid("token-aware term needs teacher states".into()))?;
            let t = g.constant(states[b].clone());
            let ids = &view.original_ids[b][..n];
            let denom: Vec<bool> =
                if lcfg.tacl_include_specials { vec![true; n] } else { ids.iter().map(|&id| id != CLS && id != SEP).collect() };
            let per_pos = tacl_terms(g, last, t, &view.mask_indicator[b][..n], &denom, lcfg.tau)?;
            tacl_count += g.value(per_pos).numel();
            let s = g.sum(per_pos)?;
            tacl_sum = Some(match tacl_sum {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        if terms.sent_cl {
            let w = batch.second_view.as_ref().ok_or_else(|| Error::Invalid("sentence-level term needs two views".into()))?;
            let acts2 = model::forward(g, mcfg, student, row_input(w, b, true), mode, rng)?;
            cls1.push(g.select_rows(last, &[0])?);
            let last2 = acts2.last();
            cls2.push(g.select_rows(last2, &[0])?);
        }
    }

    let mut parts = LossParts::default();
    if terms.mlm {
        let hidden = g.concat_rows(&mlm_rows)?;
        let logits = model::mlm_logits(g, mcfg, student, hidden)?;
        parts.mlm = Some(mlm_loss(g, logits, &mlm_targets)?);
    }
    if terms.nsp {
        let p = g.concat_rows(&pooled)?;
        let logits = model::nsp_logits(g, student, p)?;
        parts.nsp = Some(nsp_loss(g, logits, &view.is_next)?);
    }
    if let Some(s) = tacl_sum {
        parts.tacl = Some(match lcfg.tacl_reduction {
            TaclReduction::Mean => g.scale(s, c(1.0 / tacl_count as f64))?,
            TaclReduction::Sum => s,
        });
    }
    if terms.sent_cl {
        let a = g.concat_rows(&cls1)?;
        let b = g.concat_rows(&cls2)?;
        parts.sent_cl = Some(sent_cl_loss(g, a, b, lcfg.tau)?);
    }
    total_loss(g, &parts, lcfg)
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub metrics: Vec<MetricsRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEACHER_PREFIX: &str = "teacher";
pub const FINAL_PREFIX: &str = "final";
pub const LAST_GOOD_PREFIX: &str = "last-good";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

pub fn checkpoint_prefix(out: &Path, step: usize) -> PathBuf {
    out.join(format!("ckpt-{step:06}"))
}

fn optimizer_path(prefix: &Path) -> PathBuf {
    let (bin, _) = model::checkpoint_paths(prefix);
    bin.with_extension("optim.bin")
}

/// Continual training state: student, optional frozen teacher, optimizer.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub student: ModelParams<T>,
    pub teacher: Option<ModelParams<T>>,
    pub optimizer: OptimizerState<T>,
    out: Option<PathBuf>,
    source: ExampleSource,
    metrics: Vec<MetricsRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// Starts from `base`. The teacher, when the recipe has one, is a copy of
    /// `base` that is never updated.
    pub fn new(cfg: TrainConfig, base: ModelParams<T>, data: &EncodedCorpus, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        base.validate()?;
        if cfg.max_len > base.config.max_len {
            return Err(Error::Config {
                keys: vec!["max_len".into()],
                messages: vec![format!("max_len {} exceeds the model's {}", cfg.max_len, base.config.max_len)],
            });
        }
        let teacher = cfg.recipe.terms().needs_teacher().then(|| base.clone());
        let optimizer = OptimizerState::new(&base.tensors);
        let source = ExampleSource::new(data, base.config.vocab_size, &cfg)?;
        let t = Self { cfg, student: base, teacher, optimizer, out: out.map(Path::to_path_buf), source, metrics: Vec::new() };
        if let Some(dir) = &t.out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            fs::write(dir.join(RESOLVED_CONFIG_FILE), t.cfg.to_toml()).map_err(|e| Error::io(dir, e))?;
            File::create(dir.join(METRICS_FILE)).map_err(|e| Error::io(dir, e))?;
            if let Some(teacher) = &t.teacher {
                teacher.save(&dir.join(TEACHER_PREFIX), 0, Some(t.train_meta()))?;
            }
        }
        Ok(t)
    }

    /// Continues a run from a periodic checkpoint in `out`.
    pub fn resume(cfg: TrainConfig, checkpoint: &Path, data: &EncodedCorpus, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let (student, meta) = ModelParams::<T>::load(checkpoint)?;
        let named = read_named_tensors(&optimizer_path(checkpoint))?;
        let optimizer = OptimizerState::from_named(named, meta.step, &student.tensors)?;
        let teacher = if cfg.recipe.terms().needs_teacher() {
            Some(ModelParams::<T>::load(&out.join(TEACHER_PREFIX))?.0)
        } else {
            None
        };
        let source = ExampleSource::new(data, student.config.vocab_size, &cfg)?;
        let metrics_path = out.join(METRICS_FILE);
        let mut metrics = Vec::new();
        if metrics_path.exists() {
            let f = File::open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&metrics_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: MetricsRecord = serde_json::from_str(&line)?;
                if r.step <= meta.step {
                    metrics.push(r);
                }
            }
        }
        let t = Self { cfg, student, teacher, optimizer, out: Some(out.to_path_buf()), source, metrics };
        let mut text = String::new();
        for r in &t.metrics {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(&metrics_path, text).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    fn train_meta(&self) -> serde_json::Value {
        serde_json::json!({ "recipe": self.cfg.recipe.name(), "seed": self.cfg.seed, "config": self.cfg })
    }

    /// Saves student and optimizer state under `prefix`.
    pub fn save_checkpoint(&self, prefix: &Path) -> Result<()> {
        self.student.save(prefix, self.step(), Some(self.train_meta()))?;
        write_named_tensors(&optimizer_path(prefix), &self.optimizer.to_named())
    }

    /// Runs one update and returns its metrics record.
    pub fn train_step(&mut self, data: &EncodedCorpus) -> Result<MetricsRecord> {
        let started = Instant::now();
        let step = self.step() + 1;
        let mut rng = step_rng(self.cfg.seed, step);
        let vocab = self.student.config.vocab_size;
        let examples = self.source.batch(step, data, vocab, &self.cfg, &mut rng)?;
        let batch = StepBatch::new(&examples, None)?;
        let teacher = match &self.teacher {
            Some(t) => Some(teacher_states(t, &batch.view)?),
            None => None,
        };
        let mut g = Graph::<T>::new();
        let vars = self.student.register(&mut g, true);
        let built = batch_loss(
            &mut g,
            &self.student.config,
            &vars,
            &batch,
            teacher.as_deref(),
            &self.cfg.loss_config(),
            Mode::Train,
            &mut rng,
        );
        let (loss, breakdown) = match built {
            Ok(x) => x,
            Err(Error::NonFinite { op }) => return self.abort(step, format!("non-finite value in {op}")),
            Err(e) => return Err(e),
        };
        if !breakdown.total.is_finite() {
            return self.abort(step, "non-finite loss".into());
        }
        let mut grads_raw = g.backward(loss)?;
        let mut grads = NamedTensors::new();
        for (name, &v) in &vars.vars {
            let gt = grads_raw.take(v).unwrap_or_else(|| Tensor::zeros(self.student.tensors[name].shape()));
            grads.insert(name.clone(), gt);
        }
        if grads.values().any(|t| !t.is_finite()) {
            return self.abort(step, "non-finite gradient".into());
        }
        clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
        let lr = lr_at(step, &self.cfg);
        adamw_step(&mut self.student.tensors, &grads, &mut self.optimizer, lr, &AdamParams::from(&self.cfg))?;
        let record = MetricsRecord::new(step, &breakdown, lr, started.elapsed().as_secs_f64());
        if let Some(dir) = &self.out {
            let path = dir.join(METRICS_FILE);
            let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&path, e))?;
            if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint(&checkpoint_prefix(dir, step))?;
            }
        }
        self.metrics.push(record);
        Ok(record)
    }

    fn abort(&self, step: usize, reason: String) -> Result<MetricsRecord> {
        if let Some(dir) = &self.out {
            self.save_checkpoint(&dir.join(LAST_GOOD_PREFIX))?;
        }
        Err(Error::TrainingAborted { step, reason })
    }

    /// Trains up to `cfg.steps` and writes the final checkpoint.
    pub fn run(mut self, data: &EncodedCorpus) -> Result<TrainOutcome<T>> {
        self.run_until(data, self.cfg.steps)?;
        if let Some(dir) = &self.out {
            self.save_checkpoint(&dir.join(FINAL_PREFIX))?;
        }
        Ok(TrainOutcome { params: self.student, optimizer: self.optimizer, metrics: self.metrics })
    }

    /// Trains until `until` updates have been applied (capped at `cfg.steps`).
    pub fn run_until(&mut self, data: &EncodedCorpus, until: usize) -> Result<()> {
        while self.step() < until.min(self.cfg.steps) {
            self.train_step(data)?;
        }
        Ok(())
    }
}

/// Strips the wall-clock field so runs can be compared for equality.
pub fn without_timing(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records.iter().map(|r| MetricsRecord { seconds: 0.0, ..*r }).collect()
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
