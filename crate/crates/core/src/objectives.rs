//! Training objectives: masked language modelling, next sentence prediction,
//! the token-aware contrastive loss, a sentence-level contrastive ablation,
//! and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{Graph, Var};

/// How the token-aware contrastive terms are reduced over selected positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaclReduction {
    /// Divide the sum by the number of selected positions.
    #[default]
    Mean,
    /// Raw sum over selected positions.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Terms {
    pub mlm: bool,
    pub nsp: bool,
    pub tacl: bool,
    pub sent_cl: bool,
}

impl Terms {
    pub const BASELINE: Terms = Terms { mlm: true, nsp: true, tacl: false, sent_cl: false };
    pub const MODEL_1: Terms = Terms { mlm: true, nsp: true, tacl: false, sent_cl: true };
    pub const MODEL_2: Terms = Terms { mlm: false, nsp: false, tacl: true, sent_cl: false };
    pub const TACL: Terms = Terms { mlm: true, nsp: true, tacl: true, sent_cl: false };

    pub fn any(&self) -> bool {
        self.mlm || self.nsp || self.tacl || self.sent_cl
    }

    pub fn needs_teacher(&self) -> bool {
        self.tacl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mlm: f64,
    pub nsp: f64,
    pub tacl: f64,
    pub sent_cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mlm: 1.0, nsp: 1.0, tacl: 1.0, sent_cl: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub terms: Terms,
    pub weights: LossWeights,
    pub tacl_reduction: TaclReduction,
    /// Whether `[CLS]`/`[SEP]` appear as negatives in the contrastive
    /// denominator. Padding never does.
    pub tacl_include_specials: bool,
}

impl LossConfig {
    pub fn new(terms: Terms, tau: f64) -> Self {
        Self { tau, terms, weights: LossWeights::default(), tacl_reduction: TaclReduction::Mean, tacl_include_specials: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if !self.terms.any() {
            return Err(Error::Invalid("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over `(row, original id)` targets of the logits.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[(usize, u32)]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::NoSelectedPositions);
    }
    let pairs: Vec<(usize, usize)> = targets.iter().map(|&(r, t)| (r, t as usize)).collect();
    let terms = g.nll(logits, &pairs, None)?;
    g.mean(terms)
}

/// Mean binary cross-entropy of `[B, 2]` logits; class 0 means "is next".
pub fn nsp_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, is_next: &[bool]) -> Result<Var> {
    let labels: Vec<usize> = is_next.iter().map(|&b| if b { 0 } else { 1 }).collect();
    g.cross_entropy(logits, &labels)
}

/// Per-position contrastive terms.
///
/// For every selected position `i` the term is
/// `-log( exp(sim(s_i, t_i)/τ) / Σ_j exp(sim(s_i, t_j)/τ) )` with cosine
/// `sim`, where `j` ranges over the positions with `denominator_mask[j]`.
/// `teacher` must not carry gradient.
pub fn tacl_terms<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    indicator: &[bool],
    denominator_mask: &[bool],
    tau: f64,
) -> Result<Var> {
    let (n, d) = g.value(student).expect_matrix("tacl_loss")?;
    let (nt, dt) = g.value(teacher).expect_matrix("tacl_loss")?;
    if (n, d) != (nt, dt) || indicator.len() != n || denominator_mask.len() != n {
        return Err(Error::shape("tacl_loss", format!("student {n}x{d}, teacher {nt}x{dt}, masks {}/{}", indicator.len(), denominator_mask.len())));
    }
    if g.requires_grad(teacher) {
        return Err(Error::Invalid("teacher representations must be frozen".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let selected: Vec<usize> = (0..n).filter(|&i| indicator[i]).collect();
    if selected.is_empty() {
        return Err(Error::NoSelectedPositions);
    }
    let columns: Vec<usize> = (0..n).filter(|&j| denominator_mask[j]).collect();
    let mut col_of = vec![usize::MAX; n];
    for (k, &j) in columns.iter().enumerate() {
        col_of[j] = k;
    }
    let targets: Vec<(usize, usize)> = selected
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            if col_of[i] == usize::MAX {
                Err(Error::Invalid(format!("selected position {i} is excluded from the denominator")))
            } else {
                Ok((r, col_of[i]))
            }
        })
        .collect::<Result<_>>()?;

    let s = g.select_rows(student, &selected)?;
    let s = g.normalize_rows(s)?;
    let t = if columns.len() == n { teacher } else { g.select_rows(teacher, &columns)? };
    let t = g.normalize_rows(t)?;
    let sim = g.matmul_t(s, t)?;
    let logits = g.scale(sim, c::<T>(1.0 / tau))?;
    g.nll(logits, &targets, None)
}

/// Token-aware contrastive loss, reduced per [`TaclReduction`].
pub fn tacl_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    indicator: &[bool],
    denominator_mask: &[bool],
    tau: f64,
    reduction: TaclReduction,
) -> Result<Var> {
    let terms = tacl_terms(g, student, teacher, indicator, denominator_mask, tau)?;
    match reduction {
        TaclReduction::Mean => g.mean(terms),
        TaclReduction::Sum => g.sum(terms),
    }
}

/// Symmetric in-batch InfoNCE between two views of `B` sentence vectors:
/// row `b` of each view is the positive of row `b` of the other.
pub fn sent_cl_loss<T: Scalar>(g: &mut Graph<T>, view1: Var, view2: Var, tau: f64) -> Result<Var> {
    let (b, d) = g.value(view1).expect_matrix("sent_cl_loss")?;
    if g.value(view2).shape() != [b, d] {
        return Err(Error::shape("sent_cl_loss", "views must have equal shapes"));
    }
    if b < 2 {
        return Err(Error::Invalid("sentence-level contrastive loss needs a batch of at least 2".into()));
    }
    let a = g.normalize_rows(view1)?;
    let p = g.normalize_rows(view2)?;
    let sim = g.matmul_t(a, p)?;
    let logits = g.scale(sim, c::<T>(1.0 / tau))?;
    let diag: Vec<usize> = (0..b).collect();
    let forward = g.cross_entropy(logits, &diag)?;
    let logits_t = g.transpose(logits)?;
    let backward = g.cross_entropy(logits_t, &diag)?;
    let both = g.add(forward, backward)?;
    g.scale(both, c(0.5))
}

/// Individually computed loss terms of one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub mlm: Option<Var>,
    pub nsp: Option<Var>,
    pub tacl: Option<Var>,
    pub sent_cl: Option<Var>,
}

/// Scalar values of each term, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mlm: Option<f64>,
    pub nsp: Option<f64>,
    pub tacl: Option<f64>,
    pub sent_cl: Option<f64>,
}

/// One line of the per-step metrics log. Disabled terms are `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub total: f64,
    pub mlm: Option<f64>,
    pub nsp: Option<f64>,
    pub tacl: Option<f64>,
    pub sent_cl: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, br: &LossBreakdown, lr: f64, seconds: f64) -> Self {
        Self { step, total: br.total, mlm: br.mlm, nsp: br.nsp, tacl: br.tacl, sent_cl: br.sent_cl, lr, seconds }
    }
}

/// Weighted sum of the enabled terms. Every enabled term must be present.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, parts: &LossParts, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let entries = [
        ("mlm", cfg.terms.mlm, parts.mlm, cfg.weights.mlm),
        ("nsp", cfg.terms.nsp, parts.nsp, cfg.weights.nsp),
        ("tacl", cfg.terms.tacl, parts.tacl, cfg.weights.tacl),
        ("sent_cl", cfg.terms.sent_cl, parts.sent_cl, cfg.weights.sent_cl),
    ];
    let mut total: Option<Var> = None;
    let mut br = LossBreakdown::default();
    for (name, enabled, part, w) in entries {
        if !enabled {
            continue;
        }
        let v = part.ok_or_else(|| Error::Invalid(format!("enabled loss term {name} was not computed")))?;
        let value = g.value(v).item().to_f64_lossy();
        match name {
            "mlm" => br.mlm = Some(value),
            "nsp" => br.nsp = Some(value),
            "tacl" => br.tacl = Some(value),
            _ => br.sent_cl = Some(value),
        }
        let weighted = if w == 1.0 { v } else { g.scale(v, c(w))? };
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    let total = total.expect("validated: at least one term");
    br.total = g.value(total).item().to_f64_lossy();
    Ok((total, br))
}
