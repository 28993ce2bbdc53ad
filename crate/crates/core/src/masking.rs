//! BERT-style random masking and batch padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, CLS, FIRST_REGULAR_ID, MASK, PAD, SEP};
use crate::error::{Error, Result};

/// What happened to a position chosen for prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskCategory {
    Mask,
    Random,
    Keep,
}

/// Which selected positions count as "masked" for the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    /// Every position selected by the masking procedure (all three categories).
    #[default]
    Selected,
    /// Only positions whose input literally became `[MASK]`.
    LiteralMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub select_rate: f64,
    pub mask_rate: f64,
    pub random_rate: f64,
    pub keep_rate: f64,
    pub indicator: IndicatorMode,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { select_rate: 0.15, mask_rate: 0.8, random_rate: 0.1, keep_rate: 0.1, indicator: IndicatorMode::Selected }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.select_rate, self.mask_rate, self.random_rate, self.keep_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Invalid(format!("masking rates must lie in [0, 1]: {rates:?}")));
        }
        if (self.mask_rate + self.random_rate + self.keep_rate - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("mask, random and keep rates must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    /// Teacher input: the unmasked sequence.
    pub original_ids: Vec<u32>,
    /// Student input.
    pub masked_ids: Vec<u32>,
    pub mask_indicator: Vec<bool>,
    /// Replacement category of every selected position.
    pub categories: Vec<Option<MaskCategory>>,
    /// `(position, original id)` for each indicated position, ascending.
    pub mlm_targets: Vec<(usize, u32)>,
    pub segment_ids: Vec<u8>,
    pub is_next: bool,
    pub attention_len: usize,
}

impl MaskedExample {
    pub fn selected_positions(&self) -> Vec<usize> {
        self.mlm_targets.iter().map(|&(p, _)| p).collect()
    }
}

/// Positions eligible for selection: everything except structural tokens.
pub fn is_maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Independently selects non-special positions with `select_rate`, forcing
/// one uniformly chosen selection when the draw yields none, and assigns a
/// replacement category to each selected position.
pub fn apply_masking<R: Rng + ?Sized>(
    seq: &TokenSequence,
    is_next: bool,
    vocab_size: usize,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedExample> {
    cfg.validate()?;
    if vocab_size <= FIRST_REGULAR_ID as usize {
        return Err(Error::Invalid(format!("vocabulary of size {vocab_size} has no regular tokens")));
    }
    let n = seq.ids.len();
    let maskable: Vec<usize> = (0..n).filter(|&i| is_maskable(seq.ids[i])).collect();
    if maskable.is_empty() {
        return Err(Error::Unmaskable);
    }
    let mut categories: Vec<Option<MaskCategory>> = vec![None; n];
    for &i in &maskable {
        if rng.random::<f64>() < cfg.select_rate {
            let u = rng.random::<f64>();
            categories[i] = Some(if u < cfg.mask_rate {
                MaskCategory::Mask
            } else if u < cfg.mask_rate + cfg.random_rate {
                MaskCategory::Random
            } else {
                MaskCategory::Keep
            });
        }
    }
    let indicated = |c: &Option<MaskCategory>| match cfg.indicator {
        IndicatorMode::Selected => c.is_some(),
        IndicatorMode::LiteralMask => *c == Some(MaskCategory::Mask),
    };
    if !categories.iter().any(indicated) {
        let i = maskable[rng.random_range(0..maskable.len())];
        categories[i] = Some(MaskCategory::Mask);
    }

    let mut masked_ids = seq.ids.clone();
    for (i, c) in categories.iter().enumerate() {
        match c {
            Some(MaskCategory::Mask) => masked_ids[i] = MASK,
            Some(MaskCategory::Random) => masked_ids[i] = rng.random_range(FIRST_REGULAR_ID..vocab_size as u32),
            _ => {}
        }
    }
    let mask_indicator: Vec<bool> = categories.iter().map(indicated).collect();
    let mlm_targets = (0..n).filter(|&i| mask_indicator[i]).map(|i| (i, seq.ids[i])).collect();
    Ok(MaskedExample {
        original_ids: seq.ids.clone(),
        masked_ids,
        mask_indicator,
        categories,
        mlm_targets,
        segment_ids: seq.segment_ids.clone(),
        is_next,
        attention_len: n,
    })
}

/// Right-padded batch. Every per-position vector has length `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub max_len: usize,
    pub masked_ids: Vec<Vec<u32>>,
    pub original_ids: Vec<Vec<u32>>,
    pub segment_ids: Vec<Vec<u8>>,
    pub mask_indicator: Vec<Vec<bool>>,
    /// `true` at real tokens, `false` at padding.
    pub padding_mask: Vec<Vec<bool>>,
    pub mlm_targets: Vec<Vec<(usize, u32)>>,
    pub is_next: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Total number of indicated positions across the batch.
    pub fn num_targets(&self) -> usize {
        self.mlm_targets.iter().map(Vec::len).sum()
    }
}

pub fn pad_batch(examples: &[MaskedExample], max_len: usize) -> Result<Batch> {
    let mut b = Batch {
        max_len,
        masked_ids: Vec::with_capacity(examples.len()),
        original_ids: Vec::with_capacity(examples.len()),
        segment_ids: Vec::with_capacity(examples.len()),
        mask_indicator: Vec::with_capacity(examples.len()),
        padding_mask: Vec::with_capacity(examples.len()),
        mlm_targets: Vec::with_capacity(examples.len()),
        is_next: Vec::with_capacity(examples.len()),
        lengths: Vec::with_capacity(examples.len()),
    };
    for ex in examples {
        let n = ex.attention_len;
        if n > max_len {
            return Err(Error::Overlong { len: n, max_len });
        }
        let pad = max_len - n;
        let padded = |v: &[u32]| v.iter().copied().chain(std::iter::repeat(PAD).take(pad)).collect::<Vec<_>>();
        b.masked_ids.push(padded(&ex.masked_ids));
        b.original_ids.push(padded(&ex.original_ids));
        b.segment_ids.push(ex.segment_ids.iter().copied().chain(std::iter::repeat(0).take(pad)).collect());
        b.mask_indicator.push(ex.mask_indicator.iter().copied().chain(std::iter::repeat(false).take(pad)).collect());
        b.padding_mask.push((0..max_len).map(|i| i < n).collect());
        b.mlm_targets.push(ex.mlm_targets.clone());
        b.is_next.push(ex.is_next);
        b.lengths.push(n);
    }
    Ok(b)
}
