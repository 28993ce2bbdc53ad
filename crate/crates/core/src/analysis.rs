//! Token-representation diagnostics: averaged self-similarity per layer and
//! per-sentence cosine matrices with CSV/PGM export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedCorpus, TokenSequence, Vocab, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{encode, EncoderInput, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_ZERO_NOTE: &str = "layer 0 is the embedding output; layer i > 0 is the output of block i";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Keep `[CLS]` and `[SEP]` rows. Padding is always dropped.
    pub include_specials: bool,
    /// Right-pad every input to this length before the forward pass.
    pub pad_to: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { include_specials: false, pad_to: None }
    }
}

pub const DEFAULT_SAMPLE: usize = 2000;

fn unit_rows<T: Scalar>(h: &Tensor<T>, op: &'static str) -> Result<Vec<Vec<f64>>> {
    let (n, _) = h.expect_matrix(op)?;
    (0..n)
        .map(|i| {
            let r: Vec<f64> = h.row(i).iter().map(|x| x.to_f64_lossy()).collect();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate { op });
            }
            Ok(r.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean off-diagonal cosine similarity of the rows of `h`.
pub fn self_similarity<T: Scalar>(h: &Tensor<T>) -> Result<f64> {
    let u = unit_rows(h, "self_similarity")?;
    let n = u.len();
    if n < 2 {
        return Err(Error::Invalid(format!("self-similarity needs at least 2 rows, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += dot(&u[i], &u[j]);
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// [`self_similarity`] over the rows with `keep[i]`.
pub fn self_similarity_masked<T: Scalar>(h: &Tensor<T>, keep: &[bool]) -> Result<f64> {
    let (n, d) = h.expect_matrix("self_similarity")?;
    if keep.len() != n {
        return Err(Error::shape("self_similarity", format!("{} flags for {n} rows", keep.len())));
    }
    let data: Vec<T> = (0..n).filter(|&i| keep[i]).flat_map(|i| h.row(i).to_vec()).collect();
    if data.is_empty() {
        return Err(Error::Invalid("self-similarity needs at least 2 rows, got 0".into()));
    }
    self_similarity(&Tensor::new(vec![data.len() / d, d], data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimReport {
    pub model_tag: String,
    pub corpus_tag: String,
    pub layer_zero: String,
    pub layers: Vec<LayerStat>,
}

impl SelfSimReport {
    pub fn final_layer(&self) -> &LayerStat {
        self.layers.last().expect("reports have at least one layer")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `[CLS] sentence [SEP]`, truncating the sentence to fit `max_len`.
pub fn single_sequence(sentence: &[u32], max_len: usize) -> TokenSequence {
    let keep = sentence.len().min(max_len.saturating_sub(2));
    TokenSequence::single(&sentence[..keep])
}

/// Per-layer hidden states of one unmasked sentence, padding rows removed.
pub fn sentence_states<T: Scalar>(
    params: &ModelParams<T>,
    seq: &TokenSequence,
    pad_to: Option<usize>,
) -> Result<Vec<Tensor<T>>> {
    let n = seq.ids.len();
    let width = pad_to.unwrap_or(n).max(n);
    let mut ids = seq.ids.clone();
    let mut segs = seq.segment_ids.clone();
    ids.resize(width, PAD);
    segs.resize(width, 0);
    let mask: Vec<bool> = (0..width).map(|i| i < n).collect();
    let acts = encode(params, EncoderInput { ids: &ids, segment_ids: &segs, padding_mask: &mask })?;
    Ok(acts.hidden)
}

fn analyzed_rows(ids: &[u32], include_specials: bool) -> Vec<bool> {
    ids.iter().map(|&id| id != PAD && (include_specials || (id != CLS && id != SEP))).collect()
}

/// Mean and population standard deviation, summed in ascending value order
/// so the result does not depend on sample order.
fn mean_std(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

/// Per-sentence, per-layer self-similarity. Sentences with fewer than two
/// analyzed tokens are skipped.
pub fn sentence_self_similarities<T: Scalar>(
    params: &ModelParams<T>,
    sentences: &[Vec<u32>],
    cfg: &AnalysisConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for s in sentences {
        let seq = single_sequence(s, params.config.max_len);
        let keep = analyzed_rows(&seq.ids, cfg.include_specials);
        if keep.iter().filter(|&&k| k).count() < 2 {
            continue;
        }
        let states = sentence_states(params, &seq, cfg.pad_to)?;
        out.push(states.iter().map(|h| self_similarity_masked(h, &keep)).collect::<Result<Vec<_>>>()?);
    }
    Ok(out)
}

/// Averaged self-similarity per layer over a sentence sample.
pub fn layerwise_self_similarity<T: Scalar>(
    params: &ModelParams<T>,
    sentences: &[Vec<u32>],
    cfg: &AnalysisConfig,
    model_tag: &str,
    corpus_tag: &str,
) -> Result<SelfSimReport> {
    let per_sentence = sentence_self_similarities(params, sentences, cfg)?;
    if per_sentence.is_empty() {
        return Err(Error::Invalid("no sentence has two or more analyzed tokens".into()));
    }
    let layers = (0..=params.config.n_layers)
        .map(|l| {
            let mut v: Vec<f64> = per_sentence.iter().map(|s| s[l]).collect();
            let (mean, std) = mean_std(&mut v);
            LayerStat { layer: l, mean, std, n: v.len() }
        })
        .collect();
    Ok(SelfSimReport {
        model_tag: model_tag.into(),
        corpus_tag: corpus_tag.into(),
        layer_zero: LAYER_ZERO_NOTE.into(),
        layers,
    })
}

/// Up to `n` sentences drawn without replacement, in corpus order.
pub fn sample_sentences(corpus: &EncodedCorpus, n: usize, seed: u64) -> Vec<Vec<u32>> {
    let all: Vec<&Vec<u32>> = corpus.sentences().filter(|s| !s.is_empty()).collect();
    if n >= all.len() {
        return all.into_iter().cloned().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimMatrix {
    pub tokens: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SelfSimMatrix {
    /// Pairwise cosine matrix of the rows of `h`, exactly symmetric with a
    /// unit diagonal.
    pub fn from_states<T: Scalar>(h: &Tensor<T>, tokens: Vec<String>) -> Result<Self> {
        let u = unit_rows(h, "self_sim_matrix")?;
        let n = u.len();
        if tokens.len() != n {
            return Err(Error::shape("self_sim_matrix", format!("{} labels for {n} rows", tokens.len())));
        }
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            values[i][i] = 1.0;
            for j in 0..i {
                let v = dot(&u[i], &u[j]);
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Ok(Self { tokens, values })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Cosine matrix of one sentence at `layer` (default: final layer).
pub fn self_sim_matrix<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    sentence: &[u32],
    layer: Option<usize>,
    include_specials: bool,
) -> Result<SelfSimMatrix> {
    let layer = layer.unwrap_or(params.config.n_layers);
    if layer > params.config.n_layers {
        return Err(Error::Invalid(format!("layer {layer} out of range 0..={}", params.config.n_layers)));
    }
    let seq = single_sequence(sentence, params.config.max_len);
    let states = sentence_states(params, &seq, None)?;
    let keep = analyzed_rows(&seq.ids, include_specials);
    let h = &states[layer];
    let d = h.cols();
    let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    if rows.is_empty() {
        return Err(Error::Invalid("sentence has no analyzed tokens".into()));
    }
    let data: Vec<T> = rows.iter().flat_map(|&i| h.row(i).to_vec()).collect();
    let tokens =
        rows.iter().map(|&i| vocab.token(seq.ids[i]).unwrap_or("[UNK]").to_string()).collect();
    SelfSimMatrix::from_states(&Tensor::new(vec![rows.len(), d], data)?, tokens)
}

/// Grey level for a cosine value: 1 maps to 0 (black), -1 to 255, rounding
/// half up.
pub fn grey_level(m: f64) -> u8 {
    let v = (255.0 * (1.0 - m.clamp(-1.0, 1.0)) / 2.0 + 0.5).floor();
    v as u8
}

/// Writes `<prefix>.csv` and `<prefix>.pgm`, returning both paths.
pub fn export_heatmap(m: &SelfSimMatrix, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let base = prefix.as_os_str().to_string_lossy().to_string();
    let csv_path = PathBuf::from(format!("{base}.csv"));
    let pgm_path = PathBuf::from(format!("{base}.pgm"));

    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    let mut header = vec![String::new()];
    header.extend(m.tokens.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(&csv_path, e))?;
    for (tok, row) in m.tokens.iter().zip(&m.values) {
        let mut rec = vec![tok.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.9}")));
        w.write_record(&rec).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let n = m.len();
    let mut bytes = format!("P5\n{n} {n}\n255\n").into_bytes();
    bytes.extend(m.values.iter().flatten().map(|&v| grey_level(v)));
    let mut f = fs::File::create(&pgm_path).map_err(|e| Error::io(&pgm_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&pgm_path, e))?;
    Ok((csv_path, pgm_path))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.display().to_string(), reason: e.to_string() }
}

/// Reads a matrix written by [`export_heatmap`].
pub fn read_heatmap_csv(path: &Path) -> Result<SelfSimMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let tokens: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().skip(1).map(String::from).collect();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok(SelfSimMatrix { tokens, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b - mean_a`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub layers: Vec<LayerDelta>,
    pub final_delta: f64,
    /// Tag of the model with the lower final-layer self-similarity, or
    /// `"tie"`.
    pub more_discriminative: String,
}

pub fn compare_models(a: &SelfSimReport, b: &SelfSimReport) -> Result<Comparison> {
    if a.layers.len() != b.layers.len() || a.layers.is_empty() {
        return Err(Error::Invalid(format!("layer counts differ: {} vs {}", a.layers.len(), b.layers.len())));
    }
    let layers: Vec<LayerDelta> = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| LayerDelta { layer: x.layer, mean_a: x.mean, mean_b: y.mean, delta: y.mean - x.mean })
        .collect();
    let final_delta = layers.last().map(|l| l.delta).unwrap_or(0.0);
    let more_discriminative = if final_delta < 0.0 {
        b.model_tag.clone()
    } else if final_delta > 0.0 {
        a.model_tag.clone()
    } else {
        "tie".into()
    };
    Ok(Comparison { model_a: a.model_tag.clone(), model_b: b.model_tag.clone(), layers, final_delta, more_discriminative })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_cases() {
        let same = Tensor::<f64>::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        assert!((self_similarity(&same).unwrap() - 1.0).abs() < 1e-12);
        let eye = Tensor::<f64>::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(self_similarity(&eye).unwrap(), 0.0);
        let one = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(self_similarity(&one).is_err());
        let zero = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(self_similarity(&zero), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn grey_mapping() {
        assert_eq!(grey_level(1.0), 0);
        assert_eq!(grey_level(-1.0), 255);
        assert_eq!(grey_level(0.0), 128);
    }

    #[test]
    fn comparison_arithmetic() {
        let mk = |tag: &str, means: &[f64]| SelfSimReport {
            model_tag: tag.into(),
            corpus_tag: "c".into(),
            layer_zero: LAYER_ZERO_NOTE.into(),
            layers: means.iter().enumerate().map(|(l, &m)| LayerStat { layer: l, mean: m, std: 0.0, n: 1 }).collect(),
        };
        let a = mk("base", &[0.5, 0.75, 0.5]);
        let b = mk("tacl", &[0.5, 0.5, 0.25]);
        let cmp = compare_models(&a, &b).unwrap();
        assert_eq!(cmp.layers.iter().map(|l| l.delta).collect::<Vec<_>>(), vec![0.0, -0.25, -0.25]);
        assert_eq!(cmp.more_discriminative, "tacl");
        let own = compare_models(&a, &a).unwrap();
        assert!(own.layers.iter().all(|l| l.delta == 0.0));
        assert_eq!(own.more_discriminative, "tie");
        assert!(compare_models(&a, &mk("x", &[0.1])).is_err());
    }
}
