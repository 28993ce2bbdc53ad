//! Independent reference implementations and the verification suites behind
//! the `gradcheck` and `selftest` commands.
//!
//! The oracles here are written as plain loops over `f64` slices and share
//! no code with the vectorized graph operations they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::corpus::{TokenSequence, CLS, FIRST_REGULAR_ID, SEP};
use crate::error::{Error, Result};
use crate::masking::{apply_masking, MaskCategory, MaskingConfig};
use crate::model::{init_params, ModelConfig};
use crate::objectives::{mlm_loss, nsp_loss, sent_cl_loss, tacl_loss, tacl_terms, LossConfig, TaclReduction, Terms};
use crate::tensor::{grad_check, grad_check_sampled, Graph, Mode, Tensor, Var};
use crate::trainer::{batch_loss, teacher_states, StepBatch, TrainExample};

/// Finite-difference step used by the gradient suite.
pub const GRAD_EPS: f64 = 1e-5;
/// Maximum relative error accepted by the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Per-selected-position contrastive terms by explicit double loop.
pub fn tacl_oracle(student: &Tensor<f64>, teacher: &Tensor<f64>, indicator: &[bool], denominator: &[bool], tau: f64) -> Vec<f64> {
    let s = rows(student);
    let t = rows(teacher);
    let mut out = Vec::new();
    for i in 0..s.len() {
        if !indicator[i] {
            continue;
        }
        let mut scores = Vec::new();
        for j in 0..t.len() {
            if denominator[j] {
                scores.push(cosine(&s[i], &t[j]) / tau);
            }
        }
        out.push(log_sum_exp(&scores) - cosine(&s[i], &t[i]) / tau);
    }
    out
}

/// Symmetric in-batch InfoNCE by explicit loops.
pub fn sent_cl_oracle(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> f64 {
    let (ra, rb) = (rows(a), rows(b));
    let n = ra.len();
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| cosine(&ra[i], &rb[j]) / tau).collect();
        fwd += log_sum_exp(&row) - row[i];
        let col: Vec<f64> = (0..n).map(|j| cosine(&ra[j], &rb[i]) / tau).collect();
        bwd += log_sum_exp(&col) - col[i];
    }
    0.5 * (fwd + bwd) / n as f64
}

/// Mean cross-entropy at `(row, class)` targets by explicit loop.
pub fn cross_entropy_oracle(logits: &Tensor<f64>, targets: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(r, t) in targets {
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t];
    }
    total / targets.len() as f64
}

/// Mean pairwise off-diagonal cosine by explicit double loop.
pub fn self_similarity_oracle(h: &Tensor<f64>) -> f64 {
    let r = rows(h);
    let n = r.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += cosine(&r[i], &r[j]);
            }
        }
    }
    total / (n * (n - 1)) as f64
}

pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

/// Names accepted by [`check_op`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "matmul_t",
    "add",
    "mul",
    "add_row",
    "linear",
    "scale",
    "gelu",
    "tanh",
    "layer_norm",
    "softmax",
    "masked_softmax",
    "embedding_lookup",
    "slice_cols",
    "concat_cols",
    "select_rows",
    "concat_rows",
    "transpose",
    "reshape",
    "dropout",
    "normalize_rows",
    "nll",
    "cross_entropy",
    "sum",
    "mean",
    "cosine_sim",
    "mlm_loss",
    "nsp_loss",
    "tacl_loss",
    "sent_cl_loss",
];

pub const FULL_MODEL: &str = "full_model";

/// Reduces any output to a scalar through fixed random weights so that every
/// output coordinate contributes to the checked gradient.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::new(shape, w.data()[..g.value(y).numel()].to_vec())?;
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn row_std(r: &[f64]) -> f64 {
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt()
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance of `name`: its inputs and the scalar function.
fn instance(name: &str, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, Builder)> {
    let m = rng.random_range(1..=4usize);
    let n = rng.random_range(2..=5usize);
    let k = rng.random_range(1..=4usize);
    let w = random_tensor(rng, &[64], 1.0);
    let x = random_tensor(rng, &[m, n], 1.0);
    macro_rules! unary {
        ($body:expr) => {{
            let f = $body;
            (vec![x], Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = f(g, v[0])?;
                project(g, y, &w)
            }) as Builder)
        }};
    }
    let built: (Vec<Tensor<f64>>, Builder) = match name {
        "matmul" => {
            let b = random_tensor(rng, &[n, k], 1.0);
            (vec![x, b], Box::new(move |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, &w) }))
        }
        "matmul_t" => {
            let b = random_tensor(rng, &[k, n], 1.0);
            (vec![x, b], Box::new(move |g, v| { let y = g.matmul_t(v[0], v[1])?; project(g, y, &w) }))
        }
        "add" | "mul" => {
            let b = random_tensor(rng, &[m, n], 1.0);
            let mul = name == "mul";
            (vec![x, b], Box::new(move |g, v| {
                let y = if mul { g.mul(v[0], v[1])? } else { g.add(v[0], v[1])? };
                project(g, y, &w)
            }))
        }
        "add_row" => {
            let b = random_tensor(rng, &[n], 1.0);
            (vec![x, b], Box::new(move |g, v| { let y = g.add_row(v[0], v[1])?; project(g, y, &w) }))
        }
        "linear" => {
            let wt = random_tensor(rng, &[n, k], 1.0);
            let b = random_tensor(rng, &[k], 1.0);
            (vec![x, wt, b], Box::new(move |g, v| { let y = g.linear(v[0], v[1], v[2])?; project(g, y, &w) }))
        }
        "scale" => {
            let s: f64 = rng.random_range(-3.0..3.0);
            unary!(move |g: &mut Graph<f64>, a| g.scale(a, s))
        }
        "gelu" => unary!(|g: &mut Graph<f64>, a| g.gelu(a)),
        "tanh" => unary!(|g: &mut Graph<f64>, a| g.tanh(a)),
        "layer_norm" => {
            // Rows with a tiny spread make the step a sizeable fraction of the
            // standard deviation, where the difference quotient is not accurate.
            let mut x = x;
            while (0..m).any(|r| row_std(x.row(r)) < 0.1) {
                x = random_tensor(rng, &[m, n], 1.0);
            }
            let gain = random_tensor(rng, &[n], 1.0);
            let bias = random_tensor(rng, &[n], 1.0);
            (vec![x, gain, bias], Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
                project(g, y, &w)
            }))
        }
        "softmax" => {
            let axis = rng.random_range(0..2usize);
            unary!(move |g: &mut Graph<f64>, a| g.softmax(a, axis))
        }
        "masked_softmax" => {
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            mask[rng.random_range(0..n)] = true;
            unary!(move |g: &mut Graph<f64>, a| g.masked_softmax(a, 1, Some(&mask)))
        }
        "embedding_lookup" => {
            let ids: Vec<usize> = (0..rng.random_range(1..=6usize)).map(|_| rng.random_range(0..m)).collect();
            unary!(move |g: &mut Graph<f64>, a| g.embedding_lookup(a, &ids))
        }
        "slice_cols" => {
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            unary!(move |g: &mut Graph<f64>, a| g.slice_cols(a, start, len))
        }
        "concat_cols" | "concat_rows" => {
            let b = if name == "concat_cols" { random_tensor(rng, &[m, k], 1.0) } else { random_tensor(rng, &[k, n], 1.0) };
            let cols = name == "concat_cols";
            (vec![x, b], Box::new(move |g, v| {
                let y = if cols { g.concat_cols(&[v[0], v[1], v[0]])? } else { g.concat_rows(&[v[1], v[0]])? };
                project(g, y, &w)
            }))
        }
        "select_rows" => {
            let sel: Vec<usize> = (0..rng.random_range(1..=6usize)).map(|_| rng.random_range(0..m)).collect();
            unary!(move |g: &mut Graph<f64>, a| g.select_rows(a, &sel))
        }
        "transpose" => unary!(|g: &mut Graph<f64>, a| g.transpose(a)),
        "reshape" => unary!(move |g: &mut Graph<f64>, a| g.reshape(a, &[n, m])),
        "dropout" => {
            let seed: u64 = rng.random();
            unary!(move |g: &mut Graph<f64>, a| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                g.dropout(a, 0.3, Mode::Train, &mut r)
            })
        }
        "normalize_rows" => unary!(|g: &mut Graph<f64>, a| g.normalize_rows(a)),
        "nll" => {
            let targets: Vec<(usize, usize)> = (0..rng.random_range(1..=5usize)).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            for &(_, t) in &targets {
                mask[t] = true;
            }
            let use_mask = rng.random_bool(0.5);
            unary!(move |g: &mut Graph<f64>, a| g.nll(a, &targets, use_mask.then_some(&mask[..])))
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            unary!(move |g: &mut Graph<f64>, a| g.cross_entropy(a, &targets))
        }
        "sum" => unary!(|g: &mut Graph<f64>, a| g.sum(a)),
        "mean" => unary!(|g: &mut Graph<f64>, a| g.mean(a)),
        "cosine_sim" => {
            let u = random_tensor(rng, &[n + 4], 1.0);
            let v = random_tensor(rng, &[n + 4], 1.0);
            (vec![u, v], Box::new(move |g, v| { let y = g.cosine_sim(v[0], v[1])?; project(g, y, &w) }))
        }
        "mlm_loss" => {
            let targets: Vec<(usize, u32)> = (0..rng.random_range(1..=5usize)).map(|_| (rng.random_range(0..m), rng.random_range(0..n as u32))).collect();
            unary!(move |g: &mut Graph<f64>, a| mlm_loss(g, a, &targets))
        }
        "nsp_loss" => {
            let x2 = random_tensor(rng, &[m, 2], 2.0);
            let labels: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
            (vec![x2], Box::new(move |g, v| nsp_loss(g, v[0], &labels)))
        }
        "tacl_loss" => {
            let rows = rng.random_range(2..=8usize);
            let d = rng.random_range(2..=16usize);
            let tau = [1.0, 0.1, 0.01][rng.random_range(0..3usize)];
            let s = random_tensor(rng, &[rows, d], 1.0);
            let t = random_tensor(rng, &[rows, d], 1.0);
            let mut ind: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.4)).collect();
            ind[rng.random_range(0..rows)] = true;
            (vec![s], Box::new(move |g, v| {
                let tv = g.constant(t.clone());
                tacl_loss(g, v[0], tv, &ind, &vec![true; ind.len()], tau, TaclReduction::Mean)
            }))
        }
        "sent_cl_loss" => {
            let b = rng.random_range(2..=5usize);
            let d = rng.random_range(2..=8usize);
            let tau = [1.0, 0.1][rng.random_range(0..2usize)];
            let a = random_tensor(rng, &[b, d], 1.0);
            let p = random_tensor(rng, &[b, d], 1.0);
            (vec![a, p], Box::new(move |g, v| sent_cl_loss(g, v[0], v[1], tau)))
        }
        other => return Err(Error::Invalid(format!("unknown operation {other:?}; known: {}", OP_NAMES.join(", ")))),
    };
    Ok(built)
}

/// Finite-difference check of one operation over `instances` random cases.
pub fn check_op(name: &str, instances: usize, seed: u64) -> Result<OpCheck> {
    if name == FULL_MODEL {
        return check_full_model(instances, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OpCheck { name: name.into(), instances, coordinates: 0, max_rel_err: 0.0, worst_instance: 0, passed: true };
    for i in 0..instances {
        let (inputs, f) = instance(name, &mut rng)?;
        let r = grad_check(|g: &mut Graph<f64>, v: &[Var]| f(g, v), &inputs, GRAD_EPS, GRAD_TOL)?;
        out.coordinates += r.checked;
        if r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
            out.worst_instance = i;
        }
        out.passed &= r.passed;
    }
    Ok(out)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig { vocab_size: 14, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 12, max_len: 12, dropout_p: 0.1, ln_eps: 1e-12 }
}

fn random_pair<R: Rng + ?Sized>(rng: &mut R, vocab: usize) -> TokenSequence {
    let la = rng.random_range(1..=3usize);
    let lb = rng.random_range(1..=3usize);
    let mut draw = |l: usize| (0..l).map(|_| rng.random_range(FIRST_REGULAR_ID..vocab as u32)).collect::<Vec<_>>();
    let a = draw(la);
    let b = draw(lb);
    TokenSequence::pair(&a, &b)
}

/// Finite-difference check of the composite loss with every term enabled,
/// through the whole encoder, with respect to every parameter tensor.
pub fn check_full_model(instances: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let lcfg = LossConfig { tau: 0.1, ..LossConfig::new(Terms { mlm: true, nsp: true, tacl: true, sent_cl: true }, 0.1) };
    let mcfg = MaskingConfig::default();
    let mut out = OpCheck { name: FULL_MODEL.into(), instances, coordinates: 0, max_rel_err: 0.0, worst_instance: 0, passed: true };
    for i in 0..instances {
        let params = init_params::<f64>(&cfg, rng.random())?;
        let mut scaled = params.clone();
        for t in scaled.tensors.values_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let examples: Vec<TrainExample> = (0..2)
            .map(|_| {
                let seq = random_pair(&mut rng, cfg.vocab_size);
                let is_next = rng.random_bool(0.5);
                Ok(TrainExample {
                    view: apply_masking(&seq, is_next, cfg.vocab_size, &mcfg, &mut rng)?,
                    second_view: Some(apply_masking(&seq, is_next, cfg.vocab_size, &mcfg, &mut rng)?),
                })
            })
            .collect::<Result<_>>()?;
        let batch = StepBatch::new(&examples, None)?;
        let teacher = teacher_states(&params, &batch.view)?;
        let names: Vec<String> = scaled.tensors.keys().cloned().collect();
        let inputs: Vec<Tensor<f64>> = scaled.tensors.values().cloned().collect();
        let dropout_seed: u64 = rng.random();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let vars = crate::model::ParamVars { vars: names.iter().cloned().zip(v.iter().copied()).collect() };
            let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
            Ok(batch_loss(g, &cfg, &vars, &batch, Some(&teacher), &lcfg, Mode::Train, &mut r)?.0)
        };
        let r = grad_check_sampled(f, &inputs, GRAD_EPS, GRAD_TOL, 4, &mut rng)?;
        out.coordinates += r.checked;
        if r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
            out.worst_instance = i;
        }
        out.passed &= r.passed;
    }
    Ok(out)
}

/// Every operation plus the full model, `instances` random cases each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut v = OP_NAMES.iter().enumerate().map(|(i, n)| check_op(n, instances, seed + i as u64)).collect::<Result<Vec<_>>>()?;
    v.push(check_full_model(instances, seed + OP_NAMES.len() as u64)?);
    Ok(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfTestResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, passed: bool, detail: String) -> SelfTestResult {
    SelfTestResult { name: name.into(), passed, detail }
}

/// Largest deviation between the vectorized contrastive loss and the loop
/// oracle over random instances, and whether any term went negative.
pub fn tacl_oracle_sweep(instances: usize, seed: u64) -> Result<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut nonneg = true;
    for _ in 0..instances {
        let n = rng.random_range(2..=8usize);
        let d = rng.random_range(1..=16usize);
        let tau = [1.0, 0.1, 0.01][rng.random_range(0..3usize)];
        let s = random_tensor(&mut rng, &[n, d], 1.0);
        let t = random_tensor(&mut rng, &[n, d], 1.0);
        let mut ind: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        ind[rng.random_range(0..n)] = true;
        let denom = vec![true; n];
        let expect = tacl_oracle(&s, &t, &ind, &denom, tau);
        let mut g = Graph::new();
        let sv = g.param(s);
        let tv = g.constant(t);
        let terms = tacl_terms(&mut g, sv, tv, &ind, &denom, tau)?;
        let mean = tacl_loss(&mut g, sv, tv, &ind, &denom, tau, TaclReduction::Mean)?;
        for (a, b) in g.value(terms).data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
            nonneg &= *a >= 0.0;
        }
        let oracle_mean = expect.iter().sum::<f64>() / expect.len() as f64;
        worst = worst.max((g.value(mean).item() - oracle_mean).abs());
    }
    Ok((worst, nonneg))
}

/// Empirical masking rates over at least `min_tokens` maskable tokens.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MaskingStats {
    pub maskable: usize,
    pub selected: usize,
    pub mask: usize,
    pub random: usize,
    pub keep: usize,
    pub specials_selected: usize,
}

impl MaskingStats {
    pub fn select_rate(&self) -> f64 {
        self.selected as f64 / self.maskable as f64
    }

    pub fn split(&self) -> [f64; 3] {
        let s = self.selected as f64;
        [self.mask as f64 / s, self.random as f64 / s, self.keep as f64 / s]
    }
}

pub fn masking_statistics(min_tokens: usize, seed: u64) -> Result<MaskingStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MaskingConfig::default();
    let vocab = 500;
    let mut st = MaskingStats { maskable: 0, selected: 0, mask: 0, random: 0, keep: 0, specials_selected: 0 };
    while st.maskable < min_tokens {
        let a: Vec<u32> = (0..60).map(|_| rng.random_range(FIRST_REGULAR_ID..vocab)).collect();
        let b: Vec<u32> = (0..60).map(|_| rng.random_range(FIRST_REGULAR_ID..vocab)).collect();
        let seq = TokenSequence::pair(&a, &b);
        let ex = apply_masking(&seq, true, vocab as usize, &cfg, &mut rng)?;
        for (i, cat) in ex.categories.iter().enumerate() {
            let special = seq.ids[i] == CLS || seq.ids[i] == SEP;
            if special {
                st.specials_selected += cat.is_some() as usize;
                continue;
            }
            st.maskable += 1;
            match cat {
                Some(MaskCategory::Mask) => st.mask += 1,
                Some(MaskCategory::Random) => st.random += 1,
                Some(MaskCategory::Keep) => st.keep += 1,
                None => continue,
            }
            st.selected += 1;
        }
    }
    Ok(st)
}

/// Loss oracles, closed forms and masking statistics.
pub fn selftest(seed: u64) -> Result<Vec<SelfTestResult>> {
    let mut out = Vec::new();
    let (worst, nonneg) = tacl_oracle_sweep(1000, seed)?;
    out.push(result("tacl_oracle", worst <= 1e-6 && nonneg, format!("max |diff| {worst:.3e}, terms non-negative: {nonneg}")));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let b = rng.random_range(2..=6usize);
        let d = rng.random_range(2..=8usize);
        let a = random_tensor(&mut rng, &[b, d], 1.0);
        let p = random_tensor(&mut rng, &[b, d], 1.0);
        let mut g = Graph::new();
        let (av, pv) = (g.param(a.clone()), g.param(p.clone()));
        let l = sent_cl_loss(&mut g, av, pv, 0.1)?;
        worst = worst.max((g.value(l).item() - sent_cl_oracle(&a, &p, 0.1)).abs());
    }
    out.push(result("sent_cl_oracle", worst <= 1e-6, format!("max |diff| {worst:.3e}")));

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = rng.random_range(1..=6usize);
        let k = rng.random_range(2..=20usize);
        let logits = random_tensor(&mut rng, &[m, k], 3.0);
        let targets: Vec<(usize, u32)> = (0..rng.random_range(1..=8usize)).map(|_| (rng.random_range(0..m), rng.random_range(0..k as u32))).collect();
        let pairs: Vec<(usize, usize)> = targets.iter().map(|&(r, t)| (r, t as usize)).collect();
        let mut g = Graph::new();
        let lv = g.param(logits.clone());
        let l = mlm_loss(&mut g, lv, &targets)?;
        worst = worst.max((g.value(l).item() - cross_entropy_oracle(&logits, &pairs)).abs());
    }
    out.push(result("mlm_oracle", worst <= 1e-9, format!("max |diff| {worst:.3e}")));

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=8usize);
        let d = rng.random_range(1..=8usize);
        let h = random_tensor(&mut rng, &[n, d], 1.0);
        worst = worst.max((crate::analysis::self_similarity(&h)? - self_similarity_oracle(&h)).abs());
    }
    out.push(result("self_similarity_oracle", worst <= 1e-9, format!("max |diff| {worst:.3e}")));

    let closed = closed_forms()?;
    let worst = closed.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let names: Vec<&str> = closed.iter().map(|(n, _)| *n).collect();
    out.push(result("closed_forms", worst <= 1e-9, format!("{} anchors, max |diff| {worst:.3e}", names.len())));

    let st = masking_statistics(1_000_000, seed)?;
    let [pm, pr, pk] = st.split();
    let ok = (st.select_rate() - 0.15).abs() <= 0.002
        && (pm - 0.8).abs() <= 0.005
        && (pr - 0.1).abs() <= 0.005
        && (pk - 0.1).abs() <= 0.005
        && st.specials_selected == 0;
    out.push(result(
        "masking_statistics",
        ok,
        format!(
            "{} tokens: select {:.4}, split {:.4}/{:.4}/{:.4}, specials selected {}",
            st.maskable,
            st.select_rate(),
            pm,
            pr,
            pk,
            st.specials_selected
        ),
    ));
    Ok(out)
}

/// Closed-form anchors as `(name, |computed - expected|)`.
pub fn closed_forms() -> Result<Vec<(&'static str, f64)>> {
    let mut v = Vec::new();
    let one_plus_inv_e = (1.0 + (-1.0f64).exp()).ln();

    let mut g = Graph::<f64>::new();
    let s = g.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]])?);
    let t = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?);
    let l = tacl_loss(&mut g, s, t, &[true, false], &[true, true], 1.0, TaclReduction::Mean)?;
    v.push(("tacl_orthogonal_pair", (g.value(l).item() - one_plus_inv_e).abs()));

    for n in [2usize, 5, 9] {
        let mut g = Graph::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(n as u64);
        let s = g.param(random_tensor(&mut r, &[n, 6], 1.0));
        let t = g.constant(Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.0]; n])?);
        let ind: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let terms = tacl_terms(&mut g, s, t, &ind, &vec![true; n], 0.01)?;
        let worst = g.value(terms).data().iter().map(|x| (x - (n as f64).ln()).abs()).fold(0.0, f64::max);
        v.push(("tacl_uniform_teacher", worst));
    }

    for k in [2usize, 10, 1000] {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[3, k]));
        let l = mlm_loss(&mut g, logits, &[(0, 1), (2, 0)])?;
        v.push(("mlm_uniform_logits", (g.value(l).item() - (k as f64).ln()).abs()));
    }

    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?);
    let b = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?);
    let l = sent_cl_loss(&mut g, a, b, 1.0)?;
    v.push(("sent_cl_orthonormal_pairs", (g.value(l).item() - one_plus_inv_e).abs()));

    let mut g = Graph::<f64>::new();
    let z = g.param(Tensor::zeros(&[4, 2]));
    let l = nsp_loss(&mut g, z, &[true, false, true, false])?;
    v.push(("nsp_equal_logits", (g.value(l).item() - 2f64.ln()).abs()));
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_hand_values() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = s.clone();
        let v = tacl_oracle(&s, &t, &[true, false], &[true, true], 1.0);
        assert!((v[0] - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((sent_cl_oracle(&s, &t, 1.0) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert_eq!(self_similarity_oracle(&s), 0.0);
        let z = Tensor::zeros(&[1, 4]);
        assert!((cross_entropy_oracle(&z, &[(0, 2)]) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("conv2d", 1, 0).is_err());
    }

    #[test]
    fn each_op_passes_a_few_instances() {
        for name in OP_NAMES {
            let r = check_op(name, 5, 3).unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
    }
}
