//! Contrast-correlation weighted contrastive loss.
//!
//! Every augmented view carries the mean intensity `d` of the image under its
//! attention map. Pairwise gaps `v = |d_i - d_j|` attenuate the cosine logits
//! of the contrastive softmax through the factor `(1 - v)`, so pairs whose
//! organs look alike in intensity are compared at full strength while
//! contrast-shifted pairs are pulled towards a neutral logit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Phase;
use crate::sampler::AugView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Logits weighted by `(1 - v)`.
    Dcc,
    /// Unweighted logits (`v` forced to zero).
    Plain,
    /// Same-label pairs at full weight, others weighted as in `Dcc`.
    HardLabel,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Dcc => "dcc",
            LossMode::Plain => "plain",
            LossMode::HardLabel => "hard_label",
        })
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcc" => Ok(LossMode::Dcc),
            "plain" => Ok(LossMode::Plain),
            "hard_label" => Ok(LossMode::HardLabel),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

fn default_temperature() -> f64 {
    0.07
}

fn default_mode() -> LossMode {
    LossMode::Dcc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_mode")]
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: default_temperature(),
            mode: default_mode(),
        }
    }
}

impl LossConfig {
    pub fn new(temperature: f64, mode: LossMode) -> Self {
        LossConfig { temperature, mode }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Temperature(self.temperature));
        }
        Ok(())
    }
}

/// Label used by the hard-label weighting and the supervised baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewLabel {
    pub organ: u8,
    pub phase: Phase,
}

impl From<&AugView> for ViewLabel {
    fn from(v: &AugView) -> Self {
        ViewLabel {
            organ: v.organ_class,
            phase: v.phase,
        }
    }
}

/// Mean of `image` over the nonzero pixels of `attention`.
pub fn masked_mean(image: &[f64], attention: &[u8]) -> Result<f64> {
    if image.len() != attention.len() {
        return Err(Error::Shape(format!(
            "image has {} pixels, attention {}",
            image.len(),
            attention.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&x, &s) in image.iter().zip(attention) {
        if s != 0 {
            sum += x * s as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyAttention);
    }
    Ok(sum / count as f64)
}

/// Computes and caches the view's masked mean intensity `d`.
pub fn masked_mean_intensity(view: &mut AugView) -> Result<f64> {
    if let Some(bad) = view.image.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(*bad));
    }
    let d = masked_mean(&view.image, &view.attention)?;
    view.d = Some(d);
    Ok(d)
}

/// Symmetric matrix of clamped intensity gaps, zero on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    n: usize,
    v: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn zeros(n: usize) -> Self {
        CorrelationMatrix {
            n,
            v: vec![0.0; n * n],
        }
    }

    /// Builds from an explicit row-major matrix, validating the invariants.
    pub fn from_rows(n: usize, v: Vec<f64>) -> Result<Self> {
        if v.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}x{n} matrix", v.len())));
        }
        for i in 0..n {
            if v[i * n + i] != 0.0 {
                return Err(Error::Domain(v[i * n + i]));
            }
            for j in 0..n {
                let x = v[i * n + j];
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Domain(x));
                }
                if x != v[j * n + i] {
                    return Err(Error::Shape(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(CorrelationMatrix { n, v })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }
}

pub fn contrast_correlation(d: &[f64]) -> Result<CorrelationMatrix> {
    if let Some(bad) = d.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(*bad));
    }
    let n = d.len();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                v[i * n + j] = (d[i] - d[j]).abs().clamp(0.0, 1.0);
            }
        }
    }
    Ok(CorrelationMatrix { n, v })
}

/// Loss value, its gradient with respect to each embedding, and the logit
/// matrix it was computed from (diagonal left at zero, unused).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

fn check_embeddings(z: &[Vec<f64>]) -> Result<usize> {
    let dim = z.first().map(|v| v.len()).unwrap_or(0);
    if z.len() < 2 || dim == 0 {
        return Err(Error::Shape(format!(
            "need at least two non-empty embeddings, got {}",
            z.len()
        )));
    }
    if z.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("embeddings of unequal dimension".into()));
    }
    if let Some(bad) = z.iter().flatten().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("embedding entry {bad}")));
    }
    Ok(dim)
}

pub fn check_pairing(pairing: &[usize]) -> Result<()> {
    for (k, &p) in pairing.iter().enumerate() {
        if p >= pairing.len() || p == k || pairing[p] != k {
            return Err(Error::Shape(format!("invalid pairing at {k} -> {p}")));
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Correlation entry that scales pair `(k, j)` under `mode`.
fn effective_v(
    mode: LossMode,
    v: &CorrelationMatrix,
    labels: Option<&[ViewLabel]>,
    k: usize,
    j: usize,
) -> f64 {
    match mode {
        LossMode::Dcc => v.get(k, j),
        LossMode::Plain => 0.0,
        LossMode::HardLabel => match labels {
            Some(l) if l[k] == l[j] => 0.0,
            _ => v.get(k, j),
        },
    }
}

/// Weighted contrastive loss summed over all anchors:
///
/// `L = -sum_k [ l(k, p(k)) - logsumexp_{j != k} l(k, j) ]`,
/// `l(k, j) = (z_k . z_j) (1 - v_kj) / T`.
///
/// `labels` is required for [`LossMode::HardLabel`] and ignored otherwise.
pub fn dcc_loss(
    z: &[Vec<f64>],
    v: &CorrelationMatrix,
    pairing: &[usize],
    labels: Option<&[ViewLabel]>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let dim = check_embeddings(z)?;
    let n = z.len();
    if v.size() != n || pairing.len() != n {
        return Err(Error::Shape(format!(
            "{n} embeddings, {}x{} correlation, {} pairings",
            v.size(),
            v.size(),
            pairing.len()
        )));
    }
    check_pairing(pairing)?;
    if cfg.mode == LossMode::HardLabel && labels.map_or(true, |l| l.len() != n) {
        return Err(Error::Shape("hard-label mode needs one label per view".into()));
    }
    let t = cfg.temperature;

    let mut logits = vec![0.0; n * n];
    let mut scale = vec![0.0; n * n];
    for k in 0..n {
        for j in 0..n {
            if j == k {
                continue;
            }
            let w = 1.0 - effective_v(cfg.mode, v, labels, k, j);
            logits[k * n + j] = dot(&z[k], &z[j]) * w / t;
            scale[k * n + j] = w / t;
        }
    }

    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; dim]; n];
    let mut probs = vec![0.0; n];
    for k in 0..n {
        let row = &logits[k * n..(k + 1) * n];
        let max = (0..n)
            .filter(|&j| j != k)
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n {
            probs[j] = if j == k { 0.0 } else { (row[j] - max).exp() };
            denom += probs[j];
        }
        let lse = max + denom.ln();
        loss -= row[pairing[k]] - lse;
        for j in 0..n {
            if j == k {
                continue;
            }
            // dL/dl(k, j) = softmax - indicator(positive)
            let mut g = probs[j] / denom;
            if j == pairing[k] {
                g -= 1.0;
            }
            let c = g * scale[k * n + j];
            for d in 0..dim {
                grad[k][d] += c * z[j][d];
            }
            for d in 0..dim {
                grad[j][d] += c * z[k][d];
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok(LossOutput {
        loss,
        grad,
        logits,
    })
}

/// Supervised multi-positive contrastive loss: positives of anchor `k` are all
/// other views with the same (organ, phase) label. Each anchor contributes the
/// mean negative log-softmax over its positives; anchors without a positive
/// are skipped. Logits are unweighted `z_k . z_j / T`.
pub fn labeled_positive_loss(
    z: &[Vec<f64>],
    labels: &[ViewLabel],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let dim = check_embeddings(z)?;
    let n = z.len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} embeddings, {} labels", labels.len())));
    }
    let t = cfg.temperature;
    let mut logits = vec![0.0; n * n];
    for k in 0..n {
        for j in 0..n {
            if j != k {
                logits[k * n + j] = dot(&z[k], &z[j]) / t;
            }
        }
    }
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; dim]; n];
    let mut used = 0usize;
    let mut probs = vec![0.0; n];
    for k in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != k && labels[j] == labels[k]).collect();
        if positives.is_empty() {
            continue;
        }
        used += 1;
        let row = &logits[k * n..(k + 1) * n];
        let max = (0..n)
            .filter(|&j| j != k)
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n {
            probs[j] = if j == k { 0.0 } else { (row[j] - max).exp() };
            denom += probs[j];
        }
        let lse = max + denom.ln();
        let inv = 1.0 / positives.len() as f64;
        for &p in &positives {
            loss -= inv * (row[p] - lse);
        }
        for j in 0..n {
            if j == k {
                continue;
            }
            let mut g = probs[j] / denom;
            if labels[j] == labels[k] {
                g -= inv;
            }
            let c = g / t;
            for d in 0..dim {
                grad[k][d] += c * z[j][d];
            }
            for d in 0..dim {
                grad[j][d] += c * z[k][d];
            }
        }
    }
    if used == 0 {
        return Err(Error::EmptyLoss);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok((loss, grad))
}

/// Straight transliteration of the weighted loss with naive exponentials and
/// compensated summation. Test oracle only; deliberately shares nothing with
/// [`dcc_loss`].
pub fn reference_dcc_loss(
    z: &[Vec<f64>],
    v: &CorrelationMatrix,
    pairing: &[usize],
    labels: Option<&[ViewLabel]>,
    cfg: &LossConfig,
) -> Result<f64> {
    let t = cfg.temperature;
    if !(t > 0.0) {
        return Err(Error::Temperature(t));
    }
    let n = z.len();
    if v.size() != n || pairing.len() != n {
        return Err(Error::Shape("size mismatch".into()));
    }
    let weight = |k: usize, j: usize| -> f64 {
        let same = labels.is_some_and(|l| l[k] == l[j]);
        match cfg.mode {
            LossMode::Plain => 1.0,
            LossMode::HardLabel if same => 1.0,
            _ => 1.0 - v.as_slice()[k * n + j],
        }
    };
    let cosine = |a: &Vec<f64>, b: &Vec<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    };
    let mut total = KahanSum::default();
    for k in 0..n {
        let p = pairing[k];
        let numerator = (cosine(&z[k], &z[p]) * weight(k, p) / t).exp();
        let mut denominator = KahanSum::default();
        for j in 0..n {
            if j != k {
                denominator.add((cosine(&z[k], &z[j]) * weight(k, j) / t).exp());
            }
        }
        total.add(-(numerator / denominator.value()).ln());
    }
    Ok(total.value())
}

#[derive(Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}
