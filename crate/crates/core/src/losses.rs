//! Discriminative metric learning objectives: contrastive pairs,
//! multisimilarity (with optional language-adjusted mining and reweighting)
//! and the margin loss with distance-weighted negative sampling.
//!
//! Every loss returns its value together with the gradient with respect to
//! its image-side input (embeddings or the image similarity matrix).

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Real};
use crate::simcore::{EmbeddingMatrix, SimilarityMatrix};

/// Loss value plus gradient with respect to the loss input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Matrix<T>,
}

impl<T: Real> LossGrad<T> {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: T::zero(),
            grad: Matrix::zeros(rows, cols),
        }
    }
}

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::CountMismatch {
            what: "labels".into(),
            expected: n,
            found: labels.len(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Contrastive

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    CosineDistance,
}

/// `Clamped` is `max(γp, d)` for positives and `-min(γn, d)` for negatives;
/// `Hinge` is the usual `max(0, d - γp)` / `max(0, γn - d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    Clamped,
    Hinge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveParams {
    pub gamma_p: f64,
    pub gamma_n: f64,
    pub metric: DistanceMetric,
    pub form: ContrastiveForm,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self {
            gamma_p: 0.0,
            gamma_n: 1.0,
            metric: DistanceMetric::Euclidean,
            form: ContrastiveForm::Clamped,
        }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.gamma_p && self.gamma_p <= self.gamma_n) {
            return Err(Error::InvalidParameter(format!(
                "contrastive margins need 0 <= gamma_p <= gamma_n, got {} / {}",
                self.gamma_p, self.gamma_n
            )));
        }
        Ok(())
    }
}

/// Distance and its gradient with respect to `a` (the gradient with respect
/// to `b` is the negation for Euclidean, `-a` for cosine distance).
fn pair_distance<T: Real>(a: &[T], b: &[T], metric: DistanceMetric) -> T {
    match metric {
        DistanceMetric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt(),
        DistanceMetric::CosineDistance => T::one() - dot(a, b),
    }
}

fn accumulate_distance_grad<T: Real>(
    grad: &mut Matrix<T>,
    emb: &Matrix<T>,
    i: usize,
    j: usize,
    d: T,
    metric: DistanceMetric,
    coeff: T,
) {
    match metric {
        DistanceMetric::Euclidean => {
            if d.as_f64() < 1e-12 {
                return;
            }
            for k in 0..emb.cols() {
                let g = coeff * (emb[(i, k)] - emb[(j, k)]) / d;
                grad[(i, k)] += g;
                grad[(j, k)] -= g;
            }
        }
        DistanceMetric::CosineDistance => {
            for k in 0..emb.cols() {
                let (ai, aj) = (emb[(i, k)], emb[(j, k)]);
                grad[(i, k)] -= coeff * aj;
                grad[(j, k)] -= coeff * ai;
            }
        }
    }
}

/// Pair loss averaged over all ordered pairs `(i, j)`, `i != j`.
pub fn contrastive_loss<T: Real>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    p: &ContrastiveParams,
) -> Result<LossGrad<T>> {
    p.validate()?;
    let n = emb.len();
    check_labels(n, labels)?;
    if n < 2 {
        return Err(Error::NoValidPairs);
    }
    let e = emb.matrix();
    let (gp, gn) = (T::lit(p.gamma_p), T::lit(p.gamma_n));
    let pairs = T::lit((n * (n - 1)) as f64);
    let mut value = T::zero();
    let mut grad = Matrix::zeros(n, e.cols());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = pair_distance(e.row(i), e.row(j), p.metric);
            let same = labels[i] == labels[j];
            // (term value, dterm/dd)
            let (v, dd) = match (p.form, same) {
                (ContrastiveForm::Clamped, true) => {
                    if d > gp {
                        (d, T::one())
                    } else {
                        (gp, T::zero())
                    }
                }
                (ContrastiveForm::Clamped, false) => {
                    if d < gn {
                        (-d, -T::one())
                    } else {
                        (-gn, T::zero())
                    }
                }
                (ContrastiveForm::Hinge, true) => {
                    if d > gp {
                        (d - gp, T::one())
                    } else {
                        (T::zero(), T::zero())
                    }
                }
                (ContrastiveForm::Hinge, false) => {
                    if d < gn {
                        (gn - d, -T::one())
                    } else {
                        (T::zero(), T::zero())
                    }
                }
            };
            value += v;
            if dd != T::zero() {
                accumulate_distance_grad(&mut grad, e, i, j, d, p.metric, dd / pairs);
            }
        }
    }
    Ok(LossGrad {
        value: value / pairs,
        grad,
    })
}

// ---------------------------------------------------------------------------
// Multisimilarity

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultisimParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Mining interpolation weight on the image similarity (1 = image only).
    pub nu1: f64,
    /// Interpolation order.
    pub nu2: f64,
    /// Positive-branch reweighting exponent (0 disables).
    pub nu3: f64,
    /// Negative-branch reweighting exponent (0 disables).
    pub nu4: f64,
}

impl Default for MultisimParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            lambda: 0.5,
            epsilon: 0.1,
            nu1: 1.0,
            nu2: 1.0,
            nu3: 0.0,
            nu4: 0.0,
        }
    }
}

impl MultisimParams {
    /// Mining on a linear blend of language and image similarity.
    pub fn language_mining(nu1: f64) -> Self {
        Self {
            nu1,
            ..Self::default()
        }
    }

    /// Loss terms rescaled by `(S_lang / S_img)^0.75`, with α and β
    /// readjusted for the change in magnitude.
    pub fn language_reweighted() -> Self {
        Self {
            alpha: 1.5,
            beta: 45.0,
            nu3: 0.75,
            nu4: 0.75,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.lambda > -1.0
            && self.lambda < 1.0
            && self.epsilon >= 0.0
            && self.nu2 > 0.0
            && self.nu3 >= 0.0
            && self.nu4 >= 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "invalid multisimilarity parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sign-preserving power, so that interpolation orders other than one stay
/// defined for negative similarities.
fn signed_pow(x: f64, p: f64) -> f64 {
    if p == 1.0 {
        x
    } else {
        x.signum() * x.abs().powf(p)
    }
}

/// `[(1 - ν1) · S_lang^ν2 + ν1 · S_img^ν2]^(1/ν2)`.
pub fn interpolate_similarity(s_lang: f64, s_img: f64, nu1: f64, nu2: f64) -> f64 {
    if nu1 == 1.0 {
        return s_img;
    }
    let mixed = (1.0 - nu1) * signed_pow(s_lang, nu2) + nu1 * signed_pow(s_img, nu2);
    signed_pow(mixed, 1.0 / nu2)
}

/// Positive and negative pair masks (row = anchor), diagonal excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiningMasks {
    pub n: usize,
    pub positive: Vec<bool>,
    pub negative: Vec<bool>,
}

impl MiningMasks {
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.n + j]
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.negative[i * self.n + j]
    }
}

/// Pair mining for the multisimilarity loss.
///
/// A positive `k` of anchor `i` is kept when `f(S_lang, S_img)_ik` is below
/// the hardest negative similarity plus `ε`; a negative is kept when it is
/// above the easiest positive similarity minus `ε`. Without `s_lang`, `f`
/// is the raw image similarity. Anchors lacking positives or negatives
/// select nothing.
pub fn language_adjusted_mining_mask<T: Real>(
    s_img: &SimilarityMatrix<T>,
    s_lang: Option<&SimilarityMatrix<T>>,
    labels: &[usize],
    p: &MultisimParams,
) -> Result<MiningMasks> {
    s_img.ensure_square()?;
    let n = s_img.data.rows();
    check_labels(n, labels)?;
    if let Some(l) = s_lang {
        s_img.ensure_same_shape(l)?;
    }
    let mut positive = vec![false; n * n];
    let mut negative = vec![false; n * n];
    for i in 0..n {
        let mut hardest_neg = f64::NEG_INFINITY;
        let mut easiest_pos = f64::INFINITY;
        for k in 0..n {
            if k == i {
                continue;
            }
            let s = s_img.data[(i, k)].as_f64();
            if labels[k] == labels[i] {
                easiest_pos = easiest_pos.min(s);
            } else {
                hardest_neg = hardest_neg.max(s);
            }
        }
        if !hardest_neg.is_finite() || !easiest_pos.is_finite() {
            continue;
        }
        for k in 0..n {
            if k == i {
                continue;
            }
            let s = s_img.data[(i, k)].as_f64();
            let mined = match s_lang {
                Some(l) => interpolate_similarity(l.data[(i, k)].as_f64(), s, p.nu1, p.nu2),
                None => s,
            };
            if labels[k] == labels[i] {
                positive[i * n + k] = mined < hardest_neg + p.epsilon;
            } else {
                negative[i * n + k] = mined > easiest_pos - p.epsilon;
            }
        }
    }
    Ok(MiningMasks {
        n,
        positive,
        negative,
    })
}

const RATIO_FLOOR: f64 = 1e-3;
const RATIO_CAP: f64 = 10.0;

/// Reweighting factor `(S_lang / S_img)^ν` and its derivative with respect
/// to `S_img`. The ratio is clamped to `[0, 10]` with the denominator
/// floored at `1e-3`; clamped regions have zero derivative.
fn reweight<T: Real>(s_lang: T, s_img: T, nu: f64) -> (T, T) {
    if nu == 0.0 {
        return (T::one(), T::zero());
    }
    let floor = T::lit(RATIO_FLOOR);
    let floored = s_img < floor;
    let denom = if floored { floor } else { s_img };
    let r = s_lang / denom;
    if r <= T::zero() {
        return (T::zero(), T::zero());
    }
    let nu_t = T::lit(nu);
    if r >= T::lit(RATIO_CAP) {
        return (T::lit(RATIO_CAP).powf(nu_t), T::zero());
    }
    let w = r.powf(nu_t);
    let dr = if floored { T::zero() } else { -s_lang / (s_img * s_img) };
    (w, nu_t * r.powf(nu_t - T::one()) * dr)
}

/// `log(1 + Σ exp(x_k))` and its softmax weights, computed stably.
fn log1p_sum_exp<T: Real>(xs: &[T]) -> (T, Vec<T>) {
    let m = xs.iter().copied().fold(T::zero(), T::max);
    let base = (-m).exp();
    let exps: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let rest: T = exps.iter().copied().sum();
    let total = base + rest;
    // ln(1 + rest) keeps full relative precision for small sums
    let value = if m == T::zero() { rest.ln_1p() } else { m + total.ln() };
    (value, exps.into_iter().map(|e| e / total).collect())
}

/// Multisimilarity loss averaged over anchors. With `s_lang`, mining uses
/// the interpolated similarity and loss terms are reweighted by
/// `(S_lang/S_img)^{ν3, ν4}`; gradient flows only into `s_img`.
pub fn multisimilarity_loss<T: Real>(
    s_img: &SimilarityMatrix<T>,
    labels: &[usize],
    p: &MultisimParams,
    s_lang: Option<&SimilarityMatrix<T>>,
) -> Result<LossGrad<T>> {
    p.validate()?;
    let masks = language_adjusted_mining_mask(s_img, s_lang, labels, p)?;
    let n = masks.n;
    let mut grad = Matrix::zeros(n, n);
    let mut total = T::zero();
    let inv_n = T::lit(1.0 / n as f64);
    let lambda = T::lit(p.lambda);
    for i in 0..n {
        for (branch_pos, scale, nu) in [(true, p.alpha, p.nu3), (false, p.beta, p.nu4)] {
            let sign = if branch_pos { -1.0 } else { 1.0 };
            let signed = T::lit(sign * scale);
            let scale = T::lit(scale);
            let mut ks = Vec::new();
            let mut xs = Vec::new();
            let mut dxs = Vec::new();
            for k in 0..n {
                let selected = if branch_pos {
                    masks.is_positive(i, k)
                } else {
                    masks.is_negative(i, k)
                };
                if !selected {
                    continue;
                }
                let s = s_img.data[(i, k)];
                let (w, dw) = match s_lang {
                    Some(l) => reweight(l.data[(i, k)], s, nu),
                    None => (T::one(), T::zero()),
                };
                ks.push(k);
                xs.push(signed * w * (s - lambda));
                dxs.push(signed * (w + (s - lambda) * dw));
            }
            if ks.is_empty() {
                continue;
            }
            let (lse, soft) = log1p_sum_exp(&xs);
            total += lse / scale;
            for ((&k, &sm), &dx) in ks.iter().zip(&soft).zip(&dxs) {
                grad[(i, k)] += inv_n * sm * dx / scale;
            }
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        grad,
    })
}

// ---------------------------------------------------------------------------
// Margin loss

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletSampler {
    DistanceWeighted,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginParams {
    /// Class-independent boundary β (initial value when learnable).
    pub beta_margin: f64,
    pub alpha_margin: f64,
    pub sampler: TripletSampler,
    pub learnable_beta: bool,
    pub beta_lr: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            beta_margin: 1.2,
            alpha_margin: 0.2,
            sampler: TripletSampler::DistanceWeighted,
            learnable_beta: false,
            beta_lr: 5e-4,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_margin > 0.0 && self.alpha_margin >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "margin loss needs beta > 0 and alpha >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginLossGrad<T> {
    pub value: T,
    pub grad: Matrix<T>,
    pub grad_beta: T,
}

/// Lower clip on distances before evaluating the sampling density.
pub const DISTANCE_CUTOFF: f64 = 0.5;

/// Negative-sampling probabilities for one anchor: inverse of the density of
/// pairwise distances on the unit sphere in `dim` dimensions,
/// `q(d) ∝ d^(dim-2) (1 - d²/4)^((dim-3)/2)`. Entries for non-negatives are
/// zero. Falls back to uniform when every weight vanishes.
pub fn distance_weighted_probabilities<T: Real>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    anchor: usize,
) -> Vec<f64> {
    let dim = emb.dim() as f64;
    let a = emb.row(anchor);
    let mut log_w = vec![f64::NEG_INFINITY; emb.len()];
    for (k, lw) in log_w.iter_mut().enumerate() {
        if labels[k] == labels[anchor] {
            continue;
        }
        let d = pair_distance(a, emb.row(k), DistanceMetric::Euclidean)
            .as_f64()
            .max(DISTANCE_CUTOFF);
        let inner = (1.0 - 0.25 * d * d).max(1e-8);
        let log_q = (dim - 2.0) * d.ln() + 0.5 * (dim - 3.0) * inner.ln();
        *lw = -log_q;
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w
        .iter()
        .map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        let negs = (0..emb.len())
            .filter(|&k| labels[k] != labels[anchor])
            .count();
        for (k, x) in w.iter_mut().enumerate() {
            *x = if labels[k] != labels[anchor] {
                1.0 / negs as f64
            } else {
                0.0
            };
        }
    }
    w
}

/// One triplet per (anchor, positive) pair; the negative is drawn by the
/// configured sampler.
pub fn sample_triplets<T: Real, R: Rng>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    p: &MarginParams,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let n = emb.len();
    check_labels(n, labels)?;
    let mut triplets = Vec::new();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[a]).collect();
        if negatives.is_empty() {
            continue;
        }
        let dist = match p.sampler {
            TripletSampler::DistanceWeighted => Some(
                WeightedIndex::new(distance_weighted_probabilities(emb, labels, a))
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?,
            ),
            TripletSampler::Random => None,
        };
        for pos in (0..n).filter(|&k| k != a && labels[k] == labels[a]) {
            let negative = match &dist {
                Some(d) => d.sample(rng),
                None => negatives[rng.gen_range(0..negatives.len())],
            };
            triplets.push(Triplet {
                anchor: a,
                positive: pos,
                negative,
            });
        }
    }
    if triplets.is_empty() {
        return Err(Error::NoValidTriplets);
    }
    Ok(triplets)
}

/// `mean_t [max(0, α + d(a,p) - β) + max(0, α - (d(a,n) - β))]` for fixed
/// triplets, with gradients for the embeddings and for β.
pub fn margin_loss_for_triplets<T: Real>(
    emb: &EmbeddingMatrix<T>,
    triplets: &[Triplet],
    p: &MarginParams,
    beta: T,
) -> Result<MarginLossGrad<T>> {
    p.validate()?;
    if triplets.is_empty() {
        return Err(Error::NoValidTriplets);
    }
    let e = emb.matrix();
    let alpha = T::lit(p.alpha_margin);
    let count = T::lit(triplets.len() as f64);
    let mut value = T::zero();
    let mut grad_beta = T::zero();
    let mut grad = Matrix::zeros(e.rows(), e.cols());
    for t in triplets {
        for (other, indicator) in [(t.positive, T::one()), (t.negative, -T::one())] {
            let d = pair_distance(e.row(t.anchor), e.row(other), DistanceMetric::Euclidean);
            let term = alpha + indicator * (d - beta);
            if term > T::zero() {
                value += term;
                grad_beta -= indicator / count;
                accumulate_distance_grad(
                    &mut grad,
                    e,
                    t.anchor,
                    other,
                    d,
                    DistanceMetric::Euclidean,
                    indicator / count,
                );
            }
        }
    }
    Ok(MarginLossGrad {
        value: value / count,
        grad,
        grad_beta,
    })
}

/// Samples triplets with a generator seeded by `rng_seed` and evaluates the
/// margin loss at `β = p.beta_margin`.
pub fn margin_loss<T: Real>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    p: &MarginParams,
    rng_seed: u64,
) -> Result<MarginLossGrad<T>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let triplets = sample_triplets(emb, labels, p, &mut rng)?;
    margin_loss_for_triplets(emb, &triplets, p, T::lit(p.beta_margin))
}
