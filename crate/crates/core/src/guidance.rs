//! Language guidance objectives.
//!
//! The main objective distills row-wise softmax distributions of a language
//! similarity matrix into the (masked) image similarity matrix through a KL
//! divergence. Pseudolabel targets, external hierarchy targets and the
//! alternative inclusion mechanisms (row-wise L2, full-matrix KL, CLIP-style
//! contrast, language-embedding prediction) live here as well.
//!
//! Language-side inputs are always constants: no function in this module
//! produces a gradient for them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::losses::LossGrad;
use crate::simcore::{
    check_temperature, cosine_similarity_matrix, kl_row, rowwise_kl_softmax_backward,
    softmax_into, softmax_rows, EmbeddingMatrix, SimKind, SimilarityMatrix, LOG_FLOOR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Elg,
    Plg,
    External,
    ClipStyle,
    PredictHead,
    RowwiseL2,
    FullKl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// KL against the mean of the per-rank target matrices.
    Average,
    /// Mean of the per-rank KL losses.
    Multi,
    /// KL against the mean over all rank pairings.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceLevel {
    Class,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub omega: f64,
    pub gamma_lang: f64,
    pub k: usize,
    pub merge: MergeMode,
    pub level: GuidanceLevel,
    pub temperature: f64,
    /// Logit temperature for the CLIP-style regularizer.
    pub clip_temperature: f64,
    /// Class-level language tables to use; more than one are averaged in
    /// similarity space.
    pub language_tables: Vec<String>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::None,
            omega: 5.0,
            gamma_lang: 0.5,
            k: 5,
            merge: MergeMode::Average,
            level: GuidanceLevel::Class,
            temperature: 1.0,
            clip_temperature: 0.07,
            language_tables: vec!["lang_class".to_string()],
        }
    }
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) {
            return Err(Error::Config(format!("omega must be >= 0, got {}", self.omega)));
        }
        if self.mode == GuidanceMode::Plg && self.k == 0 {
            return Err(Error::Config("k must be >= 1 for pseudolabel guidance".into()));
        }
        if !(self.temperature > 0.0) || !(self.clip_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Named unit-norm language embeddings (class names, pseudo-class names or
/// per-sample captions).
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageTable<T> {
    names: Vec<String>,
    embeddings: EmbeddingMatrix<T>,
    index: HashMap<String, usize>,
    /// Template the embeddings were produced with; metadata only.
    pub primer: Option<String>,
}

impl<T: Real> LanguageTable<T> {
    pub fn new(names: Vec<String>, embeddings: EmbeddingMatrix<T>) -> Result<Self> {
        if names.len() != embeddings.len() {
            return Err(Error::CountMismatch {
                what: "language table names".into(),
                expected: embeddings.len(),
                found: names.len(),
            });
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::DuplicateName(n.clone()));
            }
        }
        Ok(Self {
            names,
            embeddings,
            index,
            primer: None,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix<T> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn lookup(&self, name: &str) -> Option<&[T]> {
        self.position(name).map(|i| self.embeddings.row(i))
    }

    /// Rows for `names`, in order; the first missing name is reported.
    pub fn gather(&self, names: &[&str]) -> std::result::Result<EmbeddingMatrix<T>, String> {
        let idx = names
            .iter()
            .map(|n| self.position(n).ok_or_else(|| n.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.embeddings.select(&idx))
    }

    /// Class-by-class cosine similarity for `class_names` (in that order).
    pub fn class_similarity(&self, class_names: &[String]) -> Result<Matrix<T>> {
        let refs: Vec<&str> = class_names.iter().map(String::as_str).collect();
        let e = self.gather(&refs).map_err(Error::MissingClassName)?;
        Ok(cosine_similarity_matrix(&e, &e)?.data)
    }

    pub fn cast<U: Real>(&self) -> LanguageTable<U> {
        LanguageTable {
            names: self.names.clone(),
            embeddings: self.embeddings.cast(),
            index: self.index.clone(),
            primer: self.primer.clone(),
        }
    }
}

/// Expands a class-by-class matrix to a batch matrix, `out[a][b] = C[y_a][y_b]`.
pub fn batch_similarity<T: Real>(
    class_matrix: &Matrix<T>,
    labels: &[usize],
    kind: SimKind,
) -> SimilarityMatrix<T> {
    let n = labels.len();
    SimilarityMatrix::new(
        Matrix::from_fn(n, n, |a, b| class_matrix[(labels[a], labels[b])]),
        kind,
    )
}

fn check_batch<T: Real>(s: &SimilarityMatrix<T>, labels: &[usize]) -> Result<()> {
    s.ensure_square()?;
    if labels.len() != s.data.rows() {
        return Err(Error::CountMismatch {
            what: "labels".into(),
            expected: s.data.rows(),
            found: labels.len(),
        });
    }
    Ok(())
}

/// Same-class mask (diagonal included), row-major.
pub fn same_class_mask(labels: &[usize]) -> Vec<bool> {
    let n = labels.len();
    (0..n * n).map(|f| labels[f / n] == labels[f % n]).collect()
}

/// Replaces same-class entries (including the diagonal) by `1 + γ_lang`;
/// those entries are frozen.
pub fn masked_image_similarity<T: Real>(
    s_img: &SimilarityMatrix<T>,
    labels: &[usize],
    gamma_lang: T,
) -> Result<SimilarityMatrix<T>> {
    check_batch(s_img, labels)?;
    let mask = same_class_mask(labels);
    let fill = T::one() + gamma_lang;
    let mut data = s_img.data.clone();
    for (v, &m) in data.as_mut_slice().iter_mut().zip(&mask) {
        if m {
            *v = fill;
        }
    }
    Ok(SimilarityMatrix {
        data,
        kind: SimKind::MaskedImage,
        frozen: Some(mask),
    })
}

/// Row-wise KL between `softmax(S_img / T)` and `softmax((S_lang + γ) / T)`,
/// with gradient into the non-frozen entries of `s_img`.
pub fn elg_match_loss<T: Real>(
    s_img: &SimilarityMatrix<T>,
    s_lang: &SimilarityMatrix<T>,
    gamma_lang: T,
    temperature: T,
) -> Result<LossGrad<T>> {
    s_img.ensure_square()?;
    s_img.ensure_same_shape(s_lang)?;
    let q = softmax_rows(&s_lang.data, gamma_lang, temperature)?;
    kl_to_target(s_img, &q, temperature)
}

fn kl_to_target<T: Real>(
    s_img: &SimilarityMatrix<T>,
    q: &Matrix<T>,
    temperature: T,
) -> Result<LossGrad<T>> {
    let p = softmax_rows(&s_img.data, T::zero(), temperature)?;
    let n = T::lit(p.rows() as f64);
    let value = (0..p.rows())
        .map(|i| kl_row(p.row(i), q.row(i)))
        .sum::<T>()
        / n;
    let mut grad = rowwise_kl_softmax_backward(&p, q, temperature);
    s_img.mask_gradient(&mut grad);
    Ok(LossGrad { value, grad })
}

/// `L_dml + ω · L_match`; both gradients must be with respect to the same input.
pub fn compose_objective<T: Real>(
    dml: &LossGrad<T>,
    matching: &LossGrad<T>,
    omega: T,
) -> Result<LossGrad<T>> {
    if omega < T::zero() {
        return Err(Error::InvalidParameter(format!("omega must be >= 0, got {omega}")));
    }
    let mut grad = dml.grad.clone();
    grad.add_assign_scaled(&matching.grad, omega)?;
    Ok(LossGrad {
        value: dml.value + omega * matching.value,
        grad,
    })
}

/// Elementwise mean of similarity matrices (used to merge targets from
/// several language models, whose embedding spaces differ).
pub fn average_language_targets<T: Real>(
    tables: &[SimilarityMatrix<T>],
) -> Result<SimilarityMatrix<T>> {
    let first = tables.first().ok_or(Error::EmptyList)?;
    let mut acc = Matrix::zeros(first.data.rows(), first.data.cols());
    for t in tables {
        acc.add_assign_scaled(&t.data, T::one())?;
    }
    let k = T::lit(tables.len() as f64);
    Ok(SimilarityMatrix::new(acc.map(|x| x / k), first.kind))
}

/// Matching against pseudolabel targets.
///
/// `s_img` is the masked image matrix for class-level pseudolabels and the
/// raw one for sample-level pseudolabels. `targets` holds `k` per-rank
/// matrices for `Average`/`Multi` and `k²` rank pairings for `Dense`.
pub fn pseudomatch_loss<T: Real>(
    s_img: &SimilarityMatrix<T>,
    targets: &[SimilarityMatrix<T>],
    spec: &GuidanceSpec,
) -> Result<LossGrad<T>> {
    if targets.is_empty() {
        return Err(Error::EmptyTargetList);
    }
    let k = spec.k;
    let expected = match spec.merge {
        MergeMode::Average | MergeMode::Multi => k,
        MergeMode::Dense => k * k,
    };
    if targets.len() != expected {
        return Err(Error::CountMismatch {
            what: "pseudolabel target matrices".into(),
            expected,
            found: targets.len(),
        });
    }
    for t in targets {
        s_img.ensure_same_shape(t)?;
    }
    let gamma = T::lit(spec.gamma_lang);
    let temp = T::lit(spec.temperature);
    match spec.merge {
        MergeMode::Average | MergeMode::Dense => {
            let mean = average_language_targets(targets)?;
            elg_match_loss(s_img, &mean, gamma, temp)
        }
        MergeMode::Multi => {
            let (r, c) = s_img.shape();
            let mut acc = LossGrad::zero(r, c);
            let w = T::one() / T::lit(targets.len() as f64);
            for t in targets {
                let l = elg_match_loss(s_img, t, gamma, temp)?;
                acc.value += w * l.value;
                acc.grad.add_assign_scaled(&l.grad, w)?;
            }
            Ok(acc)
        }
    }
}

/// KL between softmaxes taken over the whole flattened matrix.
pub fn full_matrix_kl<T: Real>(
    s_img: &SimilarityMatrix<T>,
    s_lang: &SimilarityMatrix<T>,
    gamma_lang: T,
    temperature: T,
) -> Result<LossGrad<T>> {
    s_img.ensure_same_shape(s_lang)?;
    check_temperature(temperature)?;
    let flat_img = s_img.data.as_slice();
    let mut p = vec![T::zero(); flat_img.len()];
    let mut q = vec![T::zero(); flat_img.len()];
    softmax_into(flat_img, T::zero(), temperature, &mut p);
    softmax_into(s_lang.data.as_slice(), gamma_lang, temperature, &mut q);
    let kl = kl_row(&p, &q);
    let floor = T::lit(LOG_FLOOR);
    let g: Vec<T> = p
        .iter()
        .zip(&q)
        .map(|(&pj, &qj)| pj * (pj.max(floor).ln() - qj.max(floor).ln() - kl) / temperature)
        .collect();
    let (r, c) = s_img.shape();
    let mut grad = Matrix::from_vec(r, c, g)?;
    s_img.mask_gradient(&mut grad);
    Ok(LossGrad { value: kl, grad })
}

/// Mean squared row distance between the masked image matrix and the
/// language matrix. Frozen entries are compared against `S_lang + γ` so
/// that they contribute nothing.
pub fn rowwise_l2_guidance<T: Real>(
    s_img: &SimilarityMatrix<T>,
    s_lang: &SimilarityMatrix<T>,
    gamma_lang: T,
) -> Result<LossGrad<T>> {
    s_img.ensure_same_shape(s_lang)?;
    let (r, c) = s_img.shape();
    let n = T::lit(r as f64);
    let mut value = T::zero();
    let mut grad = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let target = if s_img.is_frozen(i, j) {
                s_lang.data[(i, j)] + gamma_lang
            } else {
                s_lang.data[(i, j)]
            };
            let d = s_img.data[(i, j)] - target;
            value += d * d / n;
            grad[(i, j)] = T::lit(2.0) * d / n;
        }
    }
    s_img.mask_gradient(&mut grad);
    Ok(LossGrad { value, grad })
}

/// Symmetric cross-entropy between image and language embeddings with the
/// diagonal as target (`S_mixed = img · langᵀ / τ`). Gradient is with
/// respect to `img_emb`.
pub fn clip_style_loss<T: Real>(
    img_emb: &EmbeddingMatrix<T>,
    lang_emb: &EmbeddingMatrix<T>,
    temperature: T,
) -> Result<LossGrad<T>> {
    check_temperature(temperature)?;
    if img_emb.len() != lang_emb.len() {
        return Err(Error::ShapeMismatch {
            expected: (img_emb.len(), lang_emb.dim()),
            found: (lang_emb.len(), lang_emb.dim()),
        });
    }
    let mixed = cosine_similarity_matrix(img_emb, lang_emb)?.data;
    let n = mixed.rows();
    let row_p = softmax_rows(&mixed, T::zero(), temperature)?;
    let col_p = softmax_rows(&mixed.transpose(), T::zero(), temperature)?.transpose();
    let half = T::lit(0.5);
    let nn = T::lit(n as f64);
    let floor = T::lit(LOG_FLOOR);
    let mut value = T::zero();
    let mut d_mixed = Matrix::zeros(n, n);
    for i in 0..n {
        value -= half * (row_p[(i, i)].max(floor).ln() + col_p[(i, i)].max(floor).ln());
        for j in 0..n {
            let delta = if i == j { T::one() } else { T::zero() };
            d_mixed[(i, j)] =
                half * ((row_p[(i, j)] - delta) + (col_p[(i, j)] - delta)) / (nn * temperature);
        }
    }
    let grad = d_mixed.matmul(lang_emb.matrix())?;
    Ok(LossGrad {
        value: value / nn,
        grad,
    })
}

/// Negated mean cosine between predicted and target language embeddings.
pub fn predict_head_loss<T: Real>(
    head_out: &EmbeddingMatrix<T>,
    lang_targets: &EmbeddingMatrix<T>,
) -> Result<LossGrad<T>> {
    head_out.matrix().ensure_shape(lang_targets.matrix())?;
    let n = T::lit(head_out.len() as f64);
    let value = -(0..head_out.len())
        .map(|i| crate::linalg::dot(head_out.row(i), lang_targets.row(i)))
        .sum::<T>()
        / n;
    let grad = lang_targets.matrix().map(|x| -x / n);
    Ok(LossGrad { value, grad })
}

/// Precomputed class-relation targets (e.g. hierarchy similarities in
/// `[0, 1]`), mapped affinely to `[-1, 1]` on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalTargets<T> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Matrix<T>,
}

impl<T: Real> ExternalTargets<T> {
    /// `unit_interval` holds similarities in `[0, 1]`.
    pub fn from_unit_interval(names: Vec<String>, unit_interval: Matrix<T>) -> Result<Self> {
        let n = names.len();
        if unit_interval.shape() != (n, n) {
            return Err(Error::ShapeMismatch {
                expected: (n, n),
                found: unit_interval.shape(),
            });
        }
        let mut index = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        let two = T::lit(2.0);
        Ok(Self {
            names,
            index,
            matrix: unit_interval.map(|x| two * x - T::one()),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Rescaled matrix in `[-1, 1]`.
    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    /// Reorders the targets into the dataset's class order.
    pub fn class_matrix(&self, class_names: &[String]) -> Result<Matrix<T>> {
        let idx = class_names
            .iter()
            .map(|c| {
                self.index
                    .get(c)
                    .copied()
                    .ok_or_else(|| Error::MissingClassInExternalMatrix(c.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_fn(idx.len(), idx.len(), |a, b| {
            self.matrix[(idx[a], idx[b])]
        }))
    }
}

/// Matching against an external target matrix already expanded to the batch.
pub fn external_target_guidance<T: Real>(
    s_img: &SimilarityMatrix<T>,
    s_external: &SimilarityMatrix<T>,
    gamma_lang: T,
    temperature: T,
) -> Result<LossGrad<T>> {
    elg_match_loss(s_img, s_external, gamma_lang, temperature)
}
