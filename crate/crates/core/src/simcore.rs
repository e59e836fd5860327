//! Dense similarity, softmax and divergence kernels.
//!
//! Every kernel is generic over [`Real`], so the same code path runs in
//! single precision during training and in double precision when checked
//! against finite differences.
//!
//! Note on the language-side shift: `row_softmax` is invariant to adding a
//! constant to a whole row, so shifting every entry of a language row by
//! `gamma_lang` does not change the matching loss. The offset only matters
//! where it enters the masked image matrix (see
//! [`crate::guidance::masked_image_similarity`]). The shift is kept as a
//! parameter regardless.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix, Real};

/// Probabilities are floored at this value before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-30;

const ZERO_ROW_NORM: f64 = 1e-12;

/// Row-major matrix whose rows live on the unit hypersphere.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T>(Matrix<T>);

impl<T: Real> EmbeddingMatrix<T> {
    /// Wraps rows that are already unit-norm. Rows are checked to within
    /// `1e-4` (loose enough for single precision inputs).
    pub fn from_unit_rows(m: Matrix<T>) -> Result<Self> {
        check_nonempty(&m)?;
        for (i, r) in m.row_iter().enumerate() {
            let n = norm(r).as_f64();
            if !n.is_finite() || (n - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidParameter(format!(
                    "row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }

    pub fn cast<U: Real>(&self) -> EmbeddingMatrix<U> {
        EmbeddingMatrix(self.0.cast())
    }
}

fn check_nonempty<T: Real>(m: &Matrix<T>) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidParameter(format!(
            "embedding matrix must be non-empty, got {:?}",
            m.shape()
        )));
    }
    if !m.all_finite() {
        let idx = m.as_slice().iter().position(|x| !x.is_finite()).unwrap();
        return Err(Error::NonFiniteValue(idx));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimKind {
    Image,
    Language,
    Pseudolang,
    MaskedImage,
    Mixed,
    External,
}

/// Pairwise similarity matrix.
///
/// `frozen` marks entries that were substituted by constants (same-class
/// entries of a masked image matrix). Losses never send gradient into them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub data: Matrix<T>,
    pub kind: SimKind,
    pub frozen: Option<Vec<bool>>,
}

impl<T: Real> SimilarityMatrix<T> {
    pub fn new(data: Matrix<T>, kind: SimKind) -> Self {
        Self {
            data,
            kind,
            frozen: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    pub fn is_frozen(&self, i: usize, j: usize) -> bool {
        self.frozen
            .as_ref()
            .map(|f| f[i * self.data.cols() + j])
            .unwrap_or(false)
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        self.data.ensure_shape(&other.data)
    }

    pub fn ensure_square(&self) -> Result<()> {
        let (r, c) = self.shape();
        if r != c {
            return Err(Error::ShapeMismatch {
                expected: (r, r),
                found: (r, c),
            });
        }
        Ok(())
    }

    /// Zeroes the entries of `grad` that correspond to frozen entries.
    pub fn mask_gradient(&self, grad: &mut Matrix<T>) {
        if let Some(f) = &self.frozen {
            for (g, &fz) in grad.as_mut_slice().iter_mut().zip(f) {
                if fz {
                    *g = T::zero();
                }
            }
        }
    }
}

/// Row-stochastic matrix with strictly positive entries.
#[derive(Clone, Debug, PartialEq)]
pub struct RowDistribution<T>(Matrix<T>);

impl<T: Real> RowDistribution<T> {
    /// Wraps a matrix whose rows already sum to one. Entries are floored at
    /// [`LOG_FLOOR`] so that limits like `[1, 0]` are representable.
    pub fn from_probabilities(m: Matrix<T>) -> Result<Self> {
        for (i, r) in m.row_iter().enumerate() {
            let s: f64 = r.iter().map(|x| x.as_f64()).sum();
            if (s - 1.0).abs() > 1e-6 || r.iter().any(|x| *x < T::zero()) {
                return Err(Error::InvalidParameter(format!(
                    "row {i} is not a distribution (sum {s})"
                )));
            }
        }
        let floor = T::lit(LOG_FLOOR);
        Ok(Self(m.map(|x| x.max(floor))))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

pub fn normalize_rows<T: Real>(m: &Matrix<T>) -> Result<EmbeddingMatrix<T>> {
    check_nonempty(m)?;
    let mut out = m.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n.as_f64() <= ZERO_ROW_NORM {
            return Err(Error::ZeroRow(i));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x = *x / n);
    }
    Ok(EmbeddingMatrix(out))
}

/// Backward pass of [`normalize_rows`]: given `x`, `y = x/|x|` and `dL/dy`,
/// returns `dL/dx = (dy - y (y·dy)) / |x|`.
pub fn normalize_rows_backward<T: Real>(
    input: &Matrix<T>,
    output: &Matrix<T>,
    grad_out: &Matrix<T>,
) -> Matrix<T> {
    let mut g = Matrix::zeros(input.rows(), input.cols());
    for i in 0..input.rows() {
        let n = norm(input.row(i));
        let y = output.row(i);
        let dy = grad_out.row(i);
        let proj = dot(y, dy);
        for ((gj, &yj), &dyj) in g.row_mut(i).iter_mut().zip(y).zip(dy) {
            *gj = (dyj - yj * proj) / n;
        }
    }
    g
}

pub fn cosine_similarity_matrix<T: Real>(
    a: &EmbeddingMatrix<T>,
    b: &EmbeddingMatrix<T>,
) -> Result<SimilarityMatrix<T>> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let s = a.matrix().matmul_t(b.matrix())?;
    Ok(SimilarityMatrix::new(s, SimKind::Image))
}

/// Softmax of `(row + shift) / temperature` for every row, stabilized by the
/// row maximum.
pub fn row_softmax<T: Real>(
    s: &SimilarityMatrix<T>,
    shift: T,
    temperature: T,
) -> Result<RowDistribution<T>> {
    softmax_rows(&s.data, shift, temperature).map(RowDistribution)
}

pub(crate) fn softmax_rows<T: Real>(m: &Matrix<T>, shift: T, temperature: T) -> Result<Matrix<T>> {
    check_temperature(temperature)?;
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        softmax_into(m.row(i), shift, temperature, out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn check_temperature<T: Real>(temperature: T) -> Result<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::NonPositiveTemperature(temperature.as_f64()));
    }
    Ok(())
}

pub(crate) fn softmax_into<T: Real>(x: &[T], shift: T, temperature: T, out: &mut [T]) {
    let z = |v: T| (v + shift) / temperature;
    let max = x.iter().map(|&v| z(v)).fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (z(v) - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

/// `(1/n) Σ_i KL(P_i ‖ Q_i)`.
pub fn rowwise_kl<T: Real>(p: &RowDistribution<T>, q: &RowDistribution<T>) -> Result<T> {
    p.0.ensure_shape(&q.0)?;
    let n = T::lit(p.0.rows() as f64);
    let total: T = (0..p.0.rows())
        .map(|i| kl_row(p.0.row(i), q.0.row(i)))
        .sum();
    Ok(total / n)
}

pub(crate) fn kl_row<T: Real>(p: &[T], q: &[T]) -> T {
    let floor = T::lit(LOG_FLOOR);
    p.iter()
        .zip(q)
        .map(|(&pj, &qj)| {
            let pj = pj.max(floor);
            pj * (pj.ln() - qj.max(floor).ln())
        })
        .sum()
}

/// Gradient of `(1/n) Σ_i KL(softmax(S_i / T) ‖ Q_i)` with respect to `S`,
/// where `p` is the already computed softmax of `S`.
pub fn rowwise_kl_softmax_backward<T: Real>(
    p: &Matrix<T>,
    q: &Matrix<T>,
    temperature: T,
) -> Matrix<T> {
    let floor = T::lit(LOG_FLOOR);
    let scale = T::one() / (T::lit(p.rows() as f64) * temperature);
    let mut g = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let kl = kl_row(p.row(i), q.row(i));
        for ((gj, &pj), &qj) in g.row_mut(i).iter_mut().zip(p.row(i)).zip(q.row(i)) {
            let pf = pj.max(floor);
            *gj = scale * pj * (pf.ln() - qj.max(floor).ln() - kl);
        }
    }
    g
}

/// Mean over rows of the squared Euclidean distance between matching rows.
pub fn rowwise_l2<T: Real>(a: &SimilarityMatrix<T>, b: &SimilarityMatrix<T>) -> Result<T> {
    a.ensure_same_shape(b)?;
    let n = T::lit(a.data.rows() as f64);
    let total: T = a
        .data
        .as_slice()
        .iter()
        .zip(b.data.as_slice())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(total / n)
}
