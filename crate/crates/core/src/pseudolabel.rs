//! Top-k pseudo-classnames from frozen classifier posteriors, and the
//! per-rank language similarity targets built from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::LanguageTable;
use crate::linalg::{Matrix, Real};
use crate::simcore::{SimKind, SimilarityMatrix};

const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Softmax outputs of a pretrained classifier, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix<T> {
    data: Matrix<T>,
    class_names: Vec<String>,
}

impl<T: Real> PosteriorMatrix<T> {
    /// Rows off by more than `1e-4` from summing to one are renormalized
    /// with a warning.
    pub fn new(mut data: Matrix<T>, class_names: Vec<String>) -> Result<Self> {
        if data.cols() != class_names.len() {
            return Err(Error::CountMismatch {
                what: "pretrain class names".into(),
                expected: data.cols(),
                found: class_names.len(),
            });
        }
        for i in 0..data.rows() {
            let row = data.row_mut(i);
            if let Some(j) = row.iter().position(|x| !x.is_finite() || *x < T::zero()) {
                return Err(Error::InvalidParameter(format!(
                    "posterior entry ({i}, {j}) is negative or non-finite"
                )));
            }
            let s: T = row.iter().copied().sum();
            if (s.as_f64() - 1.0).abs() > ROW_SUM_TOLERANCE {
                if s <= T::zero() {
                    return Err(Error::InvalidParameter(format!("posterior row {i} sums to 0")));
                }
                log::warn!("posterior row {i} sums to {s}; renormalizing");
                row.iter_mut().for_each(|x| *x = *x / s);
            }
        }
        Ok(Self { data, class_names })
    }

    pub fn data(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_samples(&self) -> usize {
        self.data.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentLevel {
    Class,
    Sample,
}

/// Ordered top-k pretrain classes per key (class id or sample index).
#[derive(Clone, Debug, PartialEq)]
pub struct PseudolabelAssignment {
    pub level: AssignmentLevel,
    pub keys: Vec<usize>,
    /// Pretrain class indices, best first.
    pub indices: Vec<Vec<usize>>,
    pub labels: Vec<Vec<String>>,
    pub masses: Vec<Vec<f64>>,
}

impl PseudolabelAssignment {
    pub fn k(&self) -> usize {
        self.indices.first().map(Vec::len).unwrap_or(0)
    }

    pub fn position(&self, key: usize) -> Option<usize> {
        match self.level {
            // keys are dense 0..n in both constructors
            AssignmentLevel::Class | AssignmentLevel::Sample => {
                (key < self.keys.len() && self.keys[key] == key).then_some(key)
            }
        }
    }

    /// One line per key and rank: `key<TAB>rank<TAB>name<TAB>mass`.
    pub fn to_report(&self) -> String {
        let mut out = String::from("key\trank\tname\tmass\n");
        for (pos, key) in self.keys.iter().enumerate() {
            for (rank, (name, mass)) in self.labels[pos].iter().zip(&self.masses[pos]).enumerate() {
                let _ = writeln!(out, "{key}\t{}\t{name}\t{mass:.8}", rank + 1);
            }
        }
        out
    }
}

/// Indices of the `k` largest entries, descending, ties by ascending index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn assemble<T: Real>(
    post: &PosteriorMatrix<T>,
    level: AssignmentLevel,
    means: Vec<Vec<f64>>,
    k: usize,
) -> PseudolabelAssignment {
    let mut out = PseudolabelAssignment {
        level,
        keys: (0..means.len()).collect(),
        indices: Vec::with_capacity(means.len()),
        labels: Vec::with_capacity(means.len()),
        masses: Vec::with_capacity(means.len()),
    };
    for m in &means {
        let top = top_k(m, k);
        out.labels
            .push(top.iter().map(|&c| post.class_names[c].clone()).collect());
        out.masses.push(top.iter().map(|&c| m[c]).collect());
        out.indices.push(top);
    }
    out
}

fn check_k<T: Real>(post: &PosteriorMatrix<T>, k: usize) -> Result<()> {
    if k == 0 || k > post.class_names.len() {
        return Err(Error::KTooLarge {
            k,
            available: post.class_names.len(),
        });
    }
    Ok(())
}

/// Averages posteriors within each class (`labels` are dense class ids) and
/// keeps the top-k pretrain classes.
pub fn class_pseudolabels<T: Real>(
    post: &PosteriorMatrix<T>,
    labels: &[usize],
    k: usize,
) -> Result<PseudolabelAssignment> {
    check_k(post, k)?;
    if labels.len() != post.n_samples() {
        return Err(Error::CountMismatch {
            what: "labels".into(),
            expected: post.n_samples(),
            found: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let width = post.class_names.len();
    let mut sums = vec![vec![0.0f64; width]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, &p) in sums[y].iter_mut().zip(post.data.row(i)) {
            *s += p.as_f64();
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c as f64);
    }
    Ok(assemble(post, AssignmentLevel::Class, sums, k))
}

/// Top-k pretrain classes for every sample individually.
pub fn sample_pseudolabels<T: Real>(
    post: &PosteriorMatrix<T>,
    k: usize,
) -> Result<PseudolabelAssignment> {
    check_k(post, k)?;
    let rows = post
        .data
        .row_iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect();
    Ok(assemble(post, AssignmentLevel::Sample, rows, k))
}

/// Language similarities between ranked pseudolabels of every pair of keys,
/// precomputed once so that batches only need indexing.
#[derive(Clone, Debug)]
pub struct PseudolangTargets<T> {
    k: usize,
    /// `pairs[a * k + b][x][y]` = cos(rank-a label of key x, rank-b label of key y).
    pairs: Vec<Matrix<T>>,
}

impl<T: Real> PseudolangTargets<T> {
    pub fn new(assign: &PseudolabelAssignment, table: &LanguageTable<T>, dense: bool) -> Result<Self> {
        let k = assign.k();
        let mut per_rank = Vec::with_capacity(k);
        for rank in 0..k {
            let names: Vec<&str> = assign.labels.iter().map(|l| l[rank].as_str()).collect();
            per_rank.push(table.gather(&names).map_err(Error::MissingPseudoName)?);
        }
        let mut pairs = Vec::new();
        for a in 0..k {
            for b in 0..k {
                if !dense && a != b {
                    pairs.push(Matrix::zeros(0, 0));
                    continue;
                }
                pairs.push(per_rank[a].matrix().matmul_t(per_rank[b].matrix())?);
            }
        }
        Ok(Self { k, pairs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn gather(&self, m: &Matrix<T>, keys: &[usize]) -> SimilarityMatrix<T> {
        let n = keys.len();
        SimilarityMatrix::new(
            Matrix::from_fn(n, n, |x, y| m[(keys[x], keys[y])]),
            SimKind::Pseudolang,
        )
    }

    /// One matrix per rank for the batch.
    pub fn per_rank(&self, keys: &[usize]) -> Vec<SimilarityMatrix<T>> {
        (0..self.k)
            .map(|r| self.gather(&self.pairs[r * self.k + r], keys))
            .collect()
    }

    /// All `k²` rank pairings for the batch; requires `dense` at construction.
    pub fn all_pairings(&self, keys: &[usize]) -> Vec<SimilarityMatrix<T>> {
        self.pairs.iter().map(|m| self.gather(m, keys)).collect()
    }
}

fn resolve_keys(assign: &PseudolabelAssignment, batch_keys: &[usize]) -> Result<Vec<usize>> {
    batch_keys
        .iter()
        .map(|&k| {
            assign
                .position(k)
                .ok_or_else(|| Error::MissingAssignment(k.to_string()))
        })
        .collect()
}

/// For each rank `j`, the cosine similarities between the rank-`j`
/// pseudolabel embeddings of every pair of batch elements.
pub fn build_pseudolang_matrices<T: Real>(
    assign: &PseudolabelAssignment,
    pseudo_table: &LanguageTable<T>,
    batch_keys: &[usize],
) -> Result<Vec<SimilarityMatrix<T>>> {
    let keys = resolve_keys(assign, batch_keys)?;
    let sub = PseudolabelAssignment {
        level: assign.level,
        keys: (0..keys.len()).collect(),
        indices: keys.iter().map(|&p| assign.indices[p].clone()).collect(),
        labels: keys.iter().map(|&p| assign.labels[p].clone()).collect(),
        masses: keys.iter().map(|&p| assign.masses[p].clone()).collect(),
    };
    let targets = PseudolangTargets::new(&sub, pseudo_table, false)?;
    Ok(targets.per_rank(&sub.keys))
}

/// All rank pairings (`k²` matrices, row-major in the rank pair).
pub fn build_dense_pseudolang_matrices<T: Real>(
    assign: &PseudolabelAssignment,
    pseudo_table: &LanguageTable<T>,
    batch_keys: &[usize],
) -> Result<Vec<SimilarityMatrix<T>>> {
    let keys = resolve_keys(assign, batch_keys)?;
    let targets = PseudolangTargets::new(assign, pseudo_table, true)?;
    Ok(targets.all_pairings(&keys))
}
