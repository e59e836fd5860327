//! Retrieval metrics (Recall@k, NMI, mAP@1000) and the semantic alignment
//! analyses: retrieval profiles ordered by language similarity and the
//! embedding-to-language divergence.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{batch_similarity, elg_match_loss, masked_image_similarity, LanguageTable};
use crate::linalg::{Matrix, Real};
use crate::rng::SeedStreams;
use crate::simcore::{cosine_similarity_matrix, EmbeddingMatrix, SimKind};

pub const MAP_CUTOFF: usize = 1000;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_classes: usize,
    pub recall: Vec<RecallEntry>,
    pub nmi: f64,
    pub map_at_1000: f64,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// Gallery order for every query: all other samples by descending cosine
/// similarity, ties by ascending index.
pub fn ranked_neighbors<T: Real>(emb: &EmbeddingMatrix<T>) -> Result<Vec<Vec<usize>>> {
    let s = cosine_similarity_matrix(emb, emb)?.data;
    let n = emb.len();
    Ok((0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| s[(i, b)].partial_cmp(&s[(i, a)]).unwrap().then(a.cmp(&b)));
            order
        })
        .collect())
}

fn check_labels<T: Real>(emb: &EmbeddingMatrix<T>, labels: &[usize]) -> Result<()> {
    if labels.len() != emb.len() {
        return Err(Error::CountMismatch {
            what: "labels".into(),
            expected: emb.len(),
            found: labels.len(),
        });
    }
    if emb.len() < 2 {
        return Err(Error::DegenerateInput("need at least two samples".into()));
    }
    Ok(())
}

pub fn recall_at_k<T: Real>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_labels(emb, labels)?;
    let gallery = emb.len() - 1;
    if let Some(&k) = ks.iter().find(|&&k| k > gallery || k == 0) {
        return Err(Error::KExceedsGallery { k, gallery });
    }
    let ranked = ranked_neighbors(emb)?;
    Ok(recall_from_ranking(&ranked, labels, ks))
}

fn recall_from_ranking(ranked: &[Vec<usize>], labels: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = ranked.len() as f64;
    ks.iter()
        .map(|&k| {
            let hits = ranked
                .iter()
                .enumerate()
                .filter(|(i, order)| order[..k].iter().any(|&j| labels[j] == labels[*i]))
                .count();
            (k, hits as f64 / n)
        })
        .collect()
}

/// Mean average precision over the top `min(1000, gallery)` results,
/// normalized by `min(1000, #relevant)`. Queries with no relevant gallery
/// item contribute zero.
pub fn map_at_1000<T: Real>(emb: &EmbeddingMatrix<T>, labels: &[usize]) -> Result<f64> {
    check_labels(emb, labels)?;
    let ranked = ranked_neighbors(emb)?;
    Ok(map_from_ranking(&ranked, labels))
}

fn map_from_ranking(ranked: &[Vec<usize>], labels: &[usize]) -> f64 {
    let total: f64 = ranked
        .iter()
        .enumerate()
        .map(|(i, order)| {
            let relevant = order.iter().filter(|&&j| labels[j] == labels[i]).count();
            if relevant == 0 {
                return 0.0;
            }
            let cutoff = MAP_CUTOFF.min(order.len());
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (r, &j) in order[..cutoff].iter().enumerate() {
                if labels[j] == labels[i] {
                    hits += 1;
                    ap += hits as f64 / (r + 1) as f64;
                }
            }
            ap / relevant.min(MAP_CUTOFF) as f64
        })
        .sum();
    total / ranked.len() as f64
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Returns 1 when both partitions are trivial.
pub fn normalized_mutual_information(clusters: &[usize], labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&c, &y) in clusters.iter().zip(labels) {
        *joint.entry((c, y)).or_default() += 1.0;
        *pa.entry(c).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    let entropy = |m: &BTreeMap<usize, f64>| -> f64 {
        m.values().map(|&c| -(c / n) * (c / n).ln()).sum()
    };
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(c, y), &nij)| (nij / n) * ((n * nij) / (pa[&c] * pb[&y])).ln())
        .sum();
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; returns (assignments, inertia).
pub fn kmeans<R: Rng>(points: &Matrix<f64>, k: usize, rng: &mut R) -> (Vec<usize>, f64) {
    let n = points.rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        };
        centers.push(points.row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.last().unwrap()));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&x, &y| {
                    sq_dist(points.row(i), &centers[x])
                        .total_cmp(&sq_dist(points.row(i), &centers[y]))
                })
                .unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points.cols();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&x, &y| {
                        sq_dist(points.row(x), &centers[assign[x]])
                            .total_cmp(&sq_dist(points.row(y), &centers[assign[y]]))
                    })
                    .unwrap();
                centers[c] = points.row(far).to_vec();
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points.row(i), &centers[assign[i]])).sum();
    (assign, inertia)
}

/// k-means (k = number of distinct labels, best of 10 seeded restarts)
/// followed by NMI against the labels.
pub fn nmi<T: Real>(emb: &EmbeddingMatrix<T>, labels: &[usize], seed: u64) -> Result<f64> {
    check_labels(emb, labels)?;
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let k = distinct.len();
    let points: Matrix<f64> = emb.matrix().cast();
    let first = points.row(0);
    if points.row_iter().all(|r| r == first) {
        return Err(Error::DegenerateInput("all points are identical".into()));
    }
    if emb.len() < k {
        return Err(Error::DegenerateInput("fewer samples than classes".into()));
    }
    let mut rng = SeedStreams::new(seed).stream("kmeans");
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans(&points, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.1 < b.1) {
            best = Some(run);
        }
    }
    Ok(normalized_mutual_information(&best.unwrap().0, labels))
}

/// Recall@k for every `k` in `ks`, NMI and mAP@1000.
pub fn evaluate<T: Real>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    check_labels(emb, labels)?;
    let gallery = emb.len() - 1;
    if let Some(&k) = ks.iter().find(|&&k| k > gallery || k == 0) {
        return Err(Error::KExceedsGallery { k, gallery });
    }
    let ranked = ranked_neighbors(emb)?;
    let recall = recall_from_ranking(&ranked, labels, ks)
        .into_iter()
        .map(|(k, value)| RecallEntry { k, value })
        .collect();
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    Ok(EvalReport {
        n_samples: emb.len(),
        n_classes: classes.len(),
        recall,
        nmi: nmi(emb, labels, seed)?,
        map_at_1000: map_from_ranking(&ranked, labels),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileEntry {
    pub class: String,
    pub count: usize,
    pub language_similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub query_class: String,
    pub n_queries: usize,
    /// Neighbors retrieved over all queries of the class, across all classes.
    pub total_retrieved: usize,
    /// Retrieved classes by descending language similarity to the query class.
    pub entries: Vec<ProfileEntry>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RetrievalProfile {
    pub classes: Vec<ClassProfile>,
}

impl RetrievalProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_class,rank,retrieved_class,count,language_similarity\n");
        for c in &self.classes {
            for (r, e) in c.entries.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.6}",
                    csv_field(&c.query_class),
                    r + 1,
                    csv_field(&e.class),
                    e.count,
                    e.language_similarity
                );
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn class_language<'a, T: Real>(
    class_names: &'a [String],
    lang: &LanguageTable<T>,
    labels: &[usize],
) -> Result<Vec<&'a String>> {
    let mut used: Vec<usize> = labels.to_vec();
    used.sort_unstable();
    used.dedup();
    for &c in &used {
        let name = class_names
            .get(c)
            .ok_or_else(|| Error::MissingClassName(format!("#{c}")))?;
        if lang.position(name).is_none() {
            return Err(Error::MissingClassName(name.clone()));
        }
    }
    Ok(class_names.iter().collect())
}

/// For every query class, counts the classes among each query's `top_n`
/// nearest neighbors and keeps the `top_classes` retrieved classes that are
/// semantically closest to the query class.
pub fn semantic_retrieval_profile<T: Real>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    class_names: &[String],
    lang: &LanguageTable<T>,
    top_n: usize,
    top_classes: usize,
) -> Result<RetrievalProfile> {
    check_labels(emb, labels)?;
    class_language(class_names, lang, labels)?;
    let ranked = ranked_neighbors(emb)?;
    let mut by_class: BTreeMap<usize, (usize, BTreeMap<usize, usize>)> = BTreeMap::new();
    for (i, order) in ranked.iter().enumerate() {
        let slot = by_class.entry(labels[i]).or_default();
        slot.0 += 1;
        for &j in order.iter().take(top_n) {
            *slot.1.entry(labels[j]).or_default() += 1;
        }
    }
    let sim = |a: usize, b: usize| -> f64 {
        let ea = lang.lookup(&class_names[a]).unwrap();
        let eb = lang.lookup(&class_names[b]).unwrap();
        crate::linalg::dot(ea, eb).as_f64()
    };
    let classes = by_class
        .into_iter()
        .map(|(q, (n_queries, counts))| {
            let total_retrieved = counts.values().sum();
            let mut entries: Vec<ProfileEntry> = counts
                .into_iter()
                .map(|(c, count)| ProfileEntry {
                    class: class_names[c].clone(),
                    count,
                    language_similarity: if c == q { 1.0 } else { sim(q, c) },
                })
                .collect();
            entries.sort_by(|a, b| {
                b.language_similarity
                    .total_cmp(&a.language_similarity)
                    .then_with(|| a.class.cmp(&b.class))
            });
            entries.truncate(top_classes);
            ClassProfile {
                query_class: class_names[q].clone(),
                n_queries,
                total_retrieved,
                entries,
            }
        })
        .collect();
    Ok(RetrievalProfile { classes })
}

/// Row-wise KL between the masked similarity structure of the full
/// evaluation set and the class-name language similarities.
pub fn alignment_divergence<T: Real>(
    emb: &EmbeddingMatrix<T>,
    labels: &[usize],
    class_names: &[String],
    lang: &LanguageTable<T>,
    gamma_lang: f64,
    temperature: f64,
) -> Result<f64> {
    check_labels(emb, labels)?;
    class_language(class_names, lang, labels)?;
    let class_sim = lang.class_similarity(class_names)?;
    let s_lang = batch_similarity(&class_sim, labels, SimKind::Language);
    let s_img = cosine_similarity_matrix(emb, emb)?;
    let masked = masked_image_similarity(&s_img, labels, T::lit(gamma_lang))?;
    let l = elg_match_loss(&masked, &s_lang, T::lit(gamma_lang), T::lit(temperature))?;
    Ok(l.value.as_f64())
}
