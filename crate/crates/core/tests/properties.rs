use langguide::eval::{map_at_1000, normalized_mutual_information, recall_at_k};
use langguide::guidance::{batch_similarity, elg_match_loss, masked_image_similarity, pseudomatch_loss, GuidanceSpec, MergeMode};
use langguide::losses::{contrastive_loss, multisimilarity_loss, ContrastiveParams, MultisimParams};
use langguide::simcore::{
    cosine_similarity_matrix, normalize_rows, row_softmax, rowwise_kl, EmbeddingMatrix, SimKind,
    SimilarityMatrix,
};
use langguide::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// Unit rows with at least two members per class.
fn batch() -> impl Strategy<Value = (EmbeddingMatrix<f64>, Vec<usize>)> {
    (2usize..5, 2usize..5, 2usize..6).prop_flat_map(|(classes, per, dim)| {
        let n = classes * per;
        (matrix(n, dim), Just((0..n).map(|i| i % classes).collect::<Vec<_>>()))
            .prop_filter_map("zero row", |(m, labels)| normalize_rows(&m).ok().map(|e| (e, labels)))
    })
}

fn permute(m: &Matrix<f64>, p: &[usize]) -> Matrix<f64> {
    Matrix::from_fn(p.len(), p.len(), |i, j| m[(p[i], p[j])])
}

/// Random orthogonal matrix from Gram-Schmidt on a random square.
fn orthogonal(m: &Matrix<f64>) -> Option<Matrix<f64>> {
    let d = m.rows();
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = m.row(i).to_vec();
        for u in &q {
            let c: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-3 {
            return None;
        }
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    Some(Matrix::from_rows(&q))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rows_have_unit_norm(m in matrix(5, 8)) {
        let e = normalize_rows(&m).unwrap();
        for r in e.matrix().row_iter() {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_similarity_is_symmetric_with_unit_diagonal((e, _) in batch()) {
        let s = cosine_similarity_matrix(&e, &e).unwrap().data;
        for i in 0..s.rows() {
            prop_assert!((s[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..s.cols() {
                prop_assert!((s[(i, j)] - s[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_ignore_a_constant_shift(m in matrix(4, 6), c in -5.0f64..5.0, t in 0.05f64..3.0) {
        let s = SimilarityMatrix::new(m.clone(), SimKind::Image);
        let shifted = SimilarityMatrix::new(m.map(|x| x + c), SimKind::Image);
        let a = row_softmax(&s, 0.0, t).unwrap();
        let b = row_softmax(&shifted, 0.0, t).unwrap();
        prop_assert!(a.matrix().max_abs_diff(b.matrix()) < 1e-12);
        for r in a.matrix().row_iter() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(a in matrix(3, 5), b in matrix(3, 5), t in 0.1f64..2.0) {
        let p = row_softmax(&SimilarityMatrix::new(a, SimKind::Image), 0.0, t).unwrap();
        let q = row_softmax(&SimilarityMatrix::new(b, SimKind::Language), 0.0, t).unwrap();
        prop_assert!(rowwise_kl(&p, &q).unwrap() >= -1e-15);
        prop_assert!(rowwise_kl(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn elg_loss_ignores_uniform_language_shift(
        (e, labels) in batch(),
        lang in matrix(4, 3),
        c in -4.0f64..4.0,
        gamma in 0.0f64..1.0,
        t in 0.1f64..2.0,
    ) {
        let class = normalize_rows(&lang).unwrap();
        let class = class.matrix().matmul_t(class.matrix()).unwrap();
        let s_lang = batch_similarity(&class, &labels, SimKind::Language);
        let shifted = SimilarityMatrix::new(s_lang.data.map(|x| x + c), SimKind::Language);
        let s_img = masked_image_similarity(&cosine_similarity_matrix(&e, &e).unwrap(), &labels, gamma).unwrap();
        let a = elg_match_loss(&s_img, &s_lang, gamma, t).unwrap();
        let b = elg_match_loss(&s_img, &shifted, gamma, t).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-9);
    }

    #[test]
    fn losses_are_permutation_invariant((e, labels) in batch(), seed in any::<u64>(), lang in matrix(4, 3)) {
        let n = labels.len();
        let mut p: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            p.swap(i, (state >> 33) as usize % (i + 1));
        }
        let e2 = EmbeddingMatrix::from_unit_rows(e.matrix().select_rows(&p)).unwrap();
        let l2: Vec<usize> = p.iter().map(|&i| labels[i]).collect();
        let s = cosine_similarity_matrix(&e, &e).unwrap();
        let s2 = cosine_similarity_matrix(&e2, &e2).unwrap();

        let ms = MultisimParams::default();
        let a = multisimilarity_loss(&s, &labels, &ms, None).unwrap().value;
        let b = multisimilarity_loss(&s2, &l2, &ms, None).unwrap().value;
        prop_assert!((a - b).abs() < 1e-6);

        let cp = ContrastiveParams::default();
        let a = contrastive_loss(&e, &labels, &cp).unwrap().value;
        let b = contrastive_loss(&e2, &l2, &cp).unwrap().value;
        prop_assert!((a - b).abs() < 1e-6);

        let class = normalize_rows(&lang).unwrap();
        let class = class.matrix().matmul_t(class.matrix()).unwrap();
        let sl = batch_similarity(&class, &labels, SimKind::Language);
        let sl2 = SimilarityMatrix::new(permute(&sl.data, &p), SimKind::Language);
        let m = masked_image_similarity(&s, &labels, 0.5).unwrap();
        let m2 = masked_image_similarity(&s2, &l2, 0.5).unwrap();
        let a = elg_match_loss(&m, &sl, 0.5, 1.0).unwrap();
        let b = elg_match_loss(&m2, &sl2, 0.5, 1.0).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-6);
        prop_assert!(permute(&a.grad, &p).max_abs_diff(&b.grad) < 1e-9);

        let spec = GuidanceSpec { k: 2, merge: MergeMode::Multi, ..GuidanceSpec::default() };
        let a = pseudomatch_loss(&m, &[sl.clone(), s.clone()], &spec).unwrap().value;
        let b = pseudomatch_loss(&m2, &[sl2, SimilarityMatrix::new(s2.data.clone(), SimKind::Image)], &spec).unwrap().value;
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn metrics_are_rotation_invariant((e, labels) in batch(), r in matrix(5, 5)) {
        prop_assume!(e.dim() <= 5);
        let q = orthogonal(&r);
        prop_assume!(q.is_some());
        let q = q.unwrap();
        let d = e.dim();
        let q = Matrix::from_fn(d, d, |i, j| q[(i, j)]);
        prop_assume!(orthogonal(&q).is_some());
        let q = orthogonal(&q).unwrap();
        let rotated = EmbeddingMatrix::from_unit_rows(e.matrix().matmul(&q).unwrap()).unwrap();
        let s = cosine_similarity_matrix(&e, &e).unwrap().data;
        // exact ties could legitimately reorder after rounding
        let gap = (0..s.rows())
            .flat_map(|i| {
                let mut row: Vec<f64> = s.row(i).to_vec();
                row.sort_by(f64::total_cmp);
                row.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, f64::min);
        prop_assume!(gap > 1e-9);
        let ks = [1, 2];
        let a = recall_at_k(&e, &labels, &ks).unwrap();
        let b = recall_at_k(&rotated, &labels, &ks).unwrap();
        for k in ks {
            prop_assert!((a[&k] - b[&k]).abs() < 1e-9);
        }
        prop_assert!((map_at_1000(&e, &labels).unwrap() - map_at_1000(&rotated, &labels).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn recall_is_monotone_in_k((e, labels) in batch()) {
        let ks: Vec<usize> = (1..labels.len()).collect();
        let r = recall_at_k(&e, &labels, &ks).unwrap();
        for w in ks.windows(2) {
            prop_assert!(r[&w[0]] <= r[&w[1]]);
        }
        prop_assert!((r[ks.last().unwrap()] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded(a in prop::collection::vec(0usize..4, 12), b in prop::collection::vec(0usize..4, 12)) {
        let x = normalized_mutual_information(&a, &b);
        let y = normalized_mutual_information(&b, &a);
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&x));
        let self_nmi = normalized_mutual_information(&a, &a);
        prop_assert!((self_nmi - 1.0).abs() < 1e-12);
    }
}
