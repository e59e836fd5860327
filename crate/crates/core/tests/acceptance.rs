//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every fixture is produced by the synthetic
//! generator or drawn from a seeded RNG.

use std::process::ExitCode;
use std::time::Instant;

use langguide::datastore::checkpoint::encode_checkpoint;
use langguide::dd::DoubleDouble;
use langguide::datastore::synth::{synth_dataset, SynthOutput, SynthSpec};
use langguide::eval::{alignment_divergence, map_at_1000, normalized_mutual_information, recall_at_k};
use langguide::guidance::{
    average_language_targets, batch_similarity, clip_style_loss, elg_match_loss,
    external_target_guidance, full_matrix_kl, masked_image_similarity, predict_head_loss,
    pseudomatch_loss, rowwise_l2_guidance, same_class_mask, ExternalTargets, GuidanceMode,
    GuidanceSpec, MergeMode,
};
use langguide::losses::{language_adjusted_mining_mask, LossGrad, MultisimParams};
use langguide::pseudolabel::{class_pseudolabels, sample_pseudolabels, PosteriorMatrix};
use langguide::simcore::{
    cosine_similarity_matrix, normalize_rows, row_softmax, rowwise_kl, rowwise_l2,
    EmbeddingMatrix, SimKind, SimilarityMatrix,
};
use langguide::tape::Tape;
use langguide::trainer::gradcheck::{gradcheck, LOSS_NAMES};
use langguide::trainer::{train, TrainConfig};
use langguide::Matrix;
use num_traits::{Float, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL {name}: {detail}");
        }
    };
    report("gradient correctness", gradient_correctness());
    report("stop-gradient contract", stop_gradient());
    report("shift invariance", shift_invariance());
    report("oracle equivalence", oracle_equivalence());
    let runs = desk_runs();
    report("directional ELG effect", directional_elg(&runs));
    report("PLG parity", plg_parity(&runs));
    report("pseudolabel-count trend", pseudolabel_trend(&runs));
    report("determinism", determinism());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix<f64> {
    normalize_rows(&random_matrix(rng, n, d)).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    // every class appears at least twice
    let mut labels: Vec<usize> = (0..n).map(|i| if i < 2 * classes { i / 2 } else { rng.gen_range(0..classes) }).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    labels
}

fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

// ---------------------------------------------------------------------------
// gradients

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let report = gradcheck(None, 20, 1e-6, 0).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let covered = LOSS_NAMES
        .iter()
        .all(|n| report.losses.iter().any(|l| l.name == *n && l.instances >= 20));
    let detail = format!(
        "{} losses x 20 instances, max rel error {:.2e} (tol 1e-5), {:.1}s (limit 60s)",
        report.losses.len(),
        report.max_rel_error(),
        secs
    );
    check(covered && report.passes(1e-5) && secs < 60.0, detail)
}

/// A batch whose image side flows through trainable parameters and whose
/// language side is itself a trainable tape variable.
struct StopGradFixture {
    features: Matrix<f64>,
    weights: Matrix<f64>,
    lang: Matrix<f64>,
    labels: Vec<usize>,
}

fn sym_grad(g: &Matrix<f64>, e: &Matrix<f64>) -> Matrix<f64> {
    let mut s = g.clone();
    s.add_assign_scaled(&g.transpose(), 1.0).unwrap();
    s.matmul(e).unwrap()
}

/// Runs `loss(E, L)` (gradient w.r.t. `E`) on the tape and returns the
/// largest gradient magnitude reaching the language variable, the image
/// parameters, and the loss change under a language perturbation.
fn tape_language_grad(
    fx: &StopGradFixture,
    loss: &dyn Fn(&Matrix<f64>, &Matrix<f64>) -> LossGrad<f64>,
) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let x = tape.constant(fx.features.clone());
    let w = tape.param(fx.weights.clone());
    let l_raw = tape.param(fx.lang.clone());
    let z = tape.matmul(x, w);
    let e = tape.normalize_rows(z);
    let l = tape.normalize_rows(l_raw);
    let e_val = tape.value(e).clone();
    let l_val = tape.value(l).clone();
    let out = loss(&e_val, &l_val);
    let root = tape.loss(out.value, vec![(e, out.grad)]);
    let grads = tape.backward(root);
    let lang_max = grads.get(l_raw).as_slice().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let img_max = grads.get(w).as_slice().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut bumped = fx.lang.clone();
    bumped.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 7) as f64 - 3.0));
    let bumped = normalize_rows(&bumped).unwrap().into_inner();
    let sensitivity = (loss(&e_val, &bumped).value - out.value).abs();
    (lang_max, img_max, sensitivity)
}

fn stop_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, classes, k, d, dl) = (12, 4, 3, 6, 5);
    let labels = random_labels(&mut rng, n, classes);
    let gamma = 0.3;
    let temp = 0.7;
    // language rows: k ranks of per-class vectors, class rows first
    let fx = StopGradFixture {
        features: random_matrix(&mut rng, n, 8),
        weights: random_matrix(&mut rng, 8, d),
        lang: random_matrix(&mut rng, k * classes, dl),
        labels,
    };
    let labels = &fx.labels;
    let class_sim = |l: &Matrix<f64>, rank: usize| -> SimilarityMatrix<f64> {
        let rows = l.select_rows(&(rank * classes..(rank + 1) * classes).collect::<Vec<_>>());
        batch_similarity(&rows.matmul_t(&rows).unwrap(), &labels, SimKind::Language)
    };
    let img = |e: &Matrix<f64>| SimilarityMatrix::new(e.matmul_t(e).unwrap(), SimKind::Image);
    let masked = |e: &Matrix<f64>| masked_image_similarity(&img(e), &labels, gamma).unwrap();
    let via_s = |e: &Matrix<f64>, lg: LossGrad<f64>| LossGrad {
        value: lg.value,
        grad: sym_grad(&lg.grad, e),
    };
    let per_sample = |l: &Matrix<f64>| {
        let idx: Vec<usize> = labels.to_vec();
        normalize_rows(&l.select_rows(&idx)).unwrap()
    };
    let pseudo = |merge: MergeMode| {
        move |e: &Matrix<f64>, l: &Matrix<f64>| {
            let spec = GuidanceSpec { k, merge, gamma_lang: gamma, temperature: temp, ..GuidanceSpec::default() };
            let targets: Vec<SimilarityMatrix<f64>> = match merge {
                MergeMode::Dense => (0..k * k)
                    .map(|p| {
                        let a = l.select_rows(&labels.iter().map(|&y| (p / k) * classes + y).collect::<Vec<_>>());
                        let b = l.select_rows(&labels.iter().map(|&y| (p % k) * classes + y).collect::<Vec<_>>());
                        SimilarityMatrix::new(a.matmul_t(&b).unwrap(), SimKind::Pseudolang)
                    })
                    .collect(),
                _ => (0..k).map(|r| class_sim(l, r)).collect(),
            };
            via_s(e, pseudomatch_loss(&masked(e), &targets, &spec).unwrap())
        }
    };
    let cases: Vec<(&str, Box<dyn Fn(&Matrix<f64>, &Matrix<f64>) -> LossGrad<f64>>)> = vec![
        ("elg_match", Box::new(|e, l| via_s(e, elg_match_loss(&masked(e), &class_sim(l, 0), gamma, temp).unwrap()))),
        ("pseudomatch_average", Box::new(pseudo(MergeMode::Average))),
        ("pseudomatch_multi", Box::new(pseudo(MergeMode::Multi))),
        ("pseudomatch_dense", Box::new(pseudo(MergeMode::Dense))),
        ("full_matrix_kl", Box::new(|e, l| via_s(e, full_matrix_kl(&masked(e), &class_sim(l, 0), gamma, temp).unwrap()))),
        ("rowwise_l2", Box::new(|e, l| via_s(e, rowwise_l2_guidance(&masked(e), &class_sim(l, 0), gamma).unwrap()))),
        ("external", Box::new(|e, l| via_s(e, external_target_guidance(&masked(e), &class_sim(l, 1), gamma, temp).unwrap()))),
        ("clip_style", Box::new(|e, l| {
            // project the language rows to the embedding width
            let lang = per_sample(&l.matmul(&Matrix::from_fn(dl, d, |i, j| if i == j { 1.0 } else { 0.1 })).unwrap());
            clip_style_loss(&EmbeddingMatrix::from_unit_rows(e.clone()).unwrap(), &lang, 0.1).unwrap()
        })),
        ("predict_head", Box::new(|e, l| {
            let lang = per_sample(&l.matmul(&Matrix::from_fn(dl, d, |i, j| if i == j { 1.0 } else { -0.2 })).unwrap());
            predict_head_loss(&EmbeddingMatrix::from_unit_rows(e.clone()).unwrap(), &lang).unwrap()
        })),
    ];
    let mut bad = Vec::new();
    for (name, f) in &cases {
        let (lang_max, img_max, sens) = tape_language_grad(&fx, f.as_ref());
        if lang_max != 0.0 || img_max == 0.0 || sens == 0.0 {
            bad.push(format!("{name} (lang grad {lang_max:e}, image grad {img_max:e}, sensitivity {sens:e})"));
        }
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} guidance losses: language-side gradient exactly 0, image-side gradient nonzero", cases.len())
        } else {
            bad.join("; ")
        },
    )
}

fn shift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut masked_nonzero = 0usize;
    for trial in 0..20 {
        let n = 6 + trial % 10;
        let labels = random_labels(&mut rng, n, 3);
        let e = random_unit(&mut rng, n, 5);
        let s_img = cosine_similarity_matrix(&e, &e).unwrap();
        let l = random_unit(&mut rng, 3, 4);
        let class = l.matrix().matmul_t(l.matrix()).unwrap();
        let s_lang = batch_similarity(&class, &labels, SimKind::Language);
        let temp = rng.gen_range(0.2..2.0);
        for gamma in [0.0, 0.2, 1.0] {
            let masked = masked_image_similarity(&s_img, &labels, gamma).unwrap();
            let base = elg_match_loss(&masked, &s_lang, gamma, temp).unwrap();
            for c in [-3.0, -0.5, 0.25, 1.0, 7.5] {
                let shifted = SimilarityMatrix::new(s_lang.data.map(|x| x + c), SimKind::Language);
                let l2 = elg_match_loss(&masked, &shifted, gamma, temp).unwrap();
                worst = worst.max((l2.value - base.value).abs());
            }
            let mask = same_class_mask(&labels);
            masked_nonzero += base.grad.as_slice().iter().zip(&mask).filter(|(g, &m)| m && **g != 0.0).count();
        }
    }
    check(
        worst < 1e-9 && masked_nonzero == 0,
        format!("max |delta loss| {worst:.2e} (tol 1e-9), nonzero masked-entry gradients {masked_nonzero}"),
    )
}

// ---------------------------------------------------------------------------
// brute-force oracles

fn dots(e: &[Vec<f64>]) -> Vec<Vec<f64>> {
    e.iter().map(|a| e.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect()).collect()
}

fn oracle_recall(e: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let s = dots(e);
    let n = e.len();
    let mut hits = 0;
    for i in 0..n {
        // a same-class item is within the top k iff fewer than k items beat it
        let found = (0..n).filter(|&j| j != i && labels[j] == labels[i]).any(|j| {
            let better = (0..n).filter(|&m| m != i && m != j && (s[i][m] > s[i][j] || (s[i][m] == s[i][j] && m < j))).count();
            better < k
        });
        hits += usize::from(found);
    }
    hits as f64 / n as f64
}

fn oracle_map(e: &[Vec<f64>], labels: &[usize]) -> f64 {
    let s = dots(e);
    let n = e.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| s[i][b].total_cmp(&s[i][a]));
        let relevant = order.iter().filter(|&&j| labels[j] == labels[i]).count();
        let mut precisions = Vec::new();
        for r in 0..order.len() {
            if labels[order[r]] == labels[i] {
                let hits = order[..=r].iter().filter(|&&j| labels[j] == labels[i]).count();
                precisions.push(hits as f64 / (r + 1) as f64);
            }
        }
        if relevant > 0 {
            total += precisions.iter().sum::<f64>() / relevant as f64;
        }
    }
    total / n as f64
}

fn oracle_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..kb).map(|j| joint.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let h = |p: &[f64]| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let p = joint[x][y] / n;
            if p > 0.0 {
                mi += p * (p / (pa[x] * pb[y])).ln();
            }
        }
    }
    mi / (0.5 * (h(&pa) + h(&pb)))
}

fn oracle_softmax(row: &[f64], shift: f64, t: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|x| ((x + shift) / t).exp()).collect();
    let s: f64 = z.iter().sum();
    z.iter().map(|x| x / s).collect()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn oracle_rowwise_kl(p_logits: &[Vec<f64>], q_logits: &[Vec<f64>], shift: f64, t: f64) -> f64 {
    let n = p_logits.len() as f64;
    p_logits
        .iter()
        .zip(q_logits)
        .map(|(p, q)| oracle_kl(&oracle_softmax(p, 0.0, t), &oracle_softmax(q, shift, t)))
        .sum::<f64>()
        / n
}

/// Same-class entries replaced by `1 + γ`.
fn oracle_mask(s: &[Vec<f64>], labels: &[usize], gamma: f64) -> Vec<Vec<f64>> {
    s.iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, &v)| if labels[i] == labels[j] { 1.0 + gamma } else { v }).collect())
        .collect()
}

/// The masked softmax/KL objective written over any float type.
fn oracle_elg_generic<F: Float>(s: &[Vec<F>], labels: &[usize], lang: &[Vec<f64>], gamma: f64, t: f64) -> F {
    let c = |x: f64| F::from(x).unwrap();
    let n = s.len();
    let softmax = |z: Vec<F>| {
        let total = z.iter().fold(F::zero(), |a, &b| a + b);
        z.into_iter().map(|v| v / total).collect::<Vec<F>>()
    };
    let mut total = F::zero();
    for i in 0..n {
        let p = softmax(
            (0..n)
                .map(|j| if labels[i] == labels[j] { c(1.0 + gamma) } else { s[i][j] })
                .map(|v| (v / c(t)).exp())
                .collect(),
        );
        let q = softmax(lang[i].iter().map(|&v| c((v + gamma) / t).exp()).collect());
        for j in 0..n {
            total = total + p[j] * (p[j] / q[j]).ln();
        }
    }
    total / c(n as f64)
}

/// Fourth-order central differences of the oracle objective, evaluated in
/// double-double so that entries many orders below the largest partial are
/// resolved.
fn oracle_elg_fd(s: &[Vec<f64>], labels: &[usize], lang: &[Vec<f64>], gamma: f64, t: f64) -> Vec<Vec<f64>> {
    let h = 1e-6;
    let x: Vec<Vec<DoubleDouble>> = s.iter().map(|r| r.iter().map(|&v| DoubleDouble::from_f64(v)).collect()).collect();
    let mut g = vec![vec![0.0; s[0].len()]; s.len()];
    let mut y = x.clone();
    for i in 0..s.len() {
        for j in 0..s[0].len() {
            let mut at = |d: f64| {
                y[i][j] = x[i][j] + DoubleDouble::from_f64(d);
                let v = oracle_elg_generic(&y, labels, lang, gamma, t);
                y[i][j] = x[i][j];
                v
            };
            let eight = DoubleDouble::from_f64(8.0);
            let num = eight * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h));
            g[i][j] = (num / DoubleDouble::from_f64(12.0 * h)).to_f64().unwrap();
        }
    }
    g
}

fn max_abs(a: &Matrix<f64>, b: &[Vec<f64>]) -> f64 {
    to_rows(a).iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_rel(a: &Matrix<f64>, b: &[Vec<f64>], mask: Option<&[bool]>) -> f64 {
    to_rows(a)
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .enumerate()
        .filter(|(f, _)| mask.map_or(true, |m| !m[*f]))
        .map(|(_, (x, y))| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

struct Tally {
    failures: Vec<String>,
    checks: usize,
}

impl Tally {
    fn expect(&mut self, what: &str, err: f64, tol: f64) {
        self.checks += 1;
        if !(err <= tol) {
            self.failures.push(format!("{what}: {err:.2e} > {tol:.0e}"));
        }
    }

    fn expect_eq<T: PartialEq + std::fmt::Debug>(&mut self, what: &str, a: T, b: T) {
        self.checks += 1;
        if a != b {
            self.failures.push(format!("{what}: {a:?} != {b:?}"));
        }
    }
}

fn oracle_equivalence() -> Outcome {
    let mut t = Tally { failures: Vec::new(), checks: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..10 {
        let n = 8 + (trial * 7) % 57;
        let classes = 2 + trial % 5;
        let labels = random_labels(&mut rng, n, classes);
        let emb = random_unit(&mut rng, n, 2 + trial % 6);
        let rows = to_rows(emb.matrix());
        let ks: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&k| k < n).collect();
        let recall = recall_at_k(&emb, &labels, &ks).unwrap();
        for &k in &ks {
            t.expect(&format!("recall@{k} n={n}"), (recall[&k] - oracle_recall(&rows, &labels, k)).abs(), 1e-12);
        }
        t.expect(&format!("mAP@1000 n={n}"), (map_at_1000(&emb, &labels).unwrap() - oracle_map(&rows, &labels)).abs(), 1e-9);
        let clusters: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        if clusters.iter().any(|&c| c != clusters[0]) {
            t.expect(
                &format!("NMI n={n}"),
                (normalized_mutual_information(&clusters, &labels) - oracle_nmi(&clusters, &labels)).abs(),
                1e-9,
            );
        }
    }

    // pseudolabels
    for trial in 0..5 {
        let (n, classes, pretrain, k) = (20 + trial * 8, 4, 12, 1 + trial % 5);
        let labels = random_labels(&mut rng, n, classes);
        let mut raw = Matrix::from_fn(n, pretrain, |_, _| rng.gen_range(0.0f64..1.0).powi(3));
        for i in 0..n {
            let s: f64 = raw.row(i).iter().sum();
            raw.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        let names: Vec<String> = (0..pretrain).map(|c| format!("pretrain {c}")).collect();
        let post = PosteriorMatrix::new(raw.clone(), names).unwrap();
        let a = class_pseudolabels(&post, &labels, k).unwrap();
        for c in 0..classes {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let mean: Vec<f64> = (0..pretrain)
                .map(|j| members.iter().map(|&i| raw[(i, j)]).sum::<f64>() / members.len() as f64)
                .collect();
            let (idx, mass) = oracle_top_k(&mean, k);
            t.expect_eq(&format!("class pseudolabels c={c} k={k}"), &a.indices[c], &idx);
            let err = a.masses[c].iter().zip(&mass).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            t.expect(&format!("class pseudolabel mass c={c}"), err, 1e-12);
        }
        let s = sample_pseudolabels(&post, k).unwrap();
        for i in 0..n {
            t.expect_eq(&format!("sample pseudolabels i={i} k={k}"), &s.indices[i], &oracle_top_k(raw.row(i), k).0);
        }
    }

    // mining masks
    for trial in 0..8 {
        let n = 6 + trial * 5;
        let labels = random_labels(&mut rng, n, 2 + trial % 3);
        let e = random_unit(&mut rng, n, 4);
        let s_img = cosine_similarity_matrix(&e, &e).unwrap();
        let l = random_unit(&mut rng, n, 3);
        let s_lang = cosine_similarity_matrix(&l, &l).unwrap();
        let p = MultisimParams { nu1: [1.0, 0.5, 0.3][trial % 3], nu2: [1.0, 2.0][trial % 2], epsilon: 0.1, ..MultisimParams::default() };
        for lang in [None, Some(&s_lang)] {
            let got = language_adjusted_mining_mask(&s_img, lang, &labels, &p).unwrap();
            let want = oracle_mining(&to_rows(&s_img.data), lang.map(|m| to_rows(&m.data)).as_deref(), &labels, &p);
            t.expect_eq(&format!("mining positives n={n} lang={}", lang.is_some()), &got.positive, &want.0);
            t.expect_eq(&format!("mining negatives n={n} lang={}", lang.is_some()), &got.negative, &want.1);
        }
    }

    // divergence kernels
    for trial in 0..6 {
        let n = 4 + trial;
        let temp = [1.0, 0.5, 0.1, 2.0, 0.07, 1.3][trial];
        let gamma = [0.0, 0.2, 1.0, 0.5, 0.1, 0.7][trial];
        let a = random_matrix(&mut rng, n, n);
        let b = random_matrix(&mut rng, n, n);
        let (ar, br) = (to_rows(&a), to_rows(&b));
        let sa = SimilarityMatrix::new(a.clone(), SimKind::Image);
        let sb = SimilarityMatrix::new(b.clone(), SimKind::Language);

        let p = row_softmax(&sa, gamma, temp).unwrap();
        let want: Vec<Vec<f64>> = ar.iter().map(|r| oracle_softmax(r, gamma, temp)).collect();
        t.expect("row_softmax", max_abs(p.matrix(), &want), 1e-12);

        let q = row_softmax(&sb, 0.0, temp).unwrap();
        let kl = rowwise_kl(&p, &q).unwrap();
        let want = ar
            .iter()
            .zip(&br)
            .map(|(x, y)| oracle_kl(&oracle_softmax(x, gamma, temp), &oracle_softmax(y, 0.0, temp)))
            .sum::<f64>()
            / n as f64;
        t.expect("rowwise_kl", (kl - want).abs(), 1e-12);

        let l2 = rowwise_l2(&sa, &sb).unwrap();
        let want = ar.iter().flatten().zip(br.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
        t.expect("rowwise_l2", (l2 - want).abs(), 1e-12);

        // elg_match on a masked batch
        let labels = random_labels(&mut rng, n.max(4), 2);
        let labels = &labels[..n];
        let e = random_unit(&mut rng, n, 3);
        let s_img = cosine_similarity_matrix(&e, &e).unwrap();
        let masked = masked_image_similarity(&s_img, labels, gamma).unwrap();
        let lang = SimilarityMatrix::new(b.clone(), SimKind::Language);
        let got = elg_match_loss(&masked, &lang, gamma, temp).unwrap();
        let img_rows = to_rows(&s_img.data);
        let objective = |s: &[Vec<f64>]| oracle_rowwise_kl(&oracle_mask(s, labels, gamma), &br, gamma, temp);
        t.expect("elg_match value", (got.value - objective(&img_rows)).abs(), 1e-10);
        let mask = same_class_mask(labels);
        let fd = oracle_elg_fd(&img_rows, labels, &br, gamma, temp);
        t.expect("elg_match gradient", max_rel(&got.grad, &fd, Some(&mask)), 1e-5);

        // pseudomatch (average) against three targets
        let targets: Vec<SimilarityMatrix<f64>> =
            (0..3).map(|_| SimilarityMatrix::new(random_matrix(&mut rng, n, n), SimKind::Pseudolang)).collect();
        let mean_rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| targets.iter().map(|m| m.data[(i, j)]).sum::<f64>() / 3.0).collect())
            .collect();
        let spec = GuidanceSpec { k: 3, merge: MergeMode::Average, gamma_lang: gamma, temperature: temp, ..GuidanceSpec::default() };
        let pm = pseudomatch_loss(&masked, &targets, &spec).unwrap();
        t.expect(
            "pseudomatch average",
            (pm.value - oracle_rowwise_kl(&oracle_mask(&img_rows, labels, gamma), &mean_rows, gamma, temp)).abs(),
            1e-10,
        );
        let avg = average_language_targets(&targets).unwrap();
        t.expect("average_language_targets", max_abs(&avg.data, &mean_rows), 1e-12);

        // full-matrix KL
        let fk = full_matrix_kl(&sa, &sb, gamma, temp).unwrap();
        let flat_a: Vec<f64> = ar.iter().flatten().copied().collect();
        let flat_b: Vec<f64> = br.iter().flatten().copied().collect();
        let want = oracle_kl(&oracle_softmax(&flat_a, 0.0, temp), &oracle_softmax(&flat_b, gamma, temp));
        t.expect("full_matrix_kl", (fk.value - want).abs(), 1e-10);

        // row-wise L2 guidance on the masked matrix
        let rl = rowwise_l2_guidance(&masked, &lang, gamma).unwrap();
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = if labels[i] == labels[j] { 1.0 - br[i][j] } else { img_rows[i][j] - br[i][j] };
                want += d * d;
            }
        }
        t.expect("rowwise_l2_guidance", (rl.value - want / n as f64).abs(), 1e-10);

        // CLIP-style symmetric cross-entropy
        let img = random_unit(&mut rng, n, 5);
        let txt = random_unit(&mut rng, n, 5);
        let cl = clip_style_loss(&img, &txt, temp).unwrap();
        let mixed: Vec<Vec<f64>> = to_rows(img.matrix())
            .iter()
            .map(|a| to_rows(txt.matrix()).iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let mut want = 0.0;
        for i in 0..n {
            let row = oracle_softmax(&mixed[i], 0.0, temp);
            let col: Vec<f64> = (0..n).map(|j| mixed[j][i]).collect();
            let col = oracle_softmax(&col, 0.0, temp);
            want -= 0.5 * (row[i].ln() + col[i].ln());
        }
        t.expect("clip_style", (cl.value - want / n as f64).abs(), 1e-10);

        // predict head: negated mean cosine
        let ph = predict_head_loss(&img, &txt).unwrap();
        let want = -(0..n).map(|i| mixed[i][i]).sum::<f64>() / n as f64;
        t.expect("predict_head", (ph.value - want).abs(), 1e-12);

        // external targets: [0,1] -> [-1,1], then row-wise KL
        let unit = Matrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { rng.gen_range(0.0..1.0) });
        let unit = Matrix::from_fn(2, 2, |i, j| if i <= j { unit[(i, j)] } else { unit[(j, i)] });
        let names = vec!["a".to_string(), "b".to_string()];
        let ext = ExternalTargets::from_unit_interval(names.clone(), unit.clone()).unwrap();
        let class = ext.class_matrix(&names).unwrap();
        let s_ext = batch_similarity(&class, labels, SimKind::External);
        let eg = external_target_guidance(&masked, &s_ext, gamma, temp).unwrap();
        let ext_rows: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| 2.0 * unit[(labels[i], labels[j])] - 1.0).collect()).collect();
        t.expect(
            "external_target_guidance",
            (eg.value - oracle_rowwise_kl(&oracle_mask(&img_rows, labels, gamma), &ext_rows, gamma, temp)).abs(),
            1e-10,
        );
    }

    let detail = format!(
        "{} comparisons over recall@k, mAP@1000, NMI, pseudolabel top-k, mining masks and 11 kernels",
        t.checks
    );
    if t.failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failures: {}", t.failures.join("; ")))
    }
}

fn oracle_top_k(v: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut taken = vec![false; v.len()];
    let mut idx = Vec::new();
    for _ in 0..k {
        let mut best = None;
        for j in 0..v.len() {
            if !taken[j] && best.map_or(true, |b: usize| v[j] > v[b]) {
                best = Some(j);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        idx.push(b);
    }
    let mass = idx.iter().map(|&j| v[j]).collect();
    (idx, mass)
}

fn oracle_mining(
    s: &[Vec<f64>],
    lang: Option<&[Vec<f64>]>,
    labels: &[usize],
    p: &MultisimParams,
) -> (Vec<bool>, Vec<bool>) {
    let n = s.len();
    let spow = |x: f64, e: f64| x.signum() * x.abs().powf(e);
    let mut pos = vec![false; n * n];
    let mut neg = vec![false; n * n];
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let pos_sims: Vec<f64> = others.iter().filter(|&&k| labels[k] == labels[i]).map(|&k| s[i][k]).collect();
        let neg_sims: Vec<f64> = others.iter().filter(|&&k| labels[k] != labels[i]).map(|&k| s[i][k]).collect();
        if pos_sims.is_empty() || neg_sims.is_empty() {
            continue;
        }
        let hardest_neg = neg_sims.iter().copied().fold(f64::MIN, f64::max);
        let easiest_pos = pos_sims.iter().copied().fold(f64::MAX, f64::min);
        for &k in &others {
            let f = match lang {
                Some(l) if p.nu1 != 1.0 => {
                    spow((1.0 - p.nu1) * spow(l[i][k], p.nu2) + p.nu1 * spow(s[i][k], p.nu2), 1.0 / p.nu2)
                }
                _ => s[i][k],
            };
            if labels[k] == labels[i] {
                pos[i * n + k] = f < hardest_neg + p.epsilon;
            } else {
                neg[i * n + k] = f > easiest_pos - p.epsilon;
            }
        }
    }
    (pos, neg)
}

// ---------------------------------------------------------------------------
// desk-scale experiments

const SEEDS: u64 = 10;

struct SeedRun {
    r1: [f64; 4],
    /// Alignment divergence on the training split (baseline, ELG).
    train_div: [f64; 2],
    test_div: [f64; 2],
}

struct DeskRuns {
    seeds: Vec<SeedRun>,
    secs: f64,
}

/// Baseline, ELG, PLG with k=5 and PLG with k=1 on every seed.
fn desk_runs() -> DeskRuns {
    let t0 = Instant::now();
    let arms = [(GuidanceMode::None, 5), (GuidanceMode::Elg, 5), (GuidanceMode::Plg, 5), (GuidanceMode::Plg, 1)];
    let seeds = (0..SEEDS)
        .map(|seed| {
            let data = synth_dataset(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
            let mut r1 = [0.0; 4];
            let mut train_div = [0.0; 2];
            let mut test_div = [0.0; 2];
            for (arm, &(mode, k)) in arms.iter().enumerate() {
                let mut cfg = desk_config(seed);
                cfg.guidance.mode = mode;
                cfg.guidance.k = k;
                let out = train(&cfg, &data.train).unwrap();
                r1[arm] = test_recall1(&data, &out.checkpoint);
                if arm < 2 {
                    train_div[arm] = divergence(&data.train, &out.checkpoint, &cfg);
                    test_div[arm] = divergence(&data.test, &out.checkpoint, &cfg);
                }
            }
            SeedRun { r1, train_div, test_div }
        })
        .collect();
    DeskRuns { seeds, secs: t0.elapsed().as_secs_f64() }
}

fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk_scale();
    cfg.seed = seed;
    cfg.epochs = 50;
    cfg.guidance.omega = 5.0;
    cfg
}

fn test_recall1(data: &SynthOutput, head: &langguide::trainer::EmbedderHead<f64>) -> f64 {
    let emb = head.embed(&data.test.features).unwrap();
    100.0 * recall_at_k(&emb, &data.test.labels, &[1]).unwrap()[&1]
}

fn divergence(
    split: &langguide::datastore::DatasetBundle,
    head: &langguide::trainer::EmbedderHead<f64>,
    cfg: &TrainConfig,
) -> f64 {
    let emb = head.embed(&split.features).unwrap();
    let table = &split.class_tables["lang_class"];
    alignment_divergence(&emb, &split.labels, &split.class_names, table, cfg.guidance.gamma_lang, cfg.guidance.temperature)
        .unwrap()
}

fn arm_median(runs: &DeskRuns, arm: usize) -> f64 {
    median(runs.seeds.iter().map(|s| s.r1[arm]).collect())
}

fn directional_elg(runs: &DeskRuns) -> Outcome {
    let wins = runs.seeds.iter().filter(|s| s.r1[1] > s.r1[0]).count();
    let ratio = median(runs.seeds.iter().map(|s| s.train_div[0] / s.train_div[1]).collect());
    let test_ratio = median(runs.seeds.iter().map(|s| s.test_div[0] / s.test_div[1]).collect());
    check(
        wins >= 8 && ratio >= 2.0 && runs.secs < 180.0,
        format!(
            "ELG beats baseline R@1 in {wins}/{SEEDS} seeds (need 8), median R@1 {:.1} -> {:.1}, \
             median divergence ratio {ratio:.2} on the training split (need 2.0; held-out split {test_ratio:.2}), \
             {:.1}s for all four arms (limit 180s)",
            arm_median(runs, 0),
            arm_median(runs, 1),
            runs.secs
        ),
    )
}

fn plg_parity(runs: &DeskRuns) -> Outcome {
    let (elg, plg) = (arm_median(runs, 1), arm_median(runs, 2));
    check(
        (elg - plg).abs() <= 2.0,
        format!("median R@1 ELG {elg:.2}, PLG k=5 {plg:.2}, gap {:.2} points (limit 2)", (elg - plg).abs()),
    )
}

fn pseudolabel_trend(runs: &DeskRuns) -> Outcome {
    let (k5, k1) = (arm_median(runs, 2), arm_median(runs, 3));
    check(k5 >= k1, format!("median R@1 k=5 {k5:.2} vs k=1 {k1:.2}"))
}

fn determinism() -> Outcome {
    let data = synth_dataset(&SynthSpec { seed: 3, ..SynthSpec::default() }).unwrap();
    let mut cfg = desk_config(3);
    cfg.epochs = 10;
    cfg.guidance.mode = GuidanceMode::Elg;
    let a = train(&cfg, &data.train).unwrap();
    let b = train(&cfg, &data.train).unwrap();
    let same_history = a.history.to_csv() == b.history.to_csv();
    let ca = encode_checkpoint(&a.checkpoint, &cfg).unwrap();
    let cb = encode_checkpoint(&b.checkpoint, &cfg).unwrap();
    check(
        same_history && ca == cb,
        format!(
            "history CSV identical: {same_history}, checkpoint bytes identical: {} ({} bytes)",
            ca == cb,
            ca.len()
        ),
    )
}
