//! Finite-difference verification of every analytic gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::guidance::{
    clip_style_loss, elg_match_loss, external_target_guidance, full_matrix_kl,
    masked_image_similarity, predict_head_loss, pseudomatch_loss, rowwise_l2_guidance,
    same_class_mask, GuidanceSpec, MergeMode,
};
use crate::dd::DoubleDouble;
use crate::linalg::{Matrix, Real};
use crate::losses::{
    contrastive_loss, margin_loss_for_triplets, multisimilarity_loss, sample_triplets,
    ContrastiveForm, ContrastiveParams, DistanceMetric, LossGrad, MarginParams, MultisimParams,
    Triplet,
};
use crate::simcore::{
    cosine_similarity_matrix, normalize_rows, normalize_rows_backward, EmbeddingMatrix, SimKind,
    SimilarityMatrix,
};
use crate::tape::Tape;

use super::head::EmbedderHead;

pub const LOSS_NAMES: &[&str] = &[
    "contrastive",
    "contrastive_hinge",
    "contrastive_cosine",
    "multisimilarity",
    "multisim_mining",
    "multisim_interpolated",
    "multisim_reweighted",
    "margin",
    "elg_match",
    "external",
    "pseudomatch_average",
    "pseudomatch_multi",
    "pseudomatch_dense",
    "full_kl",
    "rowwise_l2",
    "clip_style",
    "predict_head",
    "composite",
];

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_INSTANCES: usize = 20;

struct Evaluated<T> {
    value: T,
    grads: Vec<Matrix<T>>,
    /// Gradient with respect to the image similarity matrix, when the loss
    /// consumes one.
    sim_grad: Option<Matrix<T>>,
}

impl<T> Evaluated<T> {
    fn plain(value: T, grads: Vec<Matrix<T>>) -> Self {
        Self {
            value,
            grads,
            sim_grad: None,
        }
    }
}

/// Fixed data of one random instance. Evaluated in `f64` for the analytic
/// gradient and in double-double for the finite differences.
enum Spec {
    Contrastive {
        labels: Vec<usize>,
        params: ContrastiveParams,
    },
    Multisim {
        labels: Vec<usize>,
        params: MultisimParams,
        lang: Option<Matrix<f64>>,
    },
    Margin {
        triplets: Vec<Triplet>,
        params: MarginParams,
    },
    Matching {
        name: &'static str,
        labels: Vec<usize>,
        target: Matrix<f64>,
        gamma: f64,
        temp: f64,
    },
    Pseudo {
        labels: Vec<usize>,
        targets: Vec<Matrix<f64>>,
        spec: GuidanceSpec,
    },
    Clip {
        lang: Matrix<f64>,
        temp: f64,
    },
    Predict {
        lang: Matrix<f64>,
    },
    Composite {
        head: EmbedderHead<f64>,
        features: Matrix<f64>,
        labels: Vec<usize>,
        s_lang: Matrix<f64>,
        gamma: f64,
        temp: f64,
        omega: f64,
    },
}

struct Case {
    inputs: Vec<Matrix<f64>>,
    spec: Spec,
    /// Similarity entries whose reported gradient must be exactly 0.
    frozen: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossCheck {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates at non-differentiable points (mining switches, hinge
    /// kinks), excluded from the error statistics.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest reported gradient on frozen entries, if the loss has any.
    pub frozen_grad_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub losses: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.losses.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.losses
            .iter()
            .all(|l| l.max_rel_error <= tol && l.frozen_grad_max.map_or(true, |m| m == 0.0))
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>7} {:>7} {:>12} {:>12} {:>10}\n",
            "loss", "instances", "coords", "skipped", "max_rel", "max_abs", "frozen"
        );
        for l in &self.losses {
            out.push_str(&format!(
                "{:<24} {:>9} {:>7} {:>7} {:>12.3e} {:>12.3e} {:>10}\n",
                l.name,
                l.instances,
                l.coordinates,
                l.skipped,
                l.max_rel_error,
                l.max_abs_error,
                l.frozen_grad_max.map_or("-".to_string(), |m| format!("{m:.1e}")),
            ));
        }
        out.push_str(&format!("max relative error: {:.3e}\n", self.max_rel_error()));
        out
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks `loss` (or every loss) on `instances` random points each. Partial
/// derivatives use the fourth-order central stencil with spacing `step`.
pub fn gradcheck(loss: Option<&str>, instances: usize, step: f64, seed: u64) -> Result<GradcheckReport> {
    if !(1e-8..=1e-4).contains(&step) {
        return Err(Error::InvalidParameter(format!("step must be in [1e-8, 1e-4], got {step}")));
    }
    let names: Vec<&str> = match loss {
        Some(n) if LOSS_NAMES.contains(&n) => vec![n],
        Some(n) => return Err(Error::UnknownLoss(n.to_string())),
        None => LOSS_NAMES.to_vec(),
    };
    let mut losses = Vec::new();
    for name in &names {
        let mut rng = SeedStreams::new(seed).stream(name);
        let mut check = LossCheck {
            name: name.to_string(),
            instances,
            coordinates: 0,
            skipped: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            frozen_grad_max: None,
        };
        for _ in 0..instances {
            let case = build_case(name, &mut rng)?;
            check_case(&case, step, &mut check)?;
        }
        losses.push(check);
    }
    Ok(GradcheckReport { step, losses })
}

fn check_case(case: &Case, h: f64, out: &mut LossCheck) -> Result<()> {
    let Evaluated { grads, sim_grad, .. } = case.spec.evaluate(&case.inputs)?;
    if let (Some(mask), Some(gs)) = (&case.frozen, &sim_grad) {
        let m = gs
            .as_slice()
            .iter()
            .zip(mask)
            .filter(|(_, &f)| f)
            .map(|(g, _)| g.abs())
            .fold(0.0, f64::max);
        out.frozen_grad_max = Some(out.frozen_grad_max.unwrap_or(0.0).max(m));
    }
    let mut inputs: Vec<Matrix<DoubleDouble>> = case.inputs.iter().map(|m| m.cast()).collect();
    for (k, g) in grads.iter().enumerate() {
        for idx in 0..inputs[k].as_slice().len() {
            let x0 = inputs[k].as_slice()[idx];
            let mut at = |dx: f64| -> Result<DoubleDouble> {
                inputs[k].as_mut_slice()[idx] = x0 + DoubleDouble::from_f64(dx);
                Ok(case.spec.evaluate(&inputs)?.value)
            };
            let mut stencil = |h: f64| -> Result<f64> {
                let v = [at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?];
                let eight = DoubleDouble::from_f64(8.0);
                let num = eight * (v[1] - v[2]) - (v[0] - v[3]);
                Ok((num / DoubleDouble::from_f64(12.0 * h)).as_f64())
            };
            let fd = stencil(h)?;
            let fd_half = stencil(0.5 * h)?;
            inputs[k].as_mut_slice()[idx] = x0;
            out.coordinates += 1;
            // a kink or mining switch inside the stencil makes the two
            // spacings disagree far beyond truncation error
            if (fd - fd_half).abs() > 1e-6 + 1e-3 * fd.abs().max(fd_half.abs()) {
                out.skipped += 1;
                continue;
            }
            let a = g.as_slice()[idx];
            if std::env::var_os("GRADCHECK_TRACE").is_some() && relative_error(a, fd) > 1e-5 {
                eprintln!("{} input {k} index {idx}: analytic {a:e}, fd {fd:e}", out.name);
            }
            out.max_rel_error = out.max_rel_error.max(relative_error(a, fd));
            out.max_abs_error = out.max_abs_error.max((a - fd).abs());
        }
    }
    Ok(())
}

fn gauss_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn unit(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix<f64> {
    normalize_rows(&gauss_matrix(rows, cols, rng)).expect("nonzero rows")
}

fn random_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // two or three classes with at least two members each
    let c = rng.gen_range(2..=3);
    let mut l: Vec<usize> = (0..n).map(|i| i % c).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.gen_range(0..=i));
    }
    l
}

fn sim<T: Real>(m: &Matrix<f64>, kind: SimKind) -> SimilarityMatrix<T> {
    SimilarityMatrix::new(m.cast(), kind)
}

/// Loss of the cosine similarity matrix of row-normalized `x`. Partials are
/// taken with respect to `x`: individual similarity entries often have
/// partials far below the resolution of finite differences.
fn through_similarity<T: Real>(
    x: &Matrix<T>,
    f: impl Fn(&SimilarityMatrix<T>) -> Result<LossGrad<T>>,
) -> Result<Evaluated<T>> {
    let e = normalize_rows(x)?;
    let s = cosine_similarity_matrix(&e, &e)?;
    let l = f(&s)?;
    let ge = super::similarity_to_embedding_grad(&l.grad, e.matrix())?;
    Ok(Evaluated {
        value: l.value,
        grads: vec![normalize_rows_backward(x, e.matrix(), &ge)],
        sim_grad: Some(l.grad),
    })
}

/// Loss on unnormalized embeddings through row normalization.
fn through_normalize<T: Real>(
    x: &Matrix<T>,
    f: impl Fn(&EmbeddingMatrix<T>) -> Result<LossGrad<T>>,
) -> Result<Evaluated<T>> {
    let e = normalize_rows(x)?;
    let l = f(&e)?;
    Ok(Evaluated::plain(l.value, vec![normalize_rows_backward(x, e.matrix(), &l.grad)]))
}

impl Spec {
    fn evaluate<T: Real>(&self, x: &[Matrix<T>]) -> Result<Evaluated<T>> {
        match self {
            Spec::Contrastive { labels, params } => {
                through_normalize(&x[0], |e| contrastive_loss(e, labels, params))
            }
            Spec::Multisim { labels, params, lang } => {
                let lang = lang.as_ref().map(|m| sim::<T>(m, SimKind::Language));
                through_similarity(&x[0], |s| multisimilarity_loss(s, labels, params, lang.as_ref()))
            }
            Spec::Margin { triplets, params } => {
                let e = normalize_rows(&x[0])?;
                let l = margin_loss_for_triplets(&e, triplets, params, x[1][(0, 0)])?;
                let g = normalize_rows_backward(&x[0], e.matrix(), &l.grad);
                Ok(Evaluated::plain(l.value, vec![g, Matrix::filled(1, 1, l.grad_beta)]))
            }
            Spec::Matching {
                name,
                labels,
                target,
                gamma,
                temp,
            } => {
                let kind = if *name == "external" { SimKind::External } else { SimKind::Language };
                let target = sim::<T>(target, kind);
                let (gamma, temp) = (T::lit(*gamma), T::lit(*temp));
                through_similarity(&x[0], |s| {
                    let m = masked_image_similarity(s, labels, gamma)?;
                    match *name {
                        "elg_match" => elg_match_loss(&m, &target, gamma, temp),
                        "external" => external_target_guidance(&m, &target, gamma, temp),
                        "full_kl" => full_matrix_kl(&m, &target, gamma, temp),
                        _ => rowwise_l2_guidance(&m, &target, gamma),
                    }
                })
            }
            Spec::Pseudo { labels, targets, spec } => {
                let targets: Vec<SimilarityMatrix<T>> =
                    targets.iter().map(|t| sim(t, SimKind::Pseudolang)).collect();
                through_similarity(&x[0], |s| {
                    let m = masked_image_similarity(s, labels, T::lit(spec.gamma_lang))?;
                    pseudomatch_loss(&m, &targets, spec)
                })
            }
            Spec::Clip { lang, temp } => {
                let lang = EmbeddingMatrix::from_unit_rows(lang.cast())?;
                through_normalize(&x[0], |e| clip_style_loss(e, &lang, T::lit(*temp)))
            }
            Spec::Predict { lang } => {
                let lang = EmbeddingMatrix::from_unit_rows(lang.cast())?;
                through_normalize(&x[0], |e| predict_head_loss(e, &lang))
            }
            Spec::Composite {
                head,
                features,
                labels,
                s_lang,
                gamma,
                temp,
                omega,
            } => {
                let mut h = head.cast::<T>();
                for (p, v) in h.params_mut().into_iter().zip(x) {
                    *p = v.clone();
                }
                let (gamma, temp, omega) = (T::lit(*gamma), T::lit(*temp), T::lit(*omega));
                let mut tape = Tape::new();
                let xin = tape.constant(features.cast());
                let rec = h.record(&mut tape, xin);
                let e = tape.value(rec.output).clone();
                let emb = EmbeddingMatrix::from_unit_rows(e.clone())?;
                let s = cosine_similarity_matrix(&emb, &emb)?;
                let dml = multisimilarity_loss(&s, labels, &MultisimParams::default(), None)?;
                let m = masked_image_similarity(&s, labels, gamma)?;
                let lm = elg_match_loss(&m, &sim(s_lang, SimKind::Language), gamma, temp)?;
                let mut gs = dml.grad.clone();
                gs.add_assign_scaled(&lm.grad, omega)?;
                let ge = super::similarity_to_embedding_grad(&gs, &e)?;
                let value = dml.value + omega * lm.value;
                let root = tape.loss(value, vec![(rec.output, ge)]);
                let grads = tape.backward(root);
                Ok(Evaluated::plain(value, rec.params.iter().map(|&v| grads.get(v)).collect()))
            }
        }
    }
}

fn build_case(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.gen_range(6..=8);
    let d = 8;
    let labels = random_labels(n, rng);
    let lang_emb = unit(n, d, rng);
    let s_lang = cosine_similarity_matrix(&lang_emb, &lang_emb)?.data;
    let x0 = gauss_matrix(n, d, rng);
    let gamma = rng.gen_range(0.0..1.0);
    let temp = rng.gen_range(0.3..2.0);

    let plain = |spec: Spec, x: Matrix<f64>| Case {
        inputs: vec![x],
        spec,
        frozen: None,
    };
    let masked = |spec: Spec, labels: &[usize]| Case {
        inputs: vec![x0.clone()],
        spec,
        frozen: Some(same_class_mask(labels)),
    };

    Ok(match name {
        "contrastive" | "contrastive_hinge" | "contrastive_cosine" => {
            let params = ContrastiveParams {
                gamma_p: if name == "contrastive" { 0.0 } else { 0.2 },
                gamma_n: if name == "contrastive_cosine" { 0.5 } else { 1.0 },
                metric: if name == "contrastive_cosine" {
                    DistanceMetric::CosineDistance
                } else {
                    DistanceMetric::Euclidean
                },
                form: if name == "contrastive" {
                    ContrastiveForm::Clamped
                } else {
                    ContrastiveForm::Hinge
                },
            };
            plain(Spec::Contrastive { labels, params }, gauss_matrix(n, d, rng))
        }
        "multisimilarity" | "multisim_mining" | "multisim_interpolated" | "multisim_reweighted" => {
            let (params, lang) = match name {
                "multisimilarity" => (MultisimParams::default(), None),
                "multisim_mining" => (MultisimParams::language_mining(0.5), Some(s_lang)),
                "multisim_interpolated" => (
                    MultisimParams {
                        nu2: 2.0,
                        ..MultisimParams::language_mining(0.5)
                    },
                    Some(s_lang),
                ),
                _ => (MultisimParams::language_reweighted(), Some(s_lang)),
            };
            plain(Spec::Multisim { labels, params, lang }, gauss_matrix(n, d, rng))
        }
        "margin" => {
            let params = MarginParams::default();
            let x = gauss_matrix(n, d, rng);
            let triplets = sample_triplets(&normalize_rows(&x)?, &labels, &params, rng)?;
            let beta = Matrix::filled(1, 1, rng.gen_range(0.8..1.4));
            Case {
                inputs: vec![x, beta],
                spec: Spec::Margin { triplets, params },
                frozen: None,
            }
        }
        "elg_match" | "external" | "full_kl" | "rowwise_l2" => {
            let target = if name == "external" {
                // any symmetric matrix in [-1, 1] with unit diagonal
                Matrix::from_fn(n, n, |i, j| {
                    if i == j {
                        1.0
                    } else {
                        2.0 * ((i * 7 + j * 7) % 5) as f64 / 4.0 - 1.0
                    }
                })
            } else {
                s_lang
            };
            let name = LOSS_NAMES.iter().copied().find(|&l| l == name).expect("known name");
            let spec = Spec::Matching {
                name,
                labels: labels.clone(),
                target,
                gamma,
                temp,
            };
            masked(spec, &labels)
        }
        "pseudomatch_average" | "pseudomatch_multi" | "pseudomatch_dense" => {
            let k = rng.gen_range(1..=3);
            let (merge, count) = match name {
                "pseudomatch_average" => (MergeMode::Average, k),
                "pseudomatch_multi" => (MergeMode::Multi, k),
                _ => (MergeMode::Dense, k * k),
            };
            let targets = (0..count)
                .map(|_| {
                    let e = unit(n, d, rng);
                    cosine_similarity_matrix(&e, &e).map(|s| s.data)
                })
                .collect::<Result<_>>()?;
            let spec = GuidanceSpec {
                merge,
                k,
                gamma_lang: gamma,
                temperature: temp,
                ..GuidanceSpec::default()
            };
            let spec = Spec::Pseudo {
                labels: labels.clone(),
                targets,
                spec,
            };
            masked(spec, &labels)
        }
        "clip_style" => {
            let temp = rng.gen_range(0.07..0.5);
            let spec = Spec::Clip {
                lang: lang_emb.matrix().clone(),
                temp,
            };
            plain(spec, gauss_matrix(n, d, rng))
        }
        "predict_head" => plain(
            Spec::Predict {
                lang: lang_emb.matrix().clone(),
            },
            gauss_matrix(n, d, rng),
        ),
        "composite" => {
            // head parameters through normalization, multisimilarity and the
            // weighted language matching term, as in a training step
            let head = EmbedderHead::<f64>::new(&[5, 7, 6], rng);
            let features = gauss_matrix(n, 5, rng);
            let omega = rng.gen_range(0.5..5.0);
            Case {
                inputs: head.params().into_iter().cloned().collect(),
                spec: Spec::Composite {
                    head,
                    features,
                    labels,
                    s_lang,
                    gamma,
                    temp,
                    omega,
                },
                frozen: None,
            }
        }
        other => return Err(Error::UnknownLoss(other.to_string())),
    })
}
