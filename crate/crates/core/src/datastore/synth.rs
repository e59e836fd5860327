//! Synthetic two-level hierarchy fixtures.
//!
//! Every class has a latent code drawn around its superclass centroid.
//! Features are a fixed linear image of the latent plus a class-specific
//! nuisance offset and per-sample noise; class language embeddings are a
//! different linear image of the same latent with independent noise.
//! Pretrain classes for pseudolabels live in the same latent space, and
//! their posteriors come from a frozen linear classifier over the features.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{ExternalTargets, LanguageTable};
use crate::linalg::Matrix;
use crate::pseudolabel::PosteriorMatrix;
use crate::rng::SeedStreams;
use crate::simcore::EmbeddingMatrix;

use super::DatasetBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_super: usize,
    pub classes_per_super: usize,
    pub samples_per_class: usize,
    pub feat_dim: usize,
    pub lang_dim: usize,
    pub intra_noise: f64,
    pub seed: u64,
    pub latent_dim: usize,
    /// Spread of class latents around their superclass centroid.
    pub class_spread: f64,
    /// Scale of class offsets inside a low-dimensional nuisance subspace.
    /// Only training classes carry them, so they separate training classes
    /// without transferring to held-out ones.
    pub nuisance: f64,
    pub nuisance_dim: usize,
    /// Per-sample noise inside the nuisance subspace, relative to
    /// `intra_noise`.
    pub nuisance_noise: f64,
    pub lang_noise: f64,
    /// Noise of the per-sample caption embeddings around the class latent.
    pub caption_noise: f64,
    pub pretrain_per_super: usize,
    pub pretrain_generic: usize,
    /// Logit scale of the frozen classifier.
    pub classifier_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_super: 4,
            classes_per_super: 5,
            samples_per_class: 30,
            feat_dim: 64,
            lang_dim: 32,
            intra_noise: 0.5,
            seed: 0,
            latent_dim: 16,
            class_spread: 0.6,
            nuisance: 6.0,
            nuisance_dim: 8,
            nuisance_noise: 4.0,
            lang_noise: 0.15,
            caption_noise: 0.3,
            pretrain_per_super: 6,
            pretrain_generic: 8,
            classifier_scale: 16.0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("n_super", self.n_super),
            ("classes_per_super", self.classes_per_super),
            ("samples_per_class", self.samples_per_class),
            ("feat_dim", self.feat_dim),
            ("lang_dim", self.lang_dim),
            ("latent_dim", self.latent_dim),
            ("nuisance_dim", self.nuisance_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::DegenerateSpec(format!("{name} must be >= 1")));
        }
        if !(self.intra_noise > 0.0) {
            return Err(Error::DegenerateSpec("intra_noise must be > 0".into()));
        }
        if self.classes_per_super < 2 {
            return Err(Error::DegenerateSpec(
                "classes_per_super must be >= 2 to leave training classes".into(),
            ));
        }
        let noise = [self.class_spread, self.nuisance, self.nuisance_noise, self.lang_noise, self.caption_noise];
        if noise.iter().any(|v| !(*v >= 0.0)) || !(self.classifier_scale > 0.0) {
            return Err(Error::DegenerateSpec("noise scales must be >= 0".into()));
        }
        if self.pretrain_per_super * self.n_super + self.pretrain_generic == 0 {
            return Err(Error::DegenerateSpec("at least one pretrain class is needed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train: DatasetBundle,
    /// Held-out classes, one per superclass.
    pub test: DatasetBundle,
    /// Fraction of (same-superclass pair, cross-superclass pair)
    /// comparisons in which the same-superclass pair has the higher class
    /// language similarity.
    pub hierarchy_agreement: f64,
    /// Superclass of every class, indexed like `all_class_names`.
    pub superclass: Vec<usize>,
    pub all_class_names: Vec<String>,
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample(StandardNormal)
}

fn gaussian(rows: usize, cols: usize, scale: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..rows * cols).map(|_| scale * normal(rng)).collect()
}

/// `out[r] = m · v` for a row-major `rows × cols` matrix.
fn apply(m: &[f32], rows: usize, cols: usize, v: &[f32]) -> Vec<f32> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Normalizes in single precision so stored values do not depend on
/// double-precision rounding.
fn unit_rows(rows: Vec<Vec<f32>>) -> Result<EmbeddingMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f32>().sqrt();
            r.iter().map(move |&x| (x / n) as f64)
        })
        .collect();
    EmbeddingMatrix::from_unit_rows(Matrix::from_vec(rows.len(), cols, data)?)
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let mut rng = streams.stream("synth");
    let l = spec.latent_dim;
    let (fd, ld) = (spec.feat_dim, spec.lang_dim);
    let inv_sqrt_l = 1.0 / (l as f32).sqrt();

    let feat_map = gaussian(fd, l, inv_sqrt_l, &mut rng);
    let lang_map = gaussian(ld, l, inv_sqrt_l, &mut rng);
    let nd = spec.nuisance_dim;
    let nuisance_map = gaussian(fd, nd, 1.0 / (nd.max(1) as f32).sqrt(), &mut rng);
    let centroids: Vec<Vec<f32>> = (0..spec.n_super).map(|_| gaussian(1, l, 1.0, &mut rng)).collect();

    let n_classes = spec.n_super * spec.classes_per_super;
    let mut latents = Vec::with_capacity(n_classes);
    let mut superclass = Vec::with_capacity(n_classes);
    let mut raw_names = Vec::with_capacity(n_classes);
    for s in 0..spec.n_super {
        for c in 0..spec.classes_per_super {
            let z: Vec<f32> = centroids[s]
                .iter()
                .map(|&u| u + spec.class_spread as f32 * normal(&mut rng))
                .collect();
            latents.push(z);
            superclass.push(s);
            raw_names.push(format!("{:03}.Group{s}_Kind{c}", raw_names.len() + 1));
        }
    }
    let class_names: Vec<String> = raw_names.iter().map(|n| super::clean_name(n)).collect();

    let lang_rows: Vec<Vec<f32>> = latents
        .iter()
        .map(|z| {
            apply(&lang_map, ld, l, z)
                .into_iter()
                .map(|v| v + spec.lang_noise as f32 * normal(&mut rng))
                .collect()
        })
        .collect();
    let lang_class = unit_rows(lang_rows)?;
    let lang_table = LanguageTable::new(class_names.clone(), lang_class.clone())?;

    // features
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut captions = Vec::new();
    let is_test = |c: usize| c % spec.classes_per_super == spec.classes_per_super - 1;
    let in_nuisance = |v: Vec<f32>| apply(&nuisance_map, fd, nd, &v);
    let sample_scale = (spec.nuisance_noise * spec.intra_noise) as f32;
    for (c, z) in latents.iter().enumerate() {
        let center = apply(&feat_map, fd, l, z);
        let offset = if is_test(c) {
            vec![0.0; fd]
        } else {
            in_nuisance(gaussian(1, nd, spec.nuisance as f32, &mut rng))
        };
        for _ in 0..spec.samples_per_class {
            let jitter = in_nuisance(gaussian(1, nd, sample_scale, &mut rng));
            let x: Vec<f32> = center
                .iter()
                .zip(&offset)
                .zip(&jitter)
                .map(|((&m, &o), &j)| m + o + j + spec.intra_noise as f32 * normal(&mut rng))
                .collect();
            features.push(x);
            labels.push(c);
            let zc: Vec<f32> = z
                .iter()
                .map(|&v| v + spec.caption_noise as f32 * normal(&mut rng))
                .collect();
            captions.push(apply(&lang_map, ld, l, &zc));
        }
    }

    // pretrain classes and frozen classifier
    let n_pre = spec.pretrain_per_super * spec.n_super + spec.pretrain_generic;
    let mut pre_latents = Vec::with_capacity(n_pre);
    for s in 0..spec.n_super {
        for _ in 0..spec.pretrain_per_super {
            pre_latents.push(
                centroids[s]
                    .iter()
                    .map(|&u| u + spec.class_spread as f32 * normal(&mut rng))
                    .collect::<Vec<f32>>(),
            );
        }
    }
    for _ in 0..spec.pretrain_generic {
        pre_latents.push(gaussian(1, l, 1.0, &mut rng));
    }
    let pre_names: Vec<String> = (0..n_pre).map(|p| format!("proto {p}")).collect();
    let pre_lang: Vec<Vec<f32>> = pre_latents
        .iter()
        .map(|z| {
            apply(&lang_map, ld, l, z)
                .into_iter()
                .map(|v| v + spec.lang_noise as f32 * normal(&mut rng))
                .collect()
        })
        .collect();
    let pseudo_table = LanguageTable::new(pre_names.clone(), unit_rows(pre_lang)?)?;
    let classifier: Vec<Vec<f32>> = pre_latents
        .iter()
        .map(|z| {
            let w: Vec<f32> = apply(&feat_map, fd, l, z)
                .into_iter()
                .map(|v| v + 0.1 * normal(&mut rng))
                .collect();
            let n = w.iter().map(|x| x * x).sum::<f32>().sqrt();
            w.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let scale = spec.classifier_scale as f32;
    let posteriors: Vec<Vec<f64>> = features
        .iter()
        .map(|x| {
            let xn = x.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            let logits: Vec<f32> = classifier
                .iter()
                .map(|w| scale * w.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() / xn)
                .collect();
            let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = logits.iter().map(|v| (v - m).exp()).collect();
            let z: f32 = e.iter().sum();
            e.iter().map(|v| (v / z) as f64).collect()
        })
        .collect();

    // external hierarchy targets in [0, 1]
    let external = Matrix::from_fn(n_classes, n_classes, |a, b| {
        if a == b {
            1.0
        } else if superclass[a] == superclass[b] {
            0.5
        } else {
            0.0
        }
    });
    let external = ExternalTargets::from_unit_interval(class_names.clone(), external)?;

    let hierarchy_agreement = agreement(lang_class.matrix(), &superclass);
    if hierarchy_agreement < 0.95 {
        log::warn!("language hierarchy agreement is only {hierarchy_agreement:.3}");
    }

    let to_matrix = |rows: &[Vec<f32>]| {
        Matrix::from_rows(&rows.iter().map(|r| r.iter().map(|&x| x as f64).collect::<Vec<_>>()).collect::<Vec<_>>())
    };
    let features = to_matrix(&features);
    let captions = unit_rows(captions)?;
    let posteriors = Matrix::from_rows(&posteriors);
    let mut class_tables = BTreeMap::new();
    class_tables.insert("lang_class".to_string(), lang_table);
    let full = DatasetBundle {
        features,
        labels: labels.clone(),
        class_names: class_names.clone(),
        posteriors: Some(PosteriorMatrix::new(posteriors, pre_names)?),
        class_tables,
        pseudo_table: Some(pseudo_table),
        sample_language: Some(captions),
        external: Some(external),
        primer: Some("A photo of a".to_string()),
    };

    let split = |test: bool| -> Result<DatasetBundle> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| is_test(labels[i]) == test).collect();
        let kept: Vec<usize> = (0..n_classes).filter(|&c| is_test(c) == test).collect();
        let remap: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(d, &c)| (c, d)).collect();
        let mut b = full.select(&idx)?;
        b.labels = b.labels.iter().map(|y| remap[y]).collect();
        b.class_names = kept.iter().map(|&c| class_names[c].clone()).collect();
        Ok(b)
    };
    Ok(SynthOutput {
        train: split(false)?,
        test: split(true)?,
        hierarchy_agreement,
        superclass,
        all_class_names: class_names,
    })
}

fn agreement(lang: &Matrix<f64>, superclass: &[usize]) -> f64 {
    let n = superclass.len();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for a in 0..n {
        for b in a + 1..n {
            let s: f64 = lang.row(a).iter().zip(lang.row(b)).map(|(x, y)| x * y).sum();
            if superclass[a] == superclass[b] {
                same.push(s);
            } else {
                diff.push(s);
            }
        }
    }
    if same.is_empty() || diff.is_empty() {
        return 1.0;
    }
    let wins = same
        .iter()
        .map(|&s| diff.iter().filter(|&&d| s > d).count())
        .sum::<usize>();
    wins as f64 / (same.len() * diff.len()) as f64
}
