use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::guidance::{ExternalTargets, LanguageTable};
use crate::linalg::Matrix;
use crate::pseudolabel::PosteriorMatrix;
use crate::simcore::EmbeddingMatrix;

use super::matrix_file::{read_matrix, write_matrix, Dtype};
use super::names::{clean_name, load_language_table, read_names, write_names};

/// Frozen features with labels plus whatever guidance inputs a run needs.
///
/// On disk a bundle is a directory:
///
/// ```text
/// features.lgdm            n × feat_dim
/// labels.txt               one integer per line
/// class_names.txt          one name per line
/// posteriors.lgdm          n × n_pretrain (optional)
/// pretrain_names.txt       names of the posterior columns
/// <table>.lgdm/.names      class-level language tables, e.g. lang_class
/// lang_pseudo.lgdm/.names  pretrain-class language table
/// lang_sample.lgdm         per-sample caption embeddings, n rows
/// external.lgdm/.names     external [0,1] class similarities
/// primer.txt               primer used when embedding names (metadata)
/// ```
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub posteriors: Option<PosteriorMatrix<f64>>,
    pub class_tables: BTreeMap<String, LanguageTable<f64>>,
    pub pseudo_table: Option<LanguageTable<f64>>,
    pub sample_language: Option<EmbeddingMatrix<f64>>,
    pub external: Option<ExternalTargets<f64>>,
    pub primer: Option<String>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        let count = |what: &str, found: usize| -> Result<()> {
            if found != n {
                return Err(Error::CountMismatch {
                    what: what.into(),
                    expected: n,
                    found,
                });
            }
            Ok(())
        };
        count("labels", self.labels.len())?;
        if let Some(p) = &self.posteriors {
            count("posterior rows", p.n_samples())?;
        }
        if let Some(s) = &self.sample_language {
            count("sample language rows", s.len())?;
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.class_names.len()) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} out of range for {} class names",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    /// Sub-bundle of the given samples; class names and tables are shared.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            posteriors: match &self.posteriors {
                Some(p) => Some(PosteriorMatrix::new(
                    p.data().select_rows(idx),
                    p.class_names().to_vec(),
                )?),
                None => None,
            },
            class_tables: self.class_tables.clone(),
            pseudo_table: self.pseudo_table.clone(),
            sample_language: self.sample_language.as_ref().map(|s| s.select(idx)),
            external: self.external.clone(),
            primer: self.primer.clone(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let features = read_matrix(&dir.join("features.lgdm"))?;
        let labels = read_labels(&dir.join("labels.txt"))?;
        let class_names: Vec<String> = read_names(&dir.join("class_names.txt"))?
            .iter()
            .map(|n| clean_name(n))
            .collect();
        let primer = match fs::read_to_string(dir.join("primer.txt")) {
            Ok(s) => Some(s.trim_end().to_string()),
            Err(_) => None,
        };
        let posteriors = if dir.join("posteriors.lgdm").exists() {
            let names = read_names(&dir.join("pretrain_names.txt"))?
                .iter()
                .map(|n| clean_name(n))
                .collect();
            Some(PosteriorMatrix::new(read_matrix(&dir.join("posteriors.lgdm"))?, names)?)
        } else {
            None
        };
        let mut class_tables = BTreeMap::new();
        let mut pseudo_table = None;
        let mut external = None;
        let mut entries: Vec<_> = fs::read_dir(dir)
            .and_then(|d| d.collect::<std::io::Result<Vec<_>>>())
            .map_err(super::at_path(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if path.extension().and_then(|s| s.to_str()) != Some("names") {
                continue;
            }
            let mpath = dir.join(format!("{stem}.lgdm"));
            if stem == "external" {
                let names = read_names(&path)?.iter().map(|n| clean_name(n)).collect();
                external = Some(ExternalTargets::from_unit_interval(names, read_matrix(&mpath)?)?);
            } else if stem == "lang_pseudo" {
                pseudo_table = Some(load_language_table(&mpath, &path, primer.clone())?);
            } else if stem.starts_with("lang_") {
                class_tables.insert(
                    stem.to_string(),
                    load_language_table(&mpath, &path, primer.clone())?,
                );
            }
        }
        let sample_language = if dir.join("lang_sample.lgdm").exists() {
            Some(super::names::unit_rows(read_matrix(&dir.join("lang_sample.lgdm"))?)?)
        } else {
            None
        };
        let bundle = Self {
            features,
            labels,
            class_names,
            posteriors,
            class_tables,
            pseudo_table,
            sample_language,
            external,
            primer,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Writes every present component; matrices use `dtype`.
    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(super::at_path(dir))?;
        write_matrix(&dir.join("features.lgdm"), &self.features, dtype)?;
        let labels: Vec<String> = self.labels.iter().map(|y| y.to_string()).collect();
        write_names(&dir.join("labels.txt"), &labels)?;
        write_names(&dir.join("class_names.txt"), &self.class_names)?;
        if let Some(p) = &self.posteriors {
            write_matrix(&dir.join("posteriors.lgdm"), p.data(), dtype)?;
            write_names(&dir.join("pretrain_names.txt"), p.class_names())?;
        }
        let mut tables: Vec<(&str, &LanguageTable<f64>)> =
            self.class_tables.iter().map(|(k, v)| (k.as_str(), v)).collect();
        if let Some(t) = &self.pseudo_table {
            tables.push(("lang_pseudo", t));
        }
        for (stem, t) in tables {
            write_matrix(&dir.join(format!("{stem}.lgdm")), t.embeddings().matrix(), dtype)?;
            write_names(&dir.join(format!("{stem}.names")), t.names())?;
        }
        if let Some(s) = &self.sample_language {
            write_matrix(&dir.join("lang_sample.lgdm"), s.matrix(), dtype)?;
        }
        if let Some(x) = &self.external {
            let unit = x.matrix().map(|v| (v + 1.0) / 2.0);
            write_matrix(&dir.join("external.lgdm"), &unit, dtype)?;
            write_names(&dir.join("external.names"), x.names())?;
        }
        if let Some(p) = &self.primer {
            super::atomic_write(&dir.join("primer.txt"), format!("{p}\n").as_bytes())?;
        }
        Ok(())
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = super::read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
