//! Browser bindings for three small operations on the synthetic hierarchy
//! fixture. Every export returns a JSON string; the `*_json` functions are
//! the plain Rust versions used by the exports and by native tests.

use std::collections::HashMap;

use langguide::datastore::synth::{synth_dataset, SynthOutput, SynthSpec};
use langguide::eval::{alignment_divergence, recall_at_k};
use langguide::guidance::{batch_similarity, elg_match_loss, masked_image_similarity, GuidanceMode};
use langguide::pseudolabel::class_pseudolabels;
use langguide::simcore::{cosine_similarity_matrix, normalize_rows, row_softmax, SimKind};
use langguide::trainer::{train, EmbedderHead, TrainConfig};
use langguide::Matrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

const MAX_EPOCHS: usize = 100;

fn fixture(seed: u64) -> Result<SynthOutput> {
    synth_dataset(&SynthSpec { seed, ..SynthSpec::default() }).map_err(|e| e.to_string())
}

fn rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn superclass_of(out: &SynthOutput) -> HashMap<&str, usize> {
    out.all_class_names
        .iter()
        .zip(&out.superclass)
        .map(|(n, &s)| (n.as_str(), s))
        .collect()
}

#[derive(Serialize)]
struct Explorer {
    classes: Vec<String>,
    superclasses: Vec<usize>,
    /// Masked image similarities of the raw features.
    image: Vec<Vec<f64>>,
    language: Vec<Vec<f64>>,
    image_softmax: Vec<Vec<f64>>,
    language_softmax: Vec<Vec<f64>>,
    loss: f64,
}

/// Two samples from each of two training classes per superclass (first
/// three superclasses), compared before any training.
pub fn matching_explorer_json(seed: u64, gamma: f64, temperature: f64) -> Result<String> {
    let out = fixture(seed)?;
    let data = &out.train;
    let sup = superclass_of(&out);
    let mut picked_classes: Vec<usize> = Vec::new();
    for s in 0..3 {
        let members = (0..data.class_names.len()).filter(|&c| sup[data.class_names[c].as_str()] == s);
        picked_classes.extend(members.take(2));
    }
    let mut batch = Vec::new();
    for &c in &picked_classes {
        batch.extend(data.labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).take(2));
    }
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let emb = normalize_rows(&data.features.select_rows(&batch)).map_err(|e| e.to_string())?;
    let s_img = cosine_similarity_matrix(&emb, &emb).map_err(|e| e.to_string())?;
    let masked = masked_image_similarity(&s_img, &labels, gamma).map_err(|e| e.to_string())?;
    let table = &data.class_tables["lang_class"];
    let class_sim = table.class_similarity(&data.class_names).map_err(|e| e.to_string())?;
    let s_lang = batch_similarity(&class_sim, &labels, SimKind::Language);
    let loss = elg_match_loss(&masked, &s_lang, gamma, temperature).map_err(|e| e.to_string())?;
    let p = row_softmax(&masked, 0.0, temperature).map_err(|e| e.to_string())?;
    let q = row_softmax(&s_lang, gamma, temperature).map_err(|e| e.to_string())?;
    let classes: Vec<String> = labels.iter().map(|&y| data.class_names[y].clone()).collect();
    let report = Explorer {
        superclasses: classes.iter().map(|c| sup[c.as_str()]).collect(),
        classes,
        image: rows(&masked.data),
        language: rows(&s_lang.data),
        image_softmax: rows(p.matrix()),
        language_softmax: rows(q.matrix()),
        loss: loss.value,
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Arm {
    omega: f64,
    loss: Vec<f64>,
    val_recall1: Vec<f64>,
    test_recall: [f64; 2],
    divergence: f64,
    best_epoch: usize,
}

#[derive(Serialize)]
struct Comparison {
    baseline: Arm,
    guided: Arm,
}

fn run_arm(out: &SynthOutput, seed: u64, omega: f64, epochs: usize) -> Result<Arm> {
    let mut cfg = TrainConfig::desk_scale();
    cfg.seed = seed;
    cfg.epochs = epochs;
    cfg.guidance.mode = if omega > 0.0 { GuidanceMode::Elg } else { GuidanceMode::None };
    cfg.guidance.omega = omega;
    let run = train(&cfg, &out.train).map_err(|e| e.to_string())?;
    let head: &EmbedderHead<f64> = &run.checkpoint;
    let test = head.embed(&out.test.features).map_err(|e| e.to_string())?;
    let recall = recall_at_k(&test, &out.test.labels, &[1, 2]).map_err(|e| e.to_string())?;
    let seen = head.embed(&out.train.features).map_err(|e| e.to_string())?;
    let divergence = alignment_divergence(
        &seen,
        &out.train.labels,
        &out.train.class_names,
        &out.train.class_tables["lang_class"],
        cfg.guidance.gamma_lang,
        cfg.guidance.temperature,
    )
    .map_err(|e| e.to_string())?;
    Ok(Arm {
        omega,
        loss: run.history.epochs.iter().map(|e| e.loss).collect(),
        val_recall1: run.history.epochs.iter().map(|e| e.val_recall1).collect(),
        test_recall: [recall[&1], recall[&2]],
        divergence,
        best_epoch: run.best_epoch,
    })
}

/// Trains the baseline and an ELG head with the same seed.
pub fn train_compare_json(seed: u64, omega: f64, epochs: usize) -> Result<String> {
    if !(omega > 0.0) {
        return Err(format!("omega must be > 0, got {omega}"));
    }
    if epochs == 0 || epochs > MAX_EPOCHS {
        return Err(format!("epochs must be in 1..={MAX_EPOCHS}"));
    }
    let out = fixture(seed)?;
    let report = Comparison {
        baseline: run_arm(&out, seed, 0.0, epochs)?,
        guided: run_arm(&out, seed, omega, epochs)?,
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ClassLabels {
    class: String,
    superclass: usize,
    pseudolabels: Vec<String>,
    masses: Vec<f64>,
}

/// Top-k pretrain classes for every training class from the fixture's
/// classifier posteriors.
pub fn pseudolabels_json(seed: u64, k: usize) -> Result<String> {
    let out = fixture(seed)?;
    let data = &out.train;
    let post = data.posteriors.as_ref().ok_or("fixture has no posteriors")?;
    let assign = class_pseudolabels(post, &data.labels, k).map_err(|e| e.to_string())?;
    let sup = superclass_of(&out);
    let report: Vec<ClassLabels> = data
        .class_names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassLabels {
            class: name.clone(),
            superclass: sup[name.as_str()],
            pseudolabels: assign.labels[c].clone(),
            masses: assign.masses[c].clone(),
        })
        .collect();
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = matchingExplorer)]
pub fn matching_explorer(seed: u32, gamma: f64, temperature: f64) -> std::result::Result<String, JsError> {
    matching_explorer_json(seed.into(), gamma, temperature).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trainCompare)]
pub fn train_compare(seed: u32, omega: f64, epochs: u32) -> std::result::Result<String, JsError> {
    train_compare_json(seed.into(), omega, epochs as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pseudolabels)]
pub fn pseudolabels(seed: u32, k: u32) -> std::result::Result<String, JsError> {
    pseudolabels_json(seed.into(), k as usize).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn explorer_rows_are_distributions() {
        let v: Value = serde_json::from_str(&matching_explorer_json(0, 0.5, 1.0).unwrap()).unwrap();
        let p = v["image_softmax"].as_array().unwrap();
        assert_eq!(p.len(), 12);
        for row in p {
            let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(v["loss"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn explorer_rejects_bad_temperature() {
        assert!(matching_explorer_json(0, 0.5, 0.0).is_err());
    }

    #[test]
    fn comparison_reports_both_arms() {
        let v: Value = serde_json::from_str(&train_compare_json(1, 5.0, 3).unwrap()).unwrap();
        for arm in ["baseline", "guided"] {
            assert_eq!(v[arm]["loss"].as_array().unwrap().len(), 3);
            let r1 = v[arm]["test_recall"][0].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&r1));
        }
        assert!(train_compare_json(1, 5.0, 0).is_err());
        assert!(train_compare_json(1, 0.0, 3).is_err());
    }

    #[test]
    fn pseudolabels_cover_every_training_class() {
        let v: Value = serde_json::from_str(&pseudolabels_json(0, 3).unwrap()).unwrap();
        let classes = v.as_array().unwrap();
        assert_eq!(classes.len(), 16);
        for c in classes {
            let masses: Vec<f64> = c["masses"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert_eq!(masses.len(), 3);
            assert!(masses.windows(2).all(|w| w[0] >= w[1]));
        }
        assert!(pseudolabels_json(0, 0).is_err());
    }
}
