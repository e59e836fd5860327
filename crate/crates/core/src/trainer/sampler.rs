use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Class-balanced batch: `batch_size / samples_per_class` distinct classes,
/// `samples_per_class` samples each. Classes with too few samples are drawn
/// with replacement. Returns positions into `labels`.
pub fn sample_batch<R: Rng>(
    labels: &[usize],
    batch_size: usize,
    samples_per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if samples_per_class == 0 || batch_size % samples_per_class != 0 {
        return Err(Error::Config(format!(
            "batch_size {batch_size} is not a multiple of samples_per_class {samples_per_class}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let needed = batch_size / samples_per_class;
    if by_class.len() < needed {
        return Err(Error::InsufficientClasses {
            needed,
            available: by_class.len(),
        });
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let mut batch = Vec::with_capacity(batch_size);
    for members in classes.choose_multiple(rng, needed) {
        if members.len() >= samples_per_class {
            batch.extend(members.choose_multiple(rng, samples_per_class));
        } else {
            for _ in 0..samples_per_class {
                batch.push(members[rng.gen_range(0..members.len())]);
            }
        }
    }
    Ok(batch)
}
