use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Disjoint index lists of a train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..count` with `seed` and cuts it at cumulative fraction
/// boundaries; the union covers `⌊(f_train + f_val + f_test) · count⌋` indices.
pub fn split_indices(count: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::Config(format!("split fractions must be positive, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total} > 1")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut bounds = [0usize; 4];
    let mut cum = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        bounds[i + 1] = ((cum * count as f64 + 1e-9).floor() as usize).min(count);
    }
    let names = ["train", "val", "test"];
    for i in 0..3 {
        if bounds[i + 1] <= bounds[i] {
            return Err(Error::EmptySplit(format!(
                "{} split is empty ({} of {count} samples)",
                names[i], fractions[i]
            )));
        }
    }
    Ok(Split {
        train: order[bounds[0]..bounds[1]].to_vec(),
        val: order[bounds[1]..bounds[2]].to_vec(),
        test: order[bounds[2]..bounds[3]].to_vec(),
    })
}

/// Splits the records of a dataset file.
pub fn split_dataset(path: &std::path::Path, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let (header, _) = super::read_dataset(path)?;
    split_indices(header.sample_count as usize, fractions, seed)
}
