use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::Class;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Stratified k-fold split: each class is shuffled with its own seeded
/// generator and dealt round-robin across folds. Each class starts dealing
/// where the previous one stopped, so fold sizes differ by at most one.
pub fn make_folds(labels: &[Class], num_folds: usize, seed: u64) -> Result<FoldPlan> {
    if num_folds < 2 {
        return Err(Error::InvalidArgument("at least 2 folds are required".into()));
    }
    let mut assignment = vec![0usize; labels.len()];
    let mut next = 0;
    for class in [Class::Normal, Class::Glaucoma] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < num_folds {
            return Err(Error::InvalidArgument(format!(
                "{} {} samples cannot fill {num_folds} folds",
                idx.len(),
                class.name()
            )));
        }
        RngState::derive(seed, class.index() as u64).shuffle(&mut idx);
        for i in idx {
            assignment[i] = next;
            next = (next + 1) % num_folds;
        }
    }
    let folds = (0..num_folds)
        .map(|k| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| assignment[i] == k);
            Fold { train, val }
        })
        .collect();
    Ok(FoldPlan { folds })
}
