use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint train/test class partition for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub class_ids: Vec<usize>,
    pub folds: usize,
    pub fold_index: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl SplitConfig {
    pub fn classes(&self, partition: Partition) -> &[usize] {
        match partition {
            Partition::Train => &self.train_classes,
            Partition::Test => &self.test_classes,
        }
    }
}

/// Contiguous folds over the sorted class ids; the first `n % folds` folds
/// take one extra class. Fold `fold_index` becomes the test set.
pub fn build_splits(class_ids: &[usize], folds: usize, fold_index: usize) -> Result<SplitConfig> {
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    if folds > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{folds} folds requested for {} classes",
            ids.len()
        )));
    }
    if fold_index >= folds {
        return Err(Error::InvalidArgument(format!(
            "fold index {fold_index} out of range for {folds} folds"
        )));
    }
    let base = ids.len() / folds;
    let extra = ids.len() % folds;
    let start: usize = (0..fold_index).map(|f| base + usize::from(f < extra)).sum();
    let len = base + usize::from(fold_index < extra);
    let test_classes = ids[start..start + len].to_vec();
    let train_classes = ids
        .iter()
        .copied()
        .filter(|c| !test_classes.contains(c))
        .collect();
    Ok(SplitConfig {
        class_ids: ids,
        folds,
        fold_index,
        train_classes,
        test_classes,
    })
}
