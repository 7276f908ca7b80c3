use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Held-out dev/test halves plus cross-validation folds over the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
    /// Training rows whose labels were dropped.
    pub unlabeled: Vec<usize>,
    pub label_fraction: f64,
}

impl SplitPlan {
    /// Every non-holdout row, in fold order.
    pub fn train_pool(&self) -> Vec<usize> {
        self.folds.concat()
    }

    /// All folds except `fold`.
    pub fn fold_train(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }

    pub fn fold_valid(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Training rows that keep their labels.
    pub fn labeled(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().copied().filter(|r| self.unlabeled.binary_search(r).is_err()).collect()
    }

    /// Positions within `rows` whose rows keep their labels, for
    /// [`Trainer::set_labeled_rows`](crate::training::Trainer::set_labeled_rows)
    /// on `ds.subset(rows)`.
    pub fn labeled_positions(&self, rows: &[usize]) -> Vec<usize> {
        (0..rows.len()).filter(|&i| self.unlabeled.binary_search(&rows[i]).is_err()).collect()
    }

    /// Panics unless the parts are disjoint and cover `0..n`.
    pub fn assert_partition(&self, n: usize) {
        let mut seen = vec![false; n];
        for &i in self.dev.iter().chain(&self.test).chain(self.folds.iter().flatten()) {
            assert!(!seen[i], "row {i} appears twice");
            seen[i] = true;
        }
        assert!(seen.iter().all(|s| *s), "rows missing from the split");
    }
}

/// Stratified by label when labels exist. Each class contributes 20% of its
/// rows to the holdout, alternating dev and test; the remainder is dealt
/// round-robin into `folds`.
pub fn kfold_split<R: Rng + ?Sized>(
    ds: &Dataset,
    folds: usize,
    label_fraction: f64,
    rng: &mut R,
) -> Result<SplitPlan, DataError> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(DataError::Invalid(format!("label fraction {label_fraction} outside (0, 1]")));
    }
    if folds == 0 || ds.len() < folds {
        return Err(DataError::Invalid(format!("{} rows cannot fill {folds} folds", ds.len())));
    }
    let strata: Vec<Vec<usize>> = match &ds.labels {
        Some(labels) => {
            let mut s = vec![Vec::new(); ds.num_classes()];
            for (i, &l) in labels.iter().enumerate() {
                s[l].push(i);
            }
            s
        }
        None => vec![(0..ds.len()).collect()],
    };
    let mut plan = SplitPlan {
        dev: vec![],
        test: vec![],
        folds: vec![Vec::new(); folds],
        unlabeled: vec![],
        label_fraction,
    };
    let (mut holdout_turn, mut fold_turn) = (0usize, 0usize);
    for mut rows in strata {
        rows.shuffle(rng);
        let hold = (rows.len() as f64 * HOLDOUT_FRACTION).round() as usize;
        for &i in &rows[..hold] {
            if holdout_turn % 2 == 0 { plan.dev.push(i) } else { plan.test.push(i) }
            holdout_turn += 1;
        }
        let rest = &rows[hold..];
        for &i in rest {
            plan.folds[fold_turn % folds].push(i);
            fold_turn += 1;
        }
        let drop = rest.len() - (rest.len() as f64 * label_fraction).round() as usize;
        let mut pool = rest.to_vec();
        pool.shuffle(rng);
        plan.unlabeled.extend_from_slice(&pool[..drop]);
    }
    plan.unlabeled.sort_unstable();
    plan.assert_partition(ds.len());
    Ok(plan)
}
