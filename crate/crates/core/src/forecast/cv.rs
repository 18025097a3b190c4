use serde::{Deserialize, Serialize};

use super::net::RecurrentNetConfig;
use super::train::{one_step_predictions, train};
use crate::error::{Error, Result};
use crate::eval::metrics::{regression_metrics, RegressionMetrics};
use crate::exec::Exec;
use crate::model::MeshDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Training hours are `[0, train_end)`.
    pub train_end: usize,
    /// Test target hours are `[train_end, test_end)`.
    pub test_end: usize,
}

/// Rolling-origin folds over `hours` split into `k + 1` equal blocks
/// (floored): fold `i` trains on blocks `0..i` and tests on block `i`.
pub fn fold_boundaries(hours: usize, k: usize) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidConfig("cross-validation needs k >= 2".into()));
    }
    if hours < k + 1 {
        return Err(Error::Insufficient(format!("{hours} hours cannot form {k} folds")));
    }
    Ok((1..=k)
        .map(|i| Fold {
            train_end: i * hours / (k + 1),
            test_end: (i + 1) * hours / (k + 1),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: Fold,
    pub best_epoch: usize,
    pub metrics: RegressionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mean: RegressionMetrics,
}

/// Trains a fresh network per fold on the data before the fold's origin
/// and scores one-step predictions for every sensor on the following
/// block. Folds run through `exec`.
pub fn cross_validate(cfg: &RecurrentNetConfig, d: &MeshDataset, k: usize, exec: Exec) -> Result<CrossValidation> {
    let folds = fold_boundaries(d.hours(), k)?;
    let results = exec.map(&folds, |fold| -> Result<FoldResult> {
        let history = d.slice_hours(0, fold.train_end)?;
        let (state, report) = train(cfg, &history, Exec::Sequential)?;
        let (pred, truth) = one_step_predictions(&state, d, fold.train_end, fold.test_end, Exec::Sequential)?;
        Ok(FoldResult {
            fold: *fold,
            best_epoch: report.best_epoch,
            metrics: regression_metrics(&pred, &truth)?,
        })
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = folds.len() as f64;
    let mse = folds.iter().map(|f| f.metrics.mse).sum::<f64>() / n;
    let mean = RegressionMetrics {
        mae: folds.iter().map(|f| f.metrics.mae).sum::<f64>() / n,
        mse,
        rmse: mse.sqrt(),
    };
    Ok(CrossValidation { folds, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_days_in_thirds() {
        let folds = fold_boundaries(90 * 24, 2).unwrap();
        assert_eq!(
            folds,
            vec![
                Fold { train_end: 720, test_end: 1440 },
                Fold { train_end: 1440, test_end: 2160 }
            ]
        );
    }

    #[test]
    fn folds_never_look_ahead() {
        for hours in [10, 97, 2160] {
            for k in 2..6 {
                let folds = fold_boundaries(hours, k).unwrap();
                assert_eq!(folds.len(), k);
                assert_eq!(folds.last().unwrap().test_end, hours);
                for w in folds.windows(2) {
                    assert_eq!(w[0].test_end, w[1].train_end);
                }
                assert!(folds.iter().all(|f| f.train_end < f.test_end));
            }
        }
        assert!(fold_boundaries(100, 1).is_err());
    }
}
