//! Seeded k-fold cross-validation over a hyperparameter grid.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::StratumData;

/// One grid cell. Field order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default)]
    pub gamma_local: f64,
    #[serde(default)]
    pub alpha: f64,
}

impl HyperParams {
    fn tie_key(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.gamma_local, self.alpha]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellScore {
    pub params: HyperParams,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub best: HyperParams,
    pub best_index: usize,
    pub cells: Vec<CellScore>,
}

/// Fold id of every row, per stratum. Rows are shuffled within each stratum
/// and dealt round-robin, continuing the deal across strata so every fold
/// gets a share of every stratum and the fold sizes differ by at most one.
pub fn fold_assignment(sizes: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = rng.gen_range(0..folds);
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut ids = vec![0; n];
        for row in order {
            ids[row] = next;
            next = (next + 1) % folds;
        }
        out.push(ids);
    }
    Ok(out)
}

fn subset(d: &StratumData, rows: &[usize]) -> StratumData {
    if rows.is_empty() {
        return StratumData::empty(d.dim());
    }
    StratumData::new(d.features().select_rows(rows), d.targets().select_rows(rows))
        .expect("row subset keeps dimensions consistent")
}

/// `(train, held_out)` strata for fold `f`.
pub fn split_fold(
    strata: &[StratumData],
    ids: &[Vec<usize>],
    f: usize,
) -> (Vec<StratumData>, Vec<StratumData>) {
    strata
        .iter()
        .zip(ids)
        .map(|(d, id)| {
            let (tr, va): (Vec<usize>, Vec<usize>) = (0..d.count()).partition(|&r| id[r] != f);
            (subset(d, &tr), subset(d, &va))
        })
        .unzip()
}

/// Scores every grid cell on every fold (lower is better) and returns the
/// best cell. Ties go to the smaller `(lambda1, lambda2, gamma_local,
/// alpha)` in that order.
pub fn kfold_cv<F>(
    strata: &[StratumData],
    folds: usize,
    seed: u64,
    grid: &[HyperParams],
    score: F,
) -> Result<CvResult>
where
    F: Fn(&HyperParams, &[StratumData], &[StratumData]) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty hyperparameter grid".into()));
    }
    let sizes: Vec<usize> = strata.iter().map(StratumData::count).collect();
    let ids = fold_assignment(&sizes, folds, seed)?;
    let splits: Vec<_> = (0..folds).map(|f| split_fold(strata, &ids, f)).collect();
    if let Some(f) = splits.iter().position(|(_, va)| va.iter().all(|d| d.count() == 0)) {
        return Err(Error::Data(format!("fold {f} has no held-out samples")));
    }
    let cells: Vec<CellScore> = grid
        .par_iter()
        .map(|params| {
            let fold_scores = splits
                .iter()
                .map(|(tr, va)| score(params, tr, va))
                .collect::<Result<Vec<f64>>>()?;
            let mean = fold_scores.iter().sum::<f64>() / folds as f64;
            Ok(CellScore { params: *params, fold_scores, mean })
        })
        .collect::<Result<_>>()?;
    let best_index = (0..cells.len())
        .min_by(|&a, &b| {
            let (ca, cb) = (&cells[a], &cells[b]);
            ca.mean
                .total_cmp(&cb.mean)
                .then_with(|| {
                    let (ka, kb) = (ca.params.tie_key(), cb.params.tie_key());
                    ka.iter()
                        .zip(&kb)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .then(a.cmp(&b))
        })
        .expect("grid is nonempty");
    Ok(CvResult { best: cells[best_index].params, best_index, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strata() -> Vec<StratumData> {
        (0..3)
            .map(|k| {
                let rows: Vec<Vec<f64>> = (0..7 + k).map(|i| vec![i as f64, 1.0]).collect();
                let ys: Vec<f64> = (0..7 + k).map(|i| (i * k) as f64).collect();
                StratumData::from_rows(&rows, &ys, 2).unwrap()
            })
            .collect()
    }

    fn held_out_mean(_: &HyperParams, _: &[StratumData], va: &[StratumData]) -> Result<f64> {
        let pooled = StratumData::pooled(va, 2);
        Ok(pooled.targets().mean())
    }

    #[test]
    fn single_cell_grid() {
        let g = [HyperParams { lambda1: 0.3, ..Default::default() }];
        let r = kfold_cv(&strata(), 5, 1, &g, held_out_mean).unwrap();
        assert_eq!(r.best, g[0]);
        assert_eq!(r.cells[0].fold_scores.len(), 5);
    }

    #[test]
    fn duplicated_cells_score_identically() {
        let p = HyperParams { lambda2: 1.0, ..Default::default() };
        let score = |h: &HyperParams, tr: &[StratumData], va: &[StratumData]| {
            Ok(h.lambda2 * tr.len() as f64 + held_out_mean(h, tr, va)?)
        };
        let r = kfold_cv(&strata(), 4, 9, &[p, p], score).unwrap();
        assert_eq!(r.cells[0].fold_scores, r.cells[1].fold_scores);
        assert_eq!(r.best_index, 0);
    }

    #[test]
    fn ties_prefer_smaller_lambdas() {
        let grid = [
            HyperParams { lambda1: 2.0, lambda2: 0.0, gamma_local: 0.0, alpha: 0.1 },
            HyperParams { lambda1: 1.0, lambda2: 5.0, gamma_local: 0.0, alpha: 0.1 },
            HyperParams { lambda1: 1.0, lambda2: 5.0, gamma_local: 0.0, alpha: 0.01 },
        ];
        let r = kfold_cv(&strata(), 3, 0, &grid, |_, _, _| Ok(1.0)).unwrap();
        assert_eq!(r.best_index, 2);
    }

    #[test]
    fn too_few_rows_for_folds() {
        let tiny = vec![StratumData::from_rows(&[vec![1.0]], &[1.0], 1).unwrap()];
        let r = kfold_cv(&tiny, 3, 0, &[HyperParams::default()], |_, _, _| Ok(0.0));
        assert!(matches!(r, Err(Error::Data(_))));
        assert!(kfold_cv(&strata(), 1, 0, &[HyperParams::default()], |_, _, _| Ok(0.0)).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_rows(
            sizes in proptest::collection::vec(0usize..30, 1..8),
            folds in 2usize..7,
            seed in 0u64..500,
        ) {
            let ids = fold_assignment(&sizes, folds, seed).unwrap();
            let mut per_fold = vec![0usize; folds];
            for (id, &n) in ids.iter().zip(&sizes) {
                prop_assert_eq!(id.len(), n);
                for &f in id {
                    prop_assert!(f < folds);
                    per_fold[f] += 1;
                }
            }
            let total: usize = sizes.iter().sum();
            prop_assert_eq!(per_fold.iter().sum::<usize>(), total);
            let spread = per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap();
            prop_assert!(spread <= 1);
        }
    }
}
