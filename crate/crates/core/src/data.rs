//! CSV ingestion, binning into strata, product-of-paths prior graphs and
//! train/validation/test splitting.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WeightMatrix;
use crate::losses::{LossSpec, StratumData};

/// Largest number of strata [`path_product_w0`] builds by default.
pub const MAX_STRATA: usize = 10_000;

/// Numeric table read from a CSV file with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(Error::Data("empty file: no header row".into()));
        }
        let mut rows = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(rec.len());
            for (col, cell) in rec.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!(
                        "row {}: column '{}' has non-numeric value '{cell}'",
                        idx + 1,
                        headers[col]
                    ))
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data("empty file: no data rows".into()));
        }
        Ok(Table { headers, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[c]).collect())
    }
}

/// Equal-count bins. The `i`-th edge is the `ceil(i n / b)`-th smallest
/// value; a value equal to an edge goes to the lower bin.
pub fn quantile_bins(values: &[f64], b: usize) -> Vec<usize> {
    if values.is_empty() || b <= 1 {
        return vec![0; values.len()];
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..b).map(|i| sorted[(i * n).div_ceil(b) - 1]).collect();
    assign_bins(values, &edges)
}

/// Equal-count bins that split ties: rows are ranked by value (then by
/// position) and rank `r` goes to bin `floor(r b / n)`.
pub fn rank_bins(values: &[f64], b: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut bins = vec![0; n];
    for (rank, &row) in order.iter().enumerate() {
        bins[row] = rank * b.max(1) / n;
    }
    bins
}

/// Equal-width bins over `[min, max]`.
pub fn width_bins(values: &[f64], b: usize) -> Vec<usize> {
    if values.is_empty() || b <= 1 {
        return vec![0; values.len()];
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = (1..b).map(|i| lo + (hi - lo) * i as f64 / b as f64).collect();
    assign_bins(values, &edges)
}

fn assign_bins(values: &[f64], edges: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|&v| edges.iter().filter(|&&e| e < v).count())
        .collect()
}

/// Row-major index of a tuple of bin indices.
pub fn stratum_index(bins: &[usize], counts: &[usize]) -> usize {
    bins.iter().zip(counts).fold(0, |acc, (&b, &c)| acc * c + b)
}

/// Cartesian product of weighted path graphs, one per stratification
/// feature. Nodes are numbered row-major over the bin tuples.
pub fn path_product_w0(bin_counts: &[usize], gammas: &[f64]) -> Result<WeightMatrix> {
    path_product_w0_with_max(bin_counts, gammas, MAX_STRATA)
}

pub fn path_product_w0_with_max(
    bin_counts: &[usize],
    gammas: &[f64],
    max_strata: usize,
) -> Result<WeightMatrix> {
    if bin_counts.len() != gammas.len() || bin_counts.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} bin counts but {} edge weights",
            bin_counts.len(),
            gammas.len()
        )));
    }
    if let Some(&g) = gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
        return Err(Error::InvalidParameter(format!("path edge weight {g} is not >= 0")));
    }
    if bin_counts.contains(&0) {
        return Err(Error::InvalidParameter("bin counts must be >= 1".into()));
    }
    let mut k: usize = 1;
    for &c in bin_counts {
        k = k.checked_mul(c).filter(|&k| k <= max_strata).ok_or(Error::TooLarge(max_strata))?;
    }
    let mut w = DMatrix::zeros(k, k);
    // Stride of coordinate d in the row-major numbering.
    let mut strides = vec![1usize; bin_counts.len()];
    for d in (0..bin_counts.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * bin_counts[d + 1];
    }
    for node in 0..k {
        for (d, &c) in bin_counts.iter().enumerate() {
            let coord = (node / strides[d]) % c;
            if coord + 1 < c {
                let other = node + strides[d];
                w[(node, other)] = gammas[d];
                w[(other, node)] = gammas[d];
            }
        }
    }
    WeightMatrix::new(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    #[default]
    Quantile,
    /// Equal counts with ties split by row order.
    Rank,
    Width,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratColumn {
    pub column: String,
    pub bins: usize,
    /// Path-graph edge weight along this feature.
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub binning: Binning,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub column: String,
    /// Classification: values `>= binarize_at` are the positive class.
    #[serde(default)]
    pub binarize_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    #[serde(default)]
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "split fractions must be nonnegative and sum to 1, got {parts:?}"
            )));
        }
        if self.train <= 0.0 {
            return Err(Error::InvalidParameter("training fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Shuffled `(train, val, test)` row indices, each sorted ascending.
pub fn split_indices(n: usize, f: &SplitFractions, seed: u64) -> Result<[Vec<usize>; 3]> {
    f.validate()?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((f.train * n as f64).round() as usize).min(n);
    let n_val = ((f.val * n as f64).round() as usize).min(n - n_train);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok([train, val, test])
}

/// Per-column mean and sample standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Data("standardization needs at least two training rows".into()));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / (n - 1) as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub target: TargetSpec,
    pub features: Vec<String>,
    pub strata: Vec<StratColumn>,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default = "yes")]
    pub standardize: bool,
    pub split: SplitFractions,
}

fn yes() -> bool {
    true
}

/// Data grouped by stratum, split three ways.
#[derive(Debug, Clone)]
pub struct StratifiedDataset {
    pub bin_counts: Vec<usize>,
    pub feature_names: Vec<String>,
    pub train: Vec<StratumData>,
    pub val: Vec<StratumData>,
    pub test: Vec<StratumData>,
    pub standardizer: Option<Standardizer>,
}

impl StratifiedDataset {
    pub fn num_strata(&self) -> usize {
        self.train.len()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }
}

fn encode_target(raw: f64, target: &TargetSpec, loss: &LossSpec) -> f64 {
    let positive = match target.binarize_at {
        Some(t) => raw >= t,
        None => return raw,
    };
    match loss {
        LossSpec::Logistic => {
            if positive {
                1.0
            } else {
                -1.0
            }
        }
        _ => {
            if positive {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn ingest_csv(
    path: impl AsRef<Path>,
    cfg: &IngestConfig,
    loss: &LossSpec,
    seed: u64,
) -> Result<StratifiedDataset> {
    ingest_table(&Table::read(path)?, cfg, loss, seed)
}

/// Bins strata on the full table, splits rows, standardizes features with
/// training statistics and groups rows by stratum.
pub fn ingest_table(
    table: &Table,
    cfg: &IngestConfig,
    loss: &LossSpec,
    seed: u64,
) -> Result<StratifiedDataset> {
    if cfg.strata.is_empty() {
        return Err(Error::InvalidParameter("at least one stratification column is required".into()));
    }
    let y_col = table.column_index(&cfg.target.column)?;
    let x_cols: Vec<usize> =
        cfg.features.iter().map(|f| table.column_index(f)).collect::<Result<_>>()?;
    let mut bin_counts = Vec::new();
    let mut per_col_bins = Vec::new();
    for s in &cfg.strata {
        if s.bins == 0 {
            return Err(Error::InvalidParameter(format!("column '{}' has bin count 0", s.column)));
        }
        let values = table.column(&s.column)?;
        per_col_bins.push(match s.binning {
            Binning::Quantile => quantile_bins(&values, s.bins),
            Binning::Rank => rank_bins(&values, s.bins),
            Binning::Width => width_bins(&values, s.bins),
        });
        bin_counts.push(s.bins);
    }
    let k: usize = bin_counts.iter().product();
    if k > MAX_STRATA {
        return Err(Error::TooLarge(MAX_STRATA));
    }
    let n = table.rows.len();
    let strata_of: Vec<usize> = (0..n)
        .map(|r| {
            let tuple: Vec<usize> = per_col_bins.iter().map(|b| b[r]).collect();
            stratum_index(&tuple, &bin_counts)
        })
        .collect();

    let [train, val, test] = split_indices(n, &cfg.split, seed)?;
    let raw_x = |r: usize| -> Vec<f64> { x_cols.iter().map(|&c| table.rows[r][c]).collect() };
    let standardizer = if cfg.standardize && !x_cols.is_empty() {
        let rows: Vec<Vec<f64>> = train.iter().map(|&r| raw_x(r)).collect();
        Some(Standardizer::fit(&rows)?)
    } else {
        None
    };
    let mut feature_names = cfg.features.clone();
    if cfg.intercept {
        feature_names.push("intercept".into());
    }
    let dim = feature_names.len();
    if dim == 0 {
        return Err(Error::InvalidParameter("no features and no intercept".into()));
    }

    let group = |rows: &[usize]| -> Result<Vec<StratumData>> {
        let mut xs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
        let mut ys: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &r in rows {
            let mut x = raw_x(r);
            if let Some(s) = &standardizer {
                x = s.apply(&x);
            }
            if cfg.intercept {
                x.push(1.0);
            }
            let s = strata_of[r];
            xs[s].push(x);
            ys[s].push(encode_target(table.rows[r][y_col], &cfg.target, loss));
        }
        xs.iter().zip(&ys).map(|(x, y)| StratumData::from_rows(x, y, dim)).collect()
    };

    Ok(StratifiedDataset {
        bin_counts,
        feature_names,
        train: group(&train)?,
        val: group(&val)?,
        test: group(&test)?,
        standardizer,
    })
}

/// Stacks stratum data into one matrix, for callers that need all rows.
pub fn stack(strata: &[StratumData], dim: usize) -> (DMatrix<f64>, DVector<f64>) {
    let pooled = StratumData::pooled(strata, dim);
    (pooled.features().clone(), pooled.targets().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn quantile_bin_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile_bins(&v, 2), [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(quantile_bins(&[3.0; 7], 4), vec![0; 7]);
        assert_eq!(quantile_bins(&[2.0, 1.0, 4.0, 3.0], 2), [0, 0, 1, 1]);
    }

    #[test]
    fn quantile_bins_balanced_on_continuous_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        for b in [3, 7, 10] {
            let bins = quantile_bins(&v, b);
            let mut counts = vec![0usize; b];
            bins.iter().for_each(|&i| counts[i] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn width_bins_split_range() {
        assert_eq!(width_bins(&[0.0, 0.4, 0.6, 1.0], 2), [0, 0, 1, 1]);
    }

    #[test]
    fn rank_bins_split_ties() {
        assert_eq!(rank_bins(&[0.0, 0.0, 0.0, 0.0, 5.0, 1.0], 3), [0, 0, 1, 1, 2, 2]);
        let counts = rank_bins(&[2.0; 10], 4).iter().fold([0; 4], |mut c, &b| {
            c[b] += 1;
            c
        });
        assert_eq!(counts, [3, 2, 3, 2]);
    }

    #[test]
    fn path_product_examples() {
        let w = path_product_w0(&[3], &[5.0]).unwrap();
        assert_eq!(w.upper_triangle(), vec![5.0, 0.0, 5.0]);

        let w = path_product_w0(&[2, 2], &[1.0, 1.0]).unwrap();
        assert_eq!(w.degrees(), vec![2.0; 4]);
        assert_eq!(w.get(0, 3), 0.0);
        assert_eq!(w.get(1, 2), 0.0);

        let (a, b) = (0.3, 1.7);
        let w = path_product_w0(&[10, 10], &[a, b]).unwrap();
        let interior = stratum_index(&[4, 6], &[10, 10]);
        assert_abs_diff_eq!(w.degrees()[interior], 2.0 * a + 2.0 * b, epsilon = 1e-12);
        assert_eq!(w.get(interior, stratum_index(&[5, 6], &[10, 10])), a);
        assert_eq!(w.get(interior, stratum_index(&[4, 7], &[10, 10])), b);

        assert!(matches!(path_product_w0(&[200, 200], &[1.0, 1.0]), Err(Error::TooLarge(_))));
        assert!(path_product_w0(&[2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn path_product_is_connected() {
        let w = path_product_w0(&[3, 4, 2], &[0.5, 1.0, 2.0]).unwrap();
        let k = w.dim();
        let mut seen = vec![false; k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..k {
                if w.get(i, j) > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn small_table() -> Table {
        Table::from_reader("z,x,y\n1,10,0\n2,20,1\n3,30,0\n4,40,1\n".as_bytes()).unwrap()
    }

    fn cfg(split: SplitFractions) -> IngestConfig {
        IngestConfig {
            target: TargetSpec { column: "y".into(), binarize_at: None },
            features: vec!["x".into()],
            strata: vec![StratColumn { column: "z".into(), bins: 2, gamma: 1.0, binning: Binning::Quantile }],
            intercept: true,
            standardize: true,
            split,
        }
    }

    #[test]
    fn four_rows_two_bins() {
        let all = SplitFractions { train: 1.0, val: 0.0, test: 0.0 };
        let ds = ingest_table(&small_table(), &cfg(all), &LossSpec::LeastSquares, 0).unwrap();
        assert_eq!(ds.train.iter().map(StratumData::count).collect::<Vec<_>>(), [2, 2]);
        assert_eq!(ds.feature_names, ["x", "intercept"]);
        let (x, _) = stack(&ds.train, 2);
        let mean = x.column(0).mean();
        let sd = (x.column(0).map(|v| (v - mean).powi(2)).sum() / 3.0).sqrt();
        assert!(mean.abs() <= 1e-10);
        assert!((sd - 1.0).abs() <= 1e-10);
        assert!(x.column(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn test_rows_use_training_statistics() {
        let s = Standardizer::fit(&[vec![1.0], vec![3.0]]).unwrap();
        // mean 2, sample std sqrt(2)
        assert_abs_diff_eq!(s.apply(&[10.0])[0], 8.0 / 2f64.sqrt(), epsilon = 1e-12);

        let f = SplitFractions { train: 0.5, val: 0.0, test: 0.5 };
        let t = small_table();
        let ds = ingest_table(&t, &cfg(f), &LossSpec::LeastSquares, 3).unwrap();
        let st = ds.standardizer.clone().unwrap();
        let [train, _, test] = split_indices(4, &f, 3).unwrap();
        let tx: Vec<f64> = train.iter().map(|&r| t.rows[r][1]).collect();
        let m = (tx[0] + tx[1]) / 2.0;
        let sd = ((tx[0] - m).powi(2) + (tx[1] - m).powi(2)).sqrt();
        assert_abs_diff_eq!(st.mean[0], m, epsilon = 1e-12);
        assert_abs_diff_eq!(st.std[0], sd, epsilon = 1e-12);
        let (xt, _) = stack(&ds.test, 2);
        let mut want: Vec<f64> = test.iter().map(|&r| (t.rows[r][1] - m) / sd).collect();
        let mut got: Vec<f64> = xt.column(0).iter().cloned().collect();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (a, b) in got.iter().zip(&want) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ingestion_errors() {
        let t = small_table();
        let mut c = cfg(SplitFractions { train: 1.0, val: 0.0, test: 0.0 });
        c.features = vec!["nope".into()];
        let e = ingest_table(&t, &c, &LossSpec::LeastSquares, 0).unwrap_err();
        assert!(e.to_string().contains("nope"));

        let e = Table::from_reader("a,b\n1,2\n3,x\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("row 2"), "{e}");
        assert!(Table::from_reader("".as_bytes()).is_err());
        assert!(Table::from_reader("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn logistic_targets_are_signed() {
        let mut c = cfg(SplitFractions { train: 1.0, val: 0.0, test: 0.0 });
        c.target.binarize_at = Some(1.0);
        let ds = ingest_table(&small_table(), &c, &LossSpec::Logistic, 0).unwrap();
        let (_, y) = stack(&ds.train, 2);
        assert!(y.iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 2);
    }

    #[test]
    fn ingestion_is_deterministic() {
        let f = SplitFractions { train: 0.5, val: 0.25, test: 0.25 };
        let a = ingest_table(&small_table(), &cfg(f), &LossSpec::LeastSquares, 11).unwrap();
        let b = ingest_table(&small_table(), &cfg(f), &LossSpec::LeastSquares, 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..200, a in 0.05f64..0.9, seed in 0u64..1000) {
            let rest = 1.0 - a;
            let f = SplitFractions { train: a, val: rest / 2.0, test: rest / 2.0 };
            let [tr, va, te] = split_indices(n, &f, seed).unwrap();
            let mut all: Vec<usize> = tr.into_iter().chain(va).chain(te).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
