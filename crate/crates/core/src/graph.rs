//! Graph weight algebra.
//!
//! Weight matrices are dense, symmetric, nonnegative and have a zero
//! diagonal. The Laplacian map `G(W)`, the regularized log-determinant
//! `log det(mu I + G(W))` and its gradient live here, together with a
//! brute-force spanning-forest enumerator used to check the matrix-forest
//! identity in tests.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric, nonnegative, zero-diagonal `K x K` edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    /// Validates all three invariants, reporting the first offending entry
    /// in row-major order.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Dimension(format!(
                "weight matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.nrows() == 0 {
            return Err(Error::Dimension("weight matrix must have K >= 1".into()));
        }
        let k = entries.nrows();
        for i in 0..k {
            for j in 0..k {
                let v = entries[(i, j)];
                let bad = |reason: String| Error::InvalidWeights {
                    row: i,
                    col: j,
                    reason,
                };
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value {v}")));
                }
                if i == j {
                    if v != 0.0 {
                        return Err(bad(format!("diagonal entry is {v}, expected 0")));
                    }
                } else {
                    if v < 0.0 {
                        return Err(bad(format!("negative weight {v}")));
                    }
                    if v != entries[(j, i)] {
                        return Err(bad(format!(
                            "asymmetric: {v} vs transposed entry {}",
                            entries[(j, i)]
                        )));
                    }
                }
            }
        }
        Ok(WeightMatrix(entries))
    }

    pub fn zeros(k: usize) -> Self {
        WeightMatrix(DMatrix::zeros(k, k))
    }

    /// Builds a matrix from a function evaluated on the strict upper triangle.
    pub fn from_upper(k: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in (i + 1)..k {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        WeightMatrix::new(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Node degrees `W 1`.
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0.row(i).sum()).collect()
    }

    /// Elementwise l1 norm over the full matrix (each edge counted twice).
    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let k = self.dim();
        let mut out = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in (i + 1)..k {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    /// Dense CSV: K rows of K comma-separated values, no header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.0, out)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let m = read_matrix_csv(input)?;
        WeightMatrix::new(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        WeightMatrix::read_csv(file)
    }
}

impl TryFrom<DMatrix<f64>> for WeightMatrix {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        WeightMatrix::new(m)
    }
}

impl From<WeightMatrix> for DMatrix<f64> {
    fn from(w: WeightMatrix) -> Self {
        w.0
    }
}

/// Writes any dense matrix as headerless CSV using shortest round-trip
/// float formatting.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(rec.len());
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::InvalidWeights {
                row: i,
                col: j,
                reason: format!("cannot parse `{cell}` as a number"),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Dimension("empty matrix file".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Symmetric graph Laplacian `G(W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianMatrix(DMatrix<f64>);

impl LaplacianMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// `G(W)`: negated weights off the diagonal, degrees on it.
pub fn laplacian(w: &WeightMatrix) -> LaplacianMatrix {
    LaplacianMatrix(laplacian_of(w.as_matrix()))
}

/// `G` applied to an arbitrary square matrix (used on extrapolated iterates,
/// which need not be feasible).
pub fn laplacian_of(w: &DMatrix<f64>) -> DMatrix<f64> {
    let k = w.nrows();
    let mut l = -w.clone();
    for i in 0..k {
        let deg: f64 = (0..k).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        l[(i, i)] = deg;
    }
    l
}

fn clamped_spectrum(l: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(l.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b));
    eig.eigenvalues
        .iter()
        .map(|&ev| {
            if ev < 0.0 && ev >= -1e-9 * lmax {
                0.0
            } else {
                ev
            }
        })
        .collect()
}

/// `log det(mu I + G(W))`, from a Cholesky factor. When the factorization
/// fails the spectrum is inspected to report the offending eigenvalue.
pub fn logdet_reg_laplacian(w: &WeightMatrix, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    let l = laplacian(w).into_inner();
    let mut a = l.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += mu;
    }
    if let Some(ch) = a.cholesky() {
        return Ok(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>());
    }
    let mut acc = 0.0;
    for ev in clamped_spectrum(&l) {
        let shifted = mu + ev;
        if !(shifted > 0.0) {
            return Err(Error::Numerical(format!(
                "mu + lambda = {shifted} is not positive (lambda = {ev})"
            )));
        }
        acc += shifted.ln();
    }
    Ok(acc)
}

/// Gradient of the log-det regularizer `-log det(mu I + G(W))` with respect
/// to `W`, stored symmetric with every ordered entry carrying half the
/// derivative with respect to the shared edge weight.
///
/// With `M = (mu I + G(W))^{-1}`, entry `(i, j)` is
/// `-((M_ii + M_jj) / 2 - M_ij)`. The caller multiplies by the log-det
/// weight.
pub fn logdet_gradient(w: &WeightMatrix, mu: f64) -> Result<DMatrix<f64>> {
    logdet_gradient_of(w.as_matrix(), mu)
}

/// Same as [`logdet_gradient`] for an arbitrary zero-diagonal square matrix.
pub fn logdet_gradient_of(w: &DMatrix<f64>, mu: f64) -> Result<DMatrix<f64>> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    let k = w.nrows();
    let mut a = laplacian_of(w);
    for i in 0..k {
        a[(i, i)] += mu;
    }
    let inv = match a.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => a
            .try_inverse()
            .ok_or_else(|| Error::Numerical("mu I + G(W) is singular".into()))?,
    };
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let mij = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                g[(i, j)] = -(0.5 * (inv[(i, i)] + inv[(j, j)]) - mij);
            }
        }
    }
    Ok(g)
}

/// Result of the spanning-forest enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestWeight {
    /// Product over components of the total spanning-tree weight.
    pub tau: f64,
    /// Component sizes, ordered by their smallest node index.
    pub components: Vec<usize>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[rb] = ra;
        true
    }
}

/// Enumerates every spanning tree of every connected component. Edges are
/// the pairs with strictly positive weight. Exponential; refuses `K > 8`.
pub fn forest_weight_bruteforce(w: &WeightMatrix) -> Result<ForestWeight> {
    let k = w.dim();
    if k > 8 {
        return Err(Error::TooLarge(8));
    }
    let mut uf = UnionFind::new(k);
    for i in 0..k {
        for j in (i + 1)..k {
            if w.get(i, j) > 0.0 {
                uf.union(i, j);
            }
        }
    }
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut root_slot: Vec<Option<usize>> = vec![None; k];
    for v in 0..k {
        let r = uf.find(v);
        match root_slot[r] {
            Some(s) => comps[s].push(v),
            None => {
                root_slot[r] = Some(comps.len());
                comps.push(vec![v]);
            }
        }
    }

    let mut tau = 1.0;
    for comp in &comps {
        if comp.len() == 1 {
            continue;
        }
        let edges: Vec<(usize, usize, f64)> = comp
            .iter()
            .flat_map(|&i| comp.iter().map(move |&j| (i, j)))
            .filter(|&(i, j)| i < j && w.get(i, j) > 0.0)
            .map(|(i, j)| (i, j, w.get(i, j)))
            .collect();
        let mut total = 0.0;
        let mut chosen = Vec::with_capacity(comp.len() - 1);
        enumerate_trees(&edges, 0, comp.len() - 1, &mut chosen, k, &mut total);
        tau *= total;
    }
    Ok(ForestWeight {
        tau,
        components: comps.iter().map(Vec::len).collect(),
    })
}

fn enumerate_trees(
    edges: &[(usize, usize, f64)],
    start: usize,
    need: usize,
    chosen: &mut Vec<usize>,
    k: usize,
    total: &mut f64,
) {
    if chosen.len() == need {
        let mut uf = UnionFind::new(k);
        let mut weight = 1.0;
        for &e in chosen.iter() {
            let (a, b, we) = edges[e];
            if !uf.union(a, b) {
                return;
            }
            weight *= we;
        }
        *total += weight;
        return;
    }
    let remaining = need - chosen.len();
    for e in start..edges.len() {
        if edges.len() - e < remaining {
            break;
        }
        chosen.push(e);
        enumerate_trees(edges, e + 1, need, chosen, k, total);
        chosen.pop();
    }
}

/// Moore-Penrose pseudo-inverse of a Laplacian, dropping eigenvalues below
/// `1e-10 * lambda_max`.
pub fn laplacian_pseudoinverse(l: &LaplacianMatrix) -> DMatrix<f64> {
    symmetric_pseudoinverse(l.as_matrix())
}

pub(crate) fn symmetric_pseudoinverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let mut out = DMatrix::zeros(k, k);
    if lmax == 0.0 {
        return out;
    }
    let cutoff = 1e-10 * lmax;
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > cutoff {
            let v = eig.eigenvectors.column(idx);
            out += (v * v.transpose()) / ev;
        }
    }
    out
}

/// Parameters of the graph-side regularizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRegParams {
    /// Weight of the negative log-determinant.
    pub lambda1: f64,
    /// Weight of the elastic-net term.
    pub lambda2: f64,
    /// l1 share of the elastic net.
    pub eta: f64,
    /// Ridge inside the log-determinant.
    pub mu: f64,
    /// Prior guess for the weights.
    pub w0: WeightMatrix,
}

impl GraphRegParams {
    pub fn new(lambda1: f64, lambda2: f64, eta: f64, mu: f64, w0: WeightMatrix) -> Result<Self> {
        let p = GraphRegParams {
            lambda1,
            lambda2,
            eta,
            mu,
            w0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::InvalidParameter(
                "lambda1 and lambda2 must be nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if !(self.mu > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        Ok(())
    }

    /// Fixed-graph parameters: regularizers off, `w0` is the graph.
    pub fn fixed(w: WeightMatrix) -> Self {
        GraphRegParams {
            lambda1: 0.0,
            lambda2: 0.0,
            eta: 0.0,
            mu: 1.0,
            w0: w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn wm(rows: &[&[f64]]) -> WeightMatrix {
        let k = rows.len();
        WeightMatrix::new(DMatrix::from_fn(k, k, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn laplacian_examples() {
        let l = laplacian(&wm(&[&[0., 2., 0.], &[2., 0., 1.], &[0., 1., 0.]]));
        let expected = DMatrix::from_row_slice(3, 3, &[2., -2., 0., -2., 3., -1., 0., -1., 1.]);
        assert_eq!(l.as_matrix(), &expected);
        assert_eq!(laplacian(&WeightMatrix::zeros(3)).as_matrix(), &DMatrix::zeros(3, 3));
        let l2 = laplacian(&wm(&[&[0., 1.], &[1., 0.]]));
        assert_eq!(l2.as_matrix(), &DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]));
    }

    #[test]
    fn rejects_invalid_weights() {
        let neg = DMatrix::from_row_slice(2, 2, &[0., -1., -1., 0.]);
        assert!(matches!(
            WeightMatrix::new(neg),
            Err(Error::InvalidWeights { row: 0, col: 1, .. })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[0., 1., 2., 0.]);
        assert!(WeightMatrix::new(asym).is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[1., 0., 0., 0.]);
        assert!(matches!(
            WeightMatrix::new(diag),
            Err(Error::InvalidWeights { row: 0, col: 0, .. })
        ));
    }

    #[test]
    fn logdet_examples() {
        let v = logdet_reg_laplacian(&WeightMatrix::zeros(3), 2.0).unwrap();
        assert_abs_diff_eq!(v, 3.0 * 2f64.ln(), epsilon = 1e-12);
        let v = logdet_reg_laplacian(&wm(&[&[0., 1.], &[1., 0.]]), 1.0).unwrap();
        assert_abs_diff_eq!(v, 3f64.ln(), epsilon = 1e-12);
        // Path 0-1-2 with weights 1, 2: nonzero eigenvalues are the roots of
        // x^2 - 6x + 6, so the product of (1 + lambda) is 1 + 6 + 6 = 13.
        let v = logdet_reg_laplacian(&wm(&[&[0., 1., 0.], &[1., 0., 2.], &[0., 2., 0.]]), 1.0)
            .unwrap();
        let expected = 13f64.ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        assert!(logdet_reg_laplacian(&WeightMatrix::zeros(2), 0.0).is_err());
    }

    #[test]
    fn logdet_gradient_examples() {
        let g = logdet_gradient(&WeightMatrix::zeros(2), 1.0).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[0., -1., -1., 0.]));
        let g = logdet_gradient(&WeightMatrix::zeros(4), 4.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { -0.25 };
                assert_abs_diff_eq!(g[(i, j)], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn logdet_gradient_matches_finite_differences_on_edge() {
        let w = wm(&[&[0., 1.], &[1., 0.]]);
        let g = logdet_gradient(&w, 1.0).unwrap();
        let h = 1e-5;
        let f = |t: f64| logdet_reg_laplacian(&wm(&[&[0., t], &[t, 0.]]), 1.0).unwrap();
        let fd = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        // Perturbing the shared edge moves both ordered entries; the
        // gradient is that of the negated log-determinant.
        assert_abs_diff_eq!(g[(0, 1)] + g[(1, 0)], -fd, epsilon = 1e-6);
    }

    #[test]
    fn forest_examples() {
        let f = forest_weight_bruteforce(&wm(&[&[0., 3.], &[3., 0.]])).unwrap();
        assert_eq!(f, ForestWeight { tau: 3.0, components: vec![2] });
        let f = forest_weight_bruteforce(&wm(&[&[0., 1., 0.], &[1., 0., 2.], &[0., 2., 0.]]))
            .unwrap();
        assert_eq!(f, ForestWeight { tau: 2.0, components: vec![3] });
        let f = forest_weight_bruteforce(&WeightMatrix::zeros(3)).unwrap();
        assert_eq!(f, ForestWeight { tau: 1.0, components: vec![1, 1, 1] });
        assert!(matches!(
            forest_weight_bruteforce(&WeightMatrix::zeros(9)),
            Err(Error::TooLarge(8))
        ));
    }

    #[test]
    fn forest_triangle_counts_three_trees() {
        // Triangle with weights a, b, c has trees ab, ac, bc.
        let f = forest_weight_bruteforce(&wm(&[&[0., 2., 3.], &[2., 0., 5.], &[3., 5., 0.]]))
            .unwrap();
        assert_abs_diff_eq!(f.tau, 2. * 3. + 2. * 5. + 3. * 5., epsilon = 1e-12);
    }

    #[test]
    fn pseudoinverse_examples() {
        let l = laplacian(&wm(&[&[0., 1.], &[1., 0.]]));
        let p = laplacian_pseudoinverse(&l);
        let want = DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]) * 0.25;
        assert!((p - want).abs().max() < 1e-12);
        let z = laplacian(&WeightMatrix::zeros(3));
        assert_eq!(laplacian_pseudoinverse(&z), DMatrix::zeros(3, 3));
    }

    #[test]
    fn csv_roundtrip_and_diagnostics() {
        let w = wm(&[&[0., 0.1, 2.5], &[0.1, 0., 1e-7], &[2.5, 1e-7, 0.]]);
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let back = WeightMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(w, back);

        let bad = "0,1\n1,-0\n";
        assert!(WeightMatrix::read_csv(bad.as_bytes()).is_ok());
        let bad = "0,1,0\n1,0,2\n0,3,0\n";
        match WeightMatrix::read_csv(bad.as_bytes()) {
            Err(Error::InvalidWeights { row: 1, col: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let bad = "0,x\n1,0\n";
        assert!(matches!(
            WeightMatrix::read_csv(bad.as_bytes()),
            Err(Error::InvalidWeights { row: 0, col: 1, .. })
        ));
    }
}
