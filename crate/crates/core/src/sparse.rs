//! Symmetric sparse matrices and the two solvers the geodesic code needs: an
//! envelope (skyline) Cholesky factorization under reverse Cuthill-McKee
//! ordering, and Jacobi-preconditioned conjugate gradients.

use std::collections::VecDeque;

/// Compressed sparse row matrix. Column indices within a row are sorted and
/// unique.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n × n` matrix from triplets, summing duplicates.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.row(r).find(|&(c, _)| c == r).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    /// Returns `self + shift · I`.
    pub fn add_diagonal(&self, shift: f64) -> Self {
        let mut trip: Vec<(usize, usize, f64)> = (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect();
        trip.extend((0..self.n).map(|i| (i, i, shift)));
        Self::from_triplets(self.n, trip)
    }

    /// Returns `a·self + b·other` for matrices of equal size.
    pub fn combine(&self, a: f64, other: &CsrMatrix, b: f64) -> Self {
        assert_eq!(self.n, other.n);
        let trip = (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, a * v)))
            .chain((0..other.n).flat_map(|r| other.row(r).map(move |(c, v)| (r, c, b * v))))
            .collect();
        Self::from_triplets(self.n, trip)
    }
}

/// Relative pivot floor. Roundoff leaves the last pivot of a singular
/// Laplacian near `n · eps` of its diagonal, well below this.
pub const PIVOT_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub enum FactorError {
    /// A pivot was not safely positive; the matrix is not (numerically) SPD.
    NotPositiveDefinite { row: usize, pivot: f64 },
    /// The envelope would exceed the configured storage limit.
    TooLarge { entries: usize },
}

/// Reverse Cuthill-McKee ordering of the symmetric sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n;
    let degree: Vec<usize> = (0..n).map(|r| a.row(r).filter(|&(c, _)| c != r).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    let mut nbrs = Vec::new();
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(a, seed, &degree);
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(a.row(v).map(|(c, _)| c).filter(|&c| !visited[c]));
            nbrs.sort_by_key(|&c| (degree[c], c));
            for &c in &nbrs {
                visited[c] = true;
                queue.push_back(c);
            }
        }
    }
    order.reverse();
    order
}

/// George-Liu pseudo-peripheral node search from `start`.
fn pseudo_peripheral(a: &CsrMatrix, start: usize, degree: &[usize]) -> usize {
    let mut node = start;
    let mut ecc = 0;
    let mut level = vec![usize::MAX; a.n];
    let mut touched = Vec::new();
    for _ in 0..8 {
        for &t in &touched {
            level[t] = usize::MAX;
        }
        touched.clear();
        level[node] = 0;
        touched.push(node);
        let mut queue = VecDeque::from([node]);
        let mut last_level = Vec::new();
        let mut depth = 0;
        while let Some(v) = queue.pop_front() {
            if level[v] > depth {
                depth = level[v];
                last_level.clear();
            }
            last_level.push(v);
            for (c, _) in a.row(v) {
                if level[c] == usize::MAX {
                    level[c] = level[v] + 1;
                    touched.push(c);
                    queue.push_back(c);
                }
            }
        }
        let candidate = *last_level
            .iter()
            .min_by_key(|&&v| (degree[v], v))
            .unwrap_or(&node);
        if depth <= ecc {
            break;
        }
        ecc = depth;
        node = candidate;
    }
    for &t in &touched {
        level[t] = usize::MAX;
    }
    node
}

/// Envelope Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    n: usize,
    perm: Vec<usize>,
    /// first stored column of each (permuted) row
    first: Vec<usize>,
    /// offset of row i's first entry in `data`; row i spans first[i]..=i
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    /// Factors a symmetric matrix. Pivots below [`PIVOT_TOLERANCE`] times the
    /// mean absolute diagonal are
    /// rejected so that semidefinite matrices fail instead of yielding a
    /// numerically meaningless factor.
    pub fn factor(a: &CsrMatrix, max_entries: usize) -> Result<Self, FactorError> {
        let n = a.n;
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old_r in 0..n {
            let r = inv[old_r];
            for (old_c, _) in a.row(old_r) {
                let c = inv[old_c];
                if c < r {
                    first[r] = first[r].min(c);
                } else {
                    first[c] = first[c].min(r);
                }
            }
        }
        let mut offset = vec![0; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i] + 1);
        }
        let entries = offset[n];
        if entries > max_entries {
            return Err(FactorError::TooLarge { entries });
        }
        let mut data = vec![0.0; entries];
        for old_r in 0..n {
            let r = inv[old_r];
            for (old_c, v) in a.row(old_r) {
                let c = inv[old_c];
                if c <= r {
                    data[offset[r] + (c - first[r])] = v;
                }
            }
        }
        let mean_diag = (0..n)
            .map(|i| data[offset[i] + (i - first[i])].abs())
            .sum::<f64>()
            / n.max(1) as f64;
        let pivot_floor = PIVOT_TOLERANCE * mean_diag.max(f64::MIN_POSITIVE);

        for i in 0..n {
            let fi = first[i];
            let oi = offset[i];
            for j in fi..i {
                let fj = first[j];
                let oj = offset[j];
                let k0 = fi.max(fj);
                let mut s = data[oi + (j - fi)];
                let ri = &data[oi + (k0 - fi)..oi + (j - fi)];
                let rj = &data[oj + (k0 - fj)..oj + (j - fj)];
                s -= ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>();
                let djj = data[oj + (j - fj)];
                data[oi + (j - fi)] = s / djj;
            }
            let row = &data[oi..oi + (i - fi)];
            let d = data[oi + (i - fi)] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > pivot_floor) {
                return Err(FactorError::NotPositiveDefinite { row: i, pivot: d });
            }
            data[oi + (i - fi)] = d.sqrt();
        }
        Ok(Self {
            n,
            perm,
            first,
            offset,
            data,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // L y = b
        for i in 0..n {
            let fi = self.first[i];
            let oi = self.offset[i];
            let row = &self.data[oi..oi + (i - fi)];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] = (y[i] - s) / self.data[oi + (i - fi)];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let fi = self.first[i];
            let oi = self.offset[i];
            y[i] /= self.data[oi + (i - fi)];
            let xi = y[i];
            for (k, l) in self.data[oi..oi + (i - fi)].iter().enumerate() {
                y[fi + k] -= l * xi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive
/// (semi)definite matrix. `x` holds the initial guess and receives the result.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let n = a.n;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        x.fill(0.0);
        return CgOutcome {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let mut rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / b_norm;
    for it in 0..max_iter {
        if rel <= tol {
            return CgOutcome {
                iterations: it,
                relative_residual: rel,
                converged: true,
            };
        }
        a.mul_vec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / b_norm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgOutcome {
        iterations: max_iter,
        relative_residual: rel,
        converged: rel <= tol,
    }
}
