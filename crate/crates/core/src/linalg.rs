//! Minimal dense linear algebra and quadrature used by every other module:
//! Cholesky factorization, PSD solves, log-determinants and Gauss-Legendre
//! quadrature with endpoint-singularity handling.
//!
//! Matrices are stored dense row-major; every size in this crate satisfies
//! n <= 2N <= 200 for model covariances, or n = P for kernel matrices.

use thiserror::Error;

/// Block width for the blocked Cholesky. The trailing update runs through
/// `matrixmultiply::dgemm`, which carries the bulk of the flops.
const CHOL_BLOCK: usize = 96;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singularity exponent {0} outside (0,1)")]
    InvalidExponent(f64),
}

/// Dense symmetric matrix, full row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1);
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from `f(i, j)`; only the lower triangle is sampled and the
    /// matrix is symmetrized from it.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n);
            for j in 0..n {
                m.data[i * n + j] = r[j];
            }
        }
        for i in 0..n {
            for j in 0..i {
                let a = m.data[i * n + j];
                let b = m.data[j * n + i];
                assert!(
                    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0),
                    "input rows are not symmetric at ({i},{j})"
                );
            }
        }
        m
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    /// Adds `v` to every diagonal entry.
    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

/// Lower-triangular matrix; entries above the diagonal are zero.
/// Produced by `cholesky_lower`, in which case the diagonal is strictly
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    n: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[i * self.n + j]
        }
    }

    /// Row `i` as a slice of its `i + 1` nonzero leading entries.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..i * self.n + i + 1]
    }

    /// `L * g` for a dense vector `g`.
    pub fn mul_vec(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.n);
        (0..self.n)
            .map(|i| dot(self.row(i), &g[..i + 1]))
            .collect()
    }

    /// Reconstructs `L * L^T`.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::from_fn(self.n, |i, j| {
            let k = j.min(i) + 1;
            dot(&self.data[i * self.n..i * self.n + k], &self.data[j * self.n..j * self.n + k])
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factorization `a = L * L^T`.
///
/// Fails with `NotPositiveDefinite` when a pivot drops below
/// `1e-12 * max diagonal entry`, which distinguishes genuinely degenerate
/// correlation/covariance inputs from roundoff.
pub fn cholesky_lower(a: &SymMatrix) -> Result<LowerTriangular, LinalgError> {
    cholesky_lower_impl(a, false)
}

/// Cholesky factorization that tolerates a positive *semi*definite input:
/// pivots within roundoff of zero produce a zero column instead of an
/// error. Intended for correlation matrices (e.g. perfectly correlated
/// assets); the resulting factor must not be fed to `psd_solve`.
pub fn cholesky_lower_semidefinite(a: &SymMatrix) -> Result<LowerTriangular, LinalgError> {
    cholesky_lower_impl(a, true)
}

fn cholesky_lower_impl(a: &SymMatrix, semidefinite: bool) -> Result<LowerTriangular, LinalgError> {
    let n = a.n;
    let mut l = a.data.clone();
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a.data[i * n + i]));
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    cholesky_in_place(n, &mut l, tol, semidefinite)?;
    // zero the strict upper triangle left over from the input copy
    for i in 0..n {
        for j in i + 1..n {
            l[i * n + j] = 0.0;
        }
    }
    Ok(LowerTriangular { n, data: l })
}

fn cholesky_in_place(
    n: usize,
    l: &mut [f64],
    tol: f64,
    semidefinite: bool,
) -> Result<(), LinalgError> {
    // semidefinite inputs leave pivots that are zero up to roundoff
    let zero_band = 1e4 * tol;
    let mut j0 = 0;
    while j0 < n {
        let w = CHOL_BLOCK.min(n - j0);
        let j1 = j0 + w;
        // unblocked factorization of the diagonal block
        for j in j0..j1 {
            for k in j0..j {
                let ljk = l[j * n + k];
                for i in j..j1 {
                    l[i * n + j] -= l[i * n + k] * ljk;
                }
            }
            let pivot = l[j * n + j];
            if !(pivot > tol) {
                if semidefinite && pivot.abs() <= zero_band {
                    // zero column: the row is linearly dependent on earlier ones
                    for i in j..j1 {
                        l[i * n + j] = 0.0;
                    }
                    continue;
                }
                return Err(LinalgError::NotPositiveDefinite { row: j, pivot });
            }
            let d = pivot.sqrt();
            l[j * n + j] = d;
            let inv = 1.0 / d;
            for i in j + 1..j1 {
                l[i * n + j] *= inv;
            }
        }
        if j1 < n {
            // panel solve: rows j1.. against the diagonal block
            for j in j0..j1 {
                let diag = l[j * n + j];
                if diag == 0.0 {
                    for i in j1..n {
                        l[i * n + j] = 0.0;
                    }
                    continue;
                }
                let inv = 1.0 / diag;
                for i in j1..n {
                    let mut s = l[i * n + j];
                    for k in j0..j {
                        s -= l[i * n + k] * l[j * n + k];
                    }
                    l[i * n + j] = s * inv;
                }
            }
            // trailing update: for each trailing block column, only the rows
            // at or below it, so just the lower trapezoid gets touched
            let mut k0 = j1;
            while k0 < n {
                let kw = CHOL_BLOCK.min(n - k0);
                let m = n - k0;
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        w,
                        kw,
                        -1.0,
                        l.as_ptr().add(k0 * n + j0),
                        n as isize,
                        1,
                        l.as_ptr().add(k0 * n + j0),
                        1,
                        n as isize,
                        1.0,
                        l.as_mut_ptr().add(k0 * n + k0),
                        n as isize,
                        1,
                    );
                }
                k0 += kw;
            }
        }
        j0 = j1;
    }
    Ok(())
}

/// Solves `(L * L^T) x = b` by forward and back substitution.
pub fn psd_solve(l: &LowerTriangular, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != l.n {
        return Err(LinalgError::DimensionMismatch {
            expected: l.n,
            got: b.len(),
        });
    }
    let n = l.n;
    let mut x = b.to_vec();
    for i in 0..n {
        let s = dot(&l.data[i * n..i * n + i], &x[..i]);
        x[i] = (x[i] - s) / l.data[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l.data[k * n + i] * x[k];
        }
        x[i] = s / l.data[i * n + i];
    }
    Ok(x)
}

/// Forward substitution only: solves `L y = b`.
pub fn forward_solve(l: &LowerTriangular, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != l.n {
        return Err(LinalgError::DimensionMismatch {
            expected: l.n,
            got: b.len(),
        });
    }
    let n = l.n;
    let mut y = b.to_vec();
    for i in 0..n {
        let s = dot(&l.data[i * n..i * n + i], &y[..i]);
        y[i] = (y[i] - s) / l.data[i * n + i];
    }
    Ok(y)
}

/// `log det(L * L^T) = 2 * sum(log diag(L))`.
pub fn log_det_from_cholesky(l: &LowerTriangular) -> f64 {
    (0..l.n).map(|i| l.data[i * l.n + i].ln()).sum::<f64>() * 2.0
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi-style initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let (mut p, mut dp);
        loop {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            p = p1;
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let _ = p;
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Integrates `f` over `[0, 1]` when `f(s) ~ (1 - s)^(h-1)` near `s = 1`.
///
/// The substitution `u = (1 - s)^h` absorbs the endpoint singularity, after
/// which fixed-node Gauss-Legendre applies.
pub fn singular_gauss_legendre(
    f: impl Fn(f64) -> f64,
    h: f64,
    nodes: usize,
) -> Result<f64, LinalgError> {
    if !(h > 0.0 && h < 1.0) {
        return Err(LinalgError::InvalidExponent(h));
    }
    let (xs, ws) = gauss_legendre(nodes);
    let inv_h = 1.0 / h;
    let mut acc = 0.0;
    for (&x, &w) in xs.iter().zip(&ws) {
        // map [-1,1] -> (0,1)
        let u = 0.5 * (x + 1.0);
        let s = 1.0 - u.powf(inv_h);
        acc += w * 0.5 * inv_h * u.powf(inv_h - 1.0) * f(s);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &SymMatrix, b: &SymMatrix) -> f64 {
        let mut m = 0.0f64;
        for i in 0..a.n() {
            for j in 0..a.n() {
                m = m.max((a.get(i, j) - b.get(i, j)).abs());
            }
        }
        m
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky_lower(&SymMatrix::identity(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(l.get(i, j), want);
            }
        }
    }

    #[test]
    fn cholesky_2x2_closed_form() {
        let a = SymMatrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 1.0]]);
        let l = cholesky_lower(&a).unwrap();
        assert!((l.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((l.get(1, 0) - 0.2).abs() < 1e-15);
        assert!((l.get(1, 1) - 0.96f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(
            cholesky_lower(&a),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_reconstructs_random_psd() {
        // a = b * b^T + I is PSD for any b
        let n = 37;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
        let mut a = SymMatrix::from_fn(n, |i, j| dot(&b[i], &b[j]));
        a.add_diagonal(1.0);
        let l = cholesky_lower(&a).unwrap();
        let r = l.reconstruct();
        assert!(max_abs_diff(&a, &r) <= 1e-12 * a.max_abs());
    }

    #[test]
    fn cholesky_blocked_path_matches_reference() {
        // n > CHOL_BLOCK exercises the dgemm trailing update
        let n = 2 * CHOL_BLOCK + 17;
        let a = SymMatrix::from_fn(n, |i, j| {
            let base = 0.5f64.powi((i as i32 - j as i32).abs());
            if i == j {
                base + 1.0
            } else {
                base
            }
        });
        let l = cholesky_lower(&a).unwrap();
        let r = l.reconstruct();
        assert!(max_abs_diff(&a, &r) <= 1e-12 * a.max_abs());
    }

    #[test]
    fn psd_solve_identity() {
        let l = cholesky_lower(&SymMatrix::identity(2)).unwrap();
        assert_eq!(psd_solve(&l, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn psd_solve_residual() {
        let a = SymMatrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, -0.2],
            vec![0.5, -0.2, 5.0],
        ]);
        let l = cholesky_lower(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = psd_solve(&l, &b).unwrap();
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a.get(i, j) * x[j]).sum();
            assert!((ax - b[i]).abs() <= 1e-10 * b[i].abs().max(1.0));
        }
    }

    #[test]
    fn psd_solve_dimension_mismatch() {
        let l = cholesky_lower(&SymMatrix::identity(2)).unwrap();
        assert_eq!(
            psd_solve(&l, &[1.0, 2.0, 3.0]),
            Err(LinalgError::DimensionMismatch {
                expected: 2,
                got: 3
            })
        );
    }

    #[test]
    fn log_det_identity_and_diagonal() {
        let l = cholesky_lower(&SymMatrix::identity(4)).unwrap();
        assert_eq!(log_det_from_cholesky(&l), 0.0);
        let a = SymMatrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 4.0]]);
        let l = cholesky_lower(&a).unwrap();
        assert!((log_det_from_cholesky(&l) - 16.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_det_matches_cofactor_expansion() {
        let a = SymMatrix::from_rows(&[
            vec![2.0, 0.3, 0.1],
            vec![0.3, 1.5, -0.2],
            vec![0.1, -0.2, 1.2],
        ]);
        // 3x3 determinant by cofactor expansion
        let det = a.get(0, 0) * (a.get(1, 1) * a.get(2, 2) - a.get(1, 2) * a.get(2, 1))
            - a.get(0, 1) * (a.get(1, 0) * a.get(2, 2) - a.get(1, 2) * a.get(2, 0))
            + a.get(0, 2) * (a.get(1, 0) * a.get(2, 1) - a.get(1, 1) * a.get(2, 0));
        let l = cholesky_lower(&a).unwrap();
        assert!((log_det_from_cholesky(&l) - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_det_diagonal_sum_property() {
        let ds = [1.0, 2.5, 0.3, 7.0];
        let a = SymMatrix::from_fn(4, |i, j| if i == j { ds[i] } else { 0.0 });
        let l = cholesky_lower(&a).unwrap();
        let want: f64 = ds.iter().map(|d| d.ln()).sum();
        assert!((log_det_from_cholesky(&l) - want).abs() < 1e-14);
    }

    #[test]
    fn quadrature_constant() {
        let v = singular_gauss_legendre(|_| 1.0, 0.5, 64).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_power_rule() {
        // int_0^1 (1-s)^(-0.43) ds = 1/0.57
        let v = singular_gauss_legendre(|s| (1.0 - s).powf(-0.43), 0.57, 64).unwrap();
        assert!((v - 1.0 / 0.57).abs() < 1e-9 * (1.0 / 0.57));
    }

    #[test]
    fn quadrature_rejects_bad_exponent() {
        assert_eq!(
            singular_gauss_legendre(|_| 1.0, 1.0, 64),
            Err(LinalgError::InvalidExponent(1.0))
        );
        assert!(singular_gauss_legendre(|_| 1.0, 0.0, 64).is_err());
    }

    /// fBm-covariance style integrand: (1-s)^(H-1/2) * (ratio - s)^(H-1/2)
    /// with ratio >= 1, singular at s = 1 with exponent h = H + 1/2.
    fn fbm_integrand(h_exp: f64, ratio: f64) -> impl Fn(f64) -> f64 {
        move |s: f64| (1.0 - s).powf(h_exp - 1.0) * (ratio - s).powf(h_exp - 1.0)
    }

    #[test]
    fn quadrature_fbm_integrand_matches_doubling_oracle() {
        // H = 0.07 -> singularity exponent 0.57; t_m/t_n = 0.5 means ratio 2
        let h = 0.07 + 0.5;
        for ratio in [2.0, 1.25, 1.01] {
            let f = fbm_integrand(h, ratio);
            let v64 = singular_gauss_legendre(&f, h, 64).unwrap();
            // Richardson-style oracle: keep doubling nodes until stable
            let mut prev = singular_gauss_legendre(&f, h, 128).unwrap();
            let mut nodes = 256;
            loop {
                let next = singular_gauss_legendre(&f, h, nodes).unwrap();
                if (next - prev).abs() < 1e-12 * next.abs() || nodes > 4096 {
                    prev = next;
                    break;
                }
                prev = next;
                nodes *= 2;
            }
            assert!(
                (v64 - prev).abs() < 1e-9 * prev.abs(),
                "ratio {ratio}: 64-node {v64} vs oracle {prev}"
            );
        }
    }

    #[test]
    fn quadrature_doubling_converges_on_fbm_grid() {
        for h_hurst in [0.07, 0.3, 0.45] {
            let h = h_hurst + 0.5;
            // the closest adjacent-time ratio on an N-step grid is
            // (N+1)/N, so 1.01 covers N up to 100
            for ratio in [1.01, 1.5, 4.0, 50.0] {
                let f = fbm_integrand(h, ratio);
                let a = singular_gauss_legendre(&f, h, 64).unwrap();
                let b = singular_gauss_legendre(&f, h, 128).unwrap();
                // adjacent grid times (ratio near 1) leave a second
                // near-singularity that the substitution does not remove,
                // so convergence there is slower; 1e-7 relative is still
                // far below what the covariance assembly needs
                assert!(
                    (a - b).abs() < 1e-7 * b.abs().max(1.0),
                    "H={h_hurst} ratio={ratio}: {a} vs {b}"
                );
            }
        }
    }
}
