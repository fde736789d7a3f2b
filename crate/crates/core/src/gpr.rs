//! Gaussian process regression with squared-exponential kernels (isotropic
//! and ARD), hyperparameters fitted by maximizing the log marginal
//! likelihood with a derivative-free multi-start search.

use thiserror::Error;

use crate::linalg::{cholesky_lower, psd_solve, LinalgError, LowerTriangular, SymMatrix};

#[derive(Debug, Error)]
pub enum GprError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Kernel family selector for `fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Se,
    Ard,
}

/// Squared-exponential kernel, either with a single shared length scale or
/// with one scale per predictor (automatic relevance determination).
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Se { signal_std: f64, length_scale: f64 },
    Ard { signal_std: f64, length_scales: Vec<f64> },
}

impl KernelSpec {
    pub fn signal_std(&self) -> f64 {
        match self {
            KernelSpec::Se { signal_std, .. } | KernelSpec::Ard { signal_std, .. } => *signal_std,
        }
    }

    /// Predictor dimension pinned by the spec, if any (SE works in any
    /// dimension).
    pub fn dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Se { .. } => None,
            KernelSpec::Ard { length_scales, .. } => Some(length_scales.len()),
        }
    }

    fn check_dim(&self, d: usize) -> Result<(), GprError> {
        if let Some(kd) = self.dim() {
            if kd != d {
                return Err(GprError::DimensionMismatch {
                    expected: kd,
                    got: d,
                });
            }
        }
        Ok(())
    }
}

/// k(a, b); SE: sf^2 exp(-|a-b|^2 / (2 sl^2)); ARD: per-coordinate scales.
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64, GprError> {
    if a.len() != b.len() {
        return Err(GprError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    spec.check_dim(a.len())?;
    Ok(kernel_eval_unchecked(spec, a, b))
}

#[inline]
fn kernel_eval_unchecked(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match spec {
        KernelSpec::Se {
            signal_std,
            length_scale,
        } => {
            let mut s = 0.0;
            for (x, y) in a.iter().zip(b) {
                let e = x - y;
                s += e * e;
            }
            signal_std * signal_std * (-0.5 * s / (length_scale * length_scale)).exp()
        }
        KernelSpec::Ard {
            signal_std,
            length_scales,
        } => {
            let mut s = 0.0;
            for ((x, y), l) in a.iter().zip(b).zip(length_scales) {
                let e = (x - y) / l;
                s += e * e;
            }
            signal_std * signal_std * (-0.5 * s).exp()
        }
    }
}

/// Kernel Gram matrix on the rows of `x` (row-major, `p x d`) plus
/// `noise_var` on the diagonal.
pub fn kernel_matrix(spec: &KernelSpec, x: &[f64], d: usize, noise_var: f64) -> SymMatrix {
    let p = x.len() / d;
    let mut k = SymMatrix::zeros(p);
    for i in 0..p {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..=i {
            let v = kernel_eval_unchecked(spec, xi, &x[j * d..(j + 1) * d]);
            k.set(i, j, v);
            k.set(j, i, v);
        }
        k.set(i, i, k.get(i, i) + noise_var);
    }
    k
}

/// Log marginal likelihood of responses `y` under the kernel plus noise:
/// -1/2 y' (K + s^2 I)^-1 y - 1/2 log det(K + s^2 I) - (P/2) log 2 pi.
pub fn log_marginal_likelihood(
    spec: &KernelSpec,
    noise_var: f64,
    x: &[f64],
    d: usize,
    y: &[f64],
) -> Result<f64, GprError> {
    let p = y.len();
    if p < 2 || x.len() != p * d {
        return Err(GprError::DimensionMismatch {
            expected: p * d,
            got: x.len(),
        });
    }
    spec.check_dim(d)?;
    let k = kernel_matrix(spec, x, d, noise_var);
    let l = cholesky_lower(&k)?;
    Ok(lml_from_chol(&l, y))
}

fn lml_from_chol(l: &LowerTriangular, y: &[f64]) -> f64 {
    let p = y.len();
    let alpha = psd_solve(l, y).expect("dimension checked by caller");
    let quad: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let log_det: f64 = (0..p).map(|i| 2.0 * l.get(i, i).ln()).sum();
    -0.5 * quad - 0.5 * log_det - 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Fitted GPR surrogate; immutable, safe to share across threads.
#[derive(Debug, Clone)]
pub struct GprModel {
    kernel: KernelSpec,
    d: usize,
    train_x: Vec<f64>,
    weights: Vec<f64>,
    noise_var: f64,
    y_mean: f64,
}

impl GprModel {
    /// Assembles a model from explicit parts; mainly for oracles and tests
    /// that need exact control over weights and hyperparameters.
    #[cfg(test)]
    pub(crate) fn from_parts(
        kernel: KernelSpec,
        d: usize,
        train_x: Vec<f64>,
        weights: Vec<f64>,
        noise_var: f64,
        y_mean: f64,
    ) -> Self {
        assert_eq!(train_x.len(), weights.len() * d);
        Self {
            kernel,
            d,
            train_x,
            weights,
            noise_var,
            y_mean,
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn train_len(&self) -> usize {
        self.weights.len()
    }

    pub fn train_x(&self) -> &[f64] {
        &self.train_x
    }

    pub fn train_point(&self, q: usize) -> &[f64] {
        &self.train_x[q * self.d..(q + 1) * self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Centering constant added back onto every prediction.
    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    /// Posterior mean at `x_star`.
    pub fn predict(&self, x_star: &[f64]) -> Result<f64, GprError> {
        if x_star.len() != self.d {
            return Err(GprError::DimensionMismatch {
                expected: self.d,
                got: x_star.len(),
            });
        }
        let mut s = self.y_mean;
        for (q, w) in self.weights.iter().enumerate() {
            s += w * kernel_eval_unchecked(&self.kernel, self.train_point(q), x_star);
        }
        Ok(s)
    }
}

/// Relative base for the numerical jitter added to the kernel diagonal;
/// escalated tenfold on Cholesky failure, at most `JITTER_ESCALATIONS`
/// times.
const JITTER_REL: f64 = 1e-8;
const JITTER_ESCALATIONS: usize = 4;

/// Fits hyperparameters (including the noise variance, which regularizes
/// the kinked value functions met in backward induction) by maximizing the
/// log marginal likelihood. `warm_start`, when given, seeds the search with
/// a previous step's kernel and noise (the search still runs from the
/// data-driven initialization as well).
pub fn fit(
    x: &[f64],
    d: usize,
    y: &[f64],
    kind: KernelKind,
    warm_start: Option<(&KernelSpec, f64)>,
) -> Result<GprModel, GprError> {
    let p = y.len();
    if p < 2 {
        return Err(GprError::FitFailed(format!("need at least 2 points, got {p}")));
    }
    if x.len() != p * d || d == 0 {
        return Err(GprError::DimensionMismatch {
            expected: p * d,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(GprError::FitFailed("non-finite predictor or response".into()));
    }

    let y_mean = y.iter().sum::<f64>() / p as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let var_y = yc.iter().map(|v| v * v).sum::<f64>() / p as f64;

    // data-driven initialization: sigma_f = std(y), length scales = median
    // pairwise distances
    let sd_y = var_y.sqrt().max(1e-8);
    let init_scales = match kind {
        KernelKind::Se => vec![median_pairwise_distance(x, d, p)],
        KernelKind::Ard => (0..d).map(|i| median_coordinate_distance(x, d, p, i)).collect(),
    };

    if var_y < 1e-300 {
        // constant responses: centered y is identically zero, any
        // hyperparameters interpolate it with zero weights
        let kernel = make_spec(kind, sd_y, &init_scales);
        return Ok(GprModel {
            kernel,
            d,
            train_x: x.to_vec(),
            weights: vec![0.0; p],
            noise_var: JITTER_REL,
            y_mean,
        });
    }

    let base_jitter = JITTER_REL * var_y;
    // search over theta = (ln sigma_f, ln scales..., ln sigma_n), clamped to
    // three decades around the initialization (noise: [jitter, var(y)])
    let mut theta0: Vec<f64> = std::iter::once(sd_y.ln())
        .chain(init_scales.iter().map(|s| s.ln()))
        .collect();
    let mut lo: Vec<f64> = theta0.iter().map(|t| t - 1e3f64.ln()).collect();
    let mut hi: Vec<f64> = theta0.iter().map(|t| t + 1e3f64.ln()).collect();
    theta0.push((0.05 * sd_y).ln());
    lo.push(0.5 * base_jitter.ln());
    hi.push(sd_y.ln());

    let mut cache = SqDistCache::new(kind, x, d, p);
    let mut objective = |theta: &[f64]| -> f64 {
        let mut th = theta.to_vec();
        for ((t, l), h) in th.iter_mut().zip(&lo).zip(&hi) {
            *t = t.clamp(*l, *h);
        }
        let (spec, noise) = split_theta(kind, &th);
        match lml_with_escalation(&spec, &mut cache, x, d, &yc, noise.max(base_jitter)) {
            Some((lml, _)) => -lml,
            None => f64::INFINITY,
        }
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some((w, wn)) = warm_start {
        if spec_matches(w, kind, d) {
            let mut t = theta_from_spec(w);
            t.push(wn.max(base_jitter).sqrt().ln());
            starts.push(t);
        }
    }
    starts.push(theta0.clone());
    if warm_start.is_none() {
        for f in [4.0f64, 0.25] {
            let mut t = theta0.clone();
            let n = t.len();
            for s in t.iter_mut().take(n - 1).skip(1) {
                *s += f.ln();
            }
            starts.push(t);
        }
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let (th, f) = nelder_mead(&mut objective, s, 0.4, 80 * (s.len() + 2), 1e-6);
        if f.is_finite() && best.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best = Some((th, f));
        }
    }
    let (mut theta, _) = best.ok_or_else(|| {
        GprError::FitFailed("no optimizer start produced a finite likelihood".into())
    })?;
    for ((t, l), h) in theta.iter_mut().zip(&lo).zip(&hi) {
        *t = t.clamp(*l, *h);
    }
    let (kernel, noise) = split_theta(kind, &theta);
    let (_, noise_var) =
        lml_with_escalation(&kernel, &mut cache, x, d, &yc, noise.max(base_jitter))
            .ok_or_else(|| GprError::FitFailed("final kernel matrix not positive definite".into()))?;
    let k = cache.matrix(&kernel, x, d, noise_var);
    let l = cholesky_lower(&k)?;
    let weights = psd_solve(&l, &yc)?;
    Ok(GprModel {
        kernel,
        d,
        train_x: x.to_vec(),
        weights,
        noise_var,
        y_mean,
    })
}

fn make_spec(kind: KernelKind, signal_std: f64, scales: &[f64]) -> KernelSpec {
    match kind {
        KernelKind::Se => KernelSpec::Se {
            signal_std,
            length_scale: scales[0],
        },
        KernelKind::Ard => KernelSpec::Ard {
            signal_std,
            length_scales: scales.to_vec(),
        },
    }
}

/// Splits theta = (ln sigma_f, ln scales..., ln sigma_n) into the kernel
/// and the noise variance.
fn split_theta(kind: KernelKind, theta: &[f64]) -> (KernelSpec, f64) {
    let n = theta.len();
    let scales: Vec<f64> = theta[1..n - 1].iter().map(|t| t.exp()).collect();
    let sn = theta[n - 1].exp();
    (make_spec(kind, theta[0].exp(), &scales), sn * sn)
}

fn theta_from_spec(spec: &KernelSpec) -> Vec<f64> {
    match spec {
        KernelSpec::Se {
            signal_std,
            length_scale,
        } => vec![signal_std.ln(), length_scale.ln()],
        KernelSpec::Ard {
            signal_std,
            length_scales,
        } => std::iter::once(signal_std.ln())
            .chain(length_scales.iter().map(|l| l.ln()))
            .collect(),
    }
}

fn spec_matches(spec: &KernelSpec, kind: KernelKind, d: usize) -> bool {
    match (spec, kind) {
        (KernelSpec::Se { .. }, KernelKind::Se) => true,
        (KernelSpec::Ard { length_scales, .. }, KernelKind::Ard) => length_scales.len() == d,
        _ => false,
    }
}

/// For the isotropic kernel the pairwise squared distances do not depend on
/// the hyperparameters, so they are computed once per fit.
enum SqDistCache {
    Se(Vec<f64>),
    None,
}

impl SqDistCache {
    fn new(kind: KernelKind, x: &[f64], d: usize, p: usize) -> Self {
        match kind {
            KernelKind::Se if p <= 8192 => {
                let mut sq = vec![0.0; p * p];
                for i in 0..p {
                    for j in 0..i {
                        let mut s = 0.0;
                        for k in 0..d {
                            let e = x[i * d + k] - x[j * d + k];
                            s += e * e;
                        }
                        sq[i * p + j] = s;
                        sq[j * p + i] = s;
                    }
                }
                SqDistCache::Se(sq)
            }
            _ => SqDistCache::None,
        }
    }

    fn matrix(&self, spec: &KernelSpec, x: &[f64], d: usize, noise_var: f64) -> SymMatrix {
        match (self, spec) {
            (
                SqDistCache::Se(sq),
                KernelSpec::Se {
                    signal_std,
                    length_scale,
                },
            ) => {
                let p = (sq.len() as f64).sqrt() as usize;
                let sf2 = signal_std * signal_std;
                let inv = -0.5 / (length_scale * length_scale);
                let mut k = SymMatrix::from_fn(p, |i, j| sf2 * (inv * sq[i * p + j]).exp());
                k.add_diagonal(noise_var);
                k
            }
            _ => kernel_matrix(spec, x, d, noise_var),
        }
    }
}

fn lml_with_escalation(
    spec: &KernelSpec,
    cache: &mut SqDistCache,
    x: &[f64],
    d: usize,
    yc: &[f64],
    base_jitter: f64,
) -> Option<(f64, f64)> {
    let mut jitter = base_jitter;
    for _ in 0..=JITTER_ESCALATIONS {
        let k = cache.matrix(spec, x, d, jitter);
        if let Ok(l) = cholesky_lower(&k) {
            return Some((lml_from_chol(&l, yc), jitter));
        }
        jitter *= 10.0;
    }
    None
}

fn median_pairwise_distance(x: &[f64], d: usize, p: usize) -> f64 {
    let m = p.min(256);
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in 0..i {
            let mut s = 0.0;
            for k in 0..d {
                let e = x[i * d + k] - x[j * d + k];
                s += e * e;
            }
            dists.push(s.sqrt());
        }
    }
    median_positive(dists)
}

fn median_coordinate_distance(x: &[f64], d: usize, p: usize, coord: usize) -> f64 {
    let m = p.min(256);
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in 0..i {
            dists.push((x[i * d + coord] - x[j * d + coord]).abs());
        }
    }
    median_positive(dists)
}

fn median_positive(mut v: Vec<f64>) -> f64 {
    v.retain(|x| *x > 0.0);
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Derivative-free simplex minimization (Nelder-Mead), started from `x0`
/// with an initial simplex edge of `step` in every coordinate.
fn nelder_mead(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_iter: usize,
    ftol: f64,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let fbest = simplex[0].1;
        let fworst = simplex[n].1;
        if (fworst - fbest).abs() <= ftol * (1.0 + fbest.abs()) {
            break;
        }
        // centroid of all but the worst
        let mut c = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (ci, vi) in c.iter_mut().zip(v) {
                *ci += vi / n as f64;
            }
        }
        let worst = simplex[n].0.clone();
        let refl: Vec<f64> = c
            .iter()
            .zip(&worst)
            .map(|(ci, wi)| ci + alpha * (ci - wi))
            .collect();
        let frefl = f(&refl);
        if frefl < simplex[0].1 {
            let exp: Vec<f64> = c
                .iter()
                .zip(&refl)
                .map(|(ci, ri)| ci + gamma * (ri - ci))
                .collect();
            let fexp = f(&exp);
            simplex[n] = if fexp < frefl { (exp, fexp) } else { (refl, frefl) };
        } else if frefl < simplex[n - 1].1 {
            simplex[n] = (refl, frefl);
        } else {
            let con: Vec<f64> = c
                .iter()
                .zip(&worst)
                .map(|(ci, wi)| ci + rho * (wi - ci))
                .collect();
            let fcon = f(&con);
            if fcon < simplex[n].1 {
                simplex[n] = (con, fcon);
            } else {
                // shrink toward the best vertex
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let v: Vec<f64> = best
                        .iter()
                        .zip(&entry.0)
                        .map(|(bi, vi)| bi + sigma * (vi - bi))
                        .collect();
                    let fv = f(&v);
                    *entry = (v, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}
