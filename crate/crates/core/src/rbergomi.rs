//! Rough Bergomi model machinery: the joint Gaussian covariance of price
//! increments and Riemann-Liouville fractional Brownian values, its
//! Cholesky factor, Euler path simulation, and the Alfonsi four-point
//! discretization of a standard Gaussian.

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{
    cholesky_lower, singular_gauss_legendre, LinalgError, LowerTriangular, SymMatrix,
};
use crate::sampling::gaussian_stream_keyed;

#[derive(Debug, Error)]
pub enum RbError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Rough Bergomi parameters with a flat forward-variance curve.
#[derive(Debug, Clone, Copy)]
pub struct RbParams {
    pub s0: f64,
    pub r: f64,
    pub xi0: f64,
    pub eta: f64,
    pub hurst: f64,
    pub rho: f64,
}

impl RbParams {
    pub fn new(s0: f64, r: f64, xi0: f64, eta: f64, hurst: f64, rho: f64) -> Result<Self, RbError> {
        if !(s0 > 0.0) {
            return Err(RbError::InvalidParams("spot must be positive".into()));
        }
        if !(xi0 > 0.0) {
            return Err(RbError::InvalidParams("xi0 must be positive".into()));
        }
        if !(eta >= 0.0) {
            return Err(RbError::InvalidParams("eta must be nonnegative".into()));
        }
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(RbError::InvalidParams("hurst must lie in (0,1)".into()));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return Err(RbError::InvalidParams("rho must lie in [-1,1]".into()));
        }
        Ok(Self {
            s0,
            r,
            xi0,
            eta,
            hurst,
            rho,
        })
    }
}

/// Covariance of R = (dW1_1, W~_t1, dW1_2, W~_t2, ..., dW1_N, W~_tN) and
/// its Cholesky factor.
#[derive(Debug, Clone)]
pub struct RbCovariance {
    n_steps: usize,
    dt: f64,
    upsilon: SymMatrix,
    lambda: LowerTriangular,
}

impl RbCovariance {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn upsilon(&self) -> &SymMatrix {
        &self.upsilon
    }

    pub fn lambda(&self) -> &LowerTriangular {
        &self.lambda
    }
}

const FBM_QUAD_NODES: usize = 64;

/// Cross-time covariance of the Riemann-Liouville fBm at s < t:
/// 2H s^{2H} int_0^1 (1-u)^{H-1/2} (t/s - u)^{H-1/2} du.
fn fbm_cross_cov(h: f64, s: f64, t: f64) -> f64 {
    debug_assert!(s <= t);
    if s == 0.0 {
        return 0.0;
    }
    if s == t {
        return s.powf(2.0 * h);
    }
    let ratio = t / s;
    let e = h - 0.5;
    let integral = singular_gauss_legendre(
        &|u: f64| (1.0 - u).powf(e) * (ratio - u).powf(e),
        h + 0.5,
        FBM_QUAD_NODES,
    )
    .expect("exponent h + 1/2 lies in (0,1) for h in (0,1/2); clamped below");
    2.0 * h * s.powf(2.0 * h) * integral
}

/// Plain integral for H >= 1/2 where the integrand is not singular.
fn fbm_cross_cov_smooth(h: f64, s: f64, t: f64) -> f64 {
    let ratio = t / s;
    let e = h - 0.5;
    let (xs, ws) = crate::linalg::gauss_legendre(FBM_QUAD_NODES);
    let mut acc = 0.0;
    for (&x, &w) in xs.iter().zip(&ws) {
        let u = 0.5 * (x + 1.0);
        acc += 0.5 * w * (1.0 - u).powf(e) * (ratio - u).powf(e);
    }
    2.0 * h * s.powf(2.0 * h) * acc
}

/// Assembles the 2N x 2N covariance of R and factorizes it, escalating a
/// diagonal jitter on roundoff-level indefiniteness.
pub fn rb_covariance(n_steps: usize, maturity: f64, h: f64, rho: f64) -> Result<RbCovariance, RbError> {
    assert!(n_steps >= 1);
    if !(h > 0.0 && h < 1.0) {
        return Err(RbError::InvalidParams("hurst must lie in (0,1)".into()));
    }
    let n = n_steps;
    let dt = maturity / n as f64;
    let t = |k: usize| dt * k as f64;
    let cross = 2.0 * rho * (2.0 * h).sqrt() / (2.0 * h + 1.0);
    let hp = h + 0.5;

    let mut ups = SymMatrix::zeros(2 * n);
    for m in 1..=n {
        for k in 1..=n {
            // price-increment block: independent increments
            if m == k {
                ups.set(2 * m - 2, 2 * k - 2, dt);
            }
            // dW1_m against W~_tk: zero for m > k
            if m <= k {
                let v = cross * ((t(k) - t(m - 1)).powf(hp) - (t(k) - t(m)).powf(hp));
                ups.set(2 * m - 2, 2 * k - 1, v);
                ups.set(2 * k - 1, 2 * m - 2, v);
            }
            // fBm block
            if m <= k {
                let (s_t, t_t) = (t(m), t(k));
                let v = if h < 0.5 {
                    fbm_cross_cov(h, s_t, t_t)
                } else if m == k {
                    s_t.powf(2.0 * h)
                } else {
                    fbm_cross_cov_smooth(h, s_t, t_t)
                };
                ups.set(2 * m - 1, 2 * k - 1, v);
                ups.set(2 * k - 1, 2 * m - 1, v);
            }
        }
    }

    // factorize, escalating jitter on roundoff-level failures
    let max_diag = (0..2 * n).fold(0.0f64, |a, i| a.max(ups.get(i, i)));
    let mut jitter = 0.0;
    let mut last_err = None;
    for attempt in 0..=4 {
        let mut m = ups.clone();
        if jitter > 0.0 {
            m.add_diagonal(jitter);
        }
        match cholesky_lower(&m) {
            Ok(lambda) => {
                return Ok(RbCovariance {
                    n_steps: n,
                    dt,
                    upsilon: ups,
                    lambda,
                })
            }
            Err(e) => {
                last_err = Some(e);
                jitter = if attempt == 0 {
                    1e-12 * max_diag
                } else {
                    jitter * 10.0
                };
            }
        }
    }
    Err(RbError::Linalg(last_err.unwrap()))
}

/// Simulated Euler paths plus the standard-normal draws that generated
/// them (needed later for conditioning).
#[derive(Debug, Clone)]
pub struct RbPathSet {
    p_count: usize,
    n_steps: usize,
    s: Vec<f64>,
    v: Vec<f64>,
    g: Vec<f64>,
}

impl RbPathSet {
    pub fn p_count(&self) -> usize {
        self.p_count
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Price of path p at step n (n = 0 is the spot).
    pub fn s(&self, p: usize, n: usize) -> f64 {
        self.s[p * (self.n_steps + 1) + n]
    }

    /// Spot variance of path p at step n (n = 0 is xi0).
    pub fn v(&self, p: usize, n: usize) -> f64 {
        self.v[p * (self.n_steps + 1) + n]
    }

    /// The 2N standard-normal draws of path p.
    pub fn g(&self, p: usize) -> &[f64] {
        &self.g[p * 2 * self.n_steps..(p + 1) * 2 * self.n_steps]
    }
}

/// Euler simulation: R^p = Lambda G^p, then
/// S_{n+1} = S_n exp((r - V_n/2) dt + sqrt(V_n) dW1_{n+1}),
/// V_{n+1} = xi0 exp(-eta^2 t_{n+1}^{2H} / 2 + eta W~_{t_{n+1}}).
pub fn rb_simulate(params: &RbParams, cov: &RbCovariance, p_count: usize, seed: u64) -> RbPathSet {
    let n = cov.n_steps;
    let dt = cov.dt;
    let per_path: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..p_count)
        .into_par_iter()
        .map(|p| {
            let g = gaussian_stream_keyed(seed, p as u64, 2 * n);
            let mut s = Vec::with_capacity(n + 1);
            let mut v = Vec::with_capacity(n + 1);
            s.push(params.s0);
            v.push(params.xi0);
            for k in 1..=n {
                let dw1 = cov.lambda.row(2 * k - 2).iter().zip(&g).map(|(l, x)| l * x).sum::<f64>();
                let wh = cov.lambda.row(2 * k - 1).iter().zip(&g).map(|(l, x)| l * x).sum::<f64>();
                let t_k = dt * k as f64;
                let prev_s = s[k - 1];
                let prev_v = v[k - 1];
                s.push(prev_s * ((params.r - 0.5 * prev_v) * dt + prev_v.sqrt() * dw1).exp());
                v.push(
                    params.xi0
                        * (-0.5 * params.eta * params.eta * t_k.powf(2.0 * params.hurst)
                            + params.eta * wh)
                            .exp(),
                );
            }
            (s, v, g)
        })
        .collect();
    let mut s = Vec::with_capacity(p_count * (n + 1));
    let mut v = Vec::with_capacity(p_count * (n + 1));
    let mut g = Vec::with_capacity(p_count * 2 * n);
    for (ps, pv, pg) in per_path {
        s.extend(ps);
        v.extend(pv);
        g.extend(pg);
    }
    RbPathSet {
        p_count,
        n_steps: n,
        s,
        v,
        g,
    }
}

/// Four-point discretization matching the first seven Gaussian moments.
#[derive(Debug, Clone, Copy)]
pub struct AlfonsiVar {
    pub support: [f64; 4],
    pub probs: [f64; 4],
}

pub fn alfonsi_nodes() -> AlfonsiVar {
    let s6 = 6.0f64.sqrt();
    let a = (3.0 + s6).sqrt();
    let b = (3.0 - s6).sqrt();
    let p1 = (s6 - 2.0) / (4.0 * s6);
    let p2 = 0.5 - p1;
    AlfonsiVar {
        support: [a, -a, b, -b],
        probs: [p1, p1, p2, p2],
    }
}
