//! Multi-dimensional Black-Scholes model: parameters, basket payoffs, the
//! one-step equiprobable 2^d children generator, and reference pricers
//! (1-D CRR, full multi-dimensional equiprobable lattice, geometric-basket
//! dimensional reduction).

use thiserror::Error;

use crate::linalg::{cholesky_lower_semidefinite, LinalgError, LowerTriangular, SymMatrix};
use crate::sampling::normal_cdf;

/// Hard cap for the 2^d children generator.
pub const MAX_TREE_DIMENSION: usize = 20;
/// Memory guard for the full multi-dimensional lattice.
pub const MAX_LATTICE_DIMENSION: usize = 5;

#[derive(Debug, Error)]
pub enum BsError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("dimension {0} too large for this operation (cap {1})")]
    DimensionTooLarge(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Market/model parameters of the d-dimensional Black-Scholes basket.
#[derive(Debug, Clone)]
pub struct BsParams {
    spot: Vec<f64>,
    rate: f64,
    vols: Vec<f64>,
    corr: SymMatrix,
    chol: LowerTriangular,
}

impl BsParams {
    pub fn new(
        spot: Vec<f64>,
        rate: f64,
        vols: Vec<f64>,
        corr: SymMatrix,
    ) -> Result<Self, BsError> {
        let d = spot.len();
        if d == 0 {
            return Err(BsError::InvalidParams("empty spot vector".into()));
        }
        if vols.len() != d || corr.n() != d {
            return Err(BsError::InvalidParams(format!(
                "inconsistent dimensions: {} spots, {} vols, {}x{} correlation",
                d,
                vols.len(),
                corr.n(),
                corr.n()
            )));
        }
        if spot.iter().any(|&s| !(s > 0.0)) {
            return Err(BsError::InvalidParams("spots must be positive".into()));
        }
        if vols.iter().any(|&v| !(v >= 0.0)) {
            return Err(BsError::InvalidParams("vols must be nonnegative".into()));
        }
        for i in 0..d {
            if (corr.get(i, i) - 1.0).abs() > 1e-12 {
                return Err(BsError::InvalidParams("correlation diagonal must be 1".into()));
            }
            for j in 0..i {
                if corr.get(i, j).abs() > 1.0 {
                    return Err(BsError::InvalidParams(
                        "correlation entries must lie in [-1,1]".into(),
                    ));
                }
            }
        }
        let chol = cholesky_lower_semidefinite(&corr)?;
        Ok(Self {
            spot,
            rate,
            vols,
            corr,
            chol,
        })
    }

    /// Equicorrelated basket with common spot and vol; the usual test grid.
    pub fn equicorrelated(
        d: usize,
        spot: f64,
        rate: f64,
        vol: f64,
        rho: f64,
    ) -> Result<Self, BsError> {
        let corr = SymMatrix::from_fn(d, |i, j| if i == j { 1.0 } else { rho });
        Self::new(vec![spot; d], rate, vec![vol; d], corr)
    }

    pub fn d(&self) -> usize {
        self.spot.len()
    }

    pub fn spot(&self) -> &[f64] {
        &self.spot
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn vols(&self) -> &[f64] {
        &self.vols
    }

    pub fn corr(&self) -> &SymMatrix {
        &self.corr
    }

    /// Cached Cholesky factor of the correlation matrix.
    pub fn chol(&self) -> &LowerTriangular {
        &self.chol
    }
}

/// Basket payoff at exercise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payoff {
    GeometricPut { strike: f64 },
    ArithmeticPut { strike: f64 },
    CallOnMax { strike: f64 },
}

impl Payoff {
    pub fn strike(&self) -> f64 {
        match *self {
            Payoff::GeometricPut { strike }
            | Payoff::ArithmeticPut { strike }
            | Payoff::CallOnMax { strike } => strike,
        }
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        let d = s.len() as f64;
        match *self {
            Payoff::GeometricPut { strike } => {
                let log_mean = s.iter().map(|x| x.ln()).sum::<f64>() / d;
                (strike - log_mean.exp()).max(0.0)
            }
            Payoff::ArithmeticPut { strike } => {
                let mean = s.iter().sum::<f64>() / d;
                (strike - mean).max(0.0)
            }
            Payoff::CallOnMax { strike } => {
                let max = s.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                (max - strike).max(0.0)
            }
        }
    }
}

/// Calls `f` with each of the 2^d equiprobable one-step children of `x`.
///
/// Child k has coordinate i equal to
/// `x_i * exp((r - sigma_i^2/2) dt + sigma_i sqrt(dt) Sigma_i . G_k)` with
/// `G_k` read off the binary digits of k-1 (most significant bit = asset 1)
/// mapped {0,1} -> {-1,+1}. Children are streamed into a reused buffer and
/// never materialized as a whole.
pub fn for_each_ekvall_child(
    params: &BsParams,
    x: &[f64],
    dt: f64,
    mut f: impl FnMut(&[f64]),
) -> Result<(), BsError> {
    let d = params.d();
    if d > MAX_TREE_DIMENSION {
        return Err(BsError::DimensionTooLarge(d, MAX_TREE_DIMENSION));
    }
    assert_eq!(x.len(), d);
    let chol = params.chol();
    let sqrt_dt = dt.sqrt();
    // a[i][j] = sigma_i sqrt(dt) Sigma_{ij}; drift_i = (r - sigma_i^2/2) dt
    let drift: Vec<f64> = params
        .vols
        .iter()
        .map(|&s| (params.rate - 0.5 * s * s) * dt)
        .collect();
    let a: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            chol.row(i)
                .iter()
                .map(|&l| params.vols[i] * sqrt_dt * l)
                .collect()
        })
        .collect();
    let mut child = vec![0.0; d];
    let mut signs = vec![-1.0f64; d];
    for k in 0..(1usize << d) {
        for (j, s) in signs.iter_mut().enumerate() {
            // most significant bit = asset 1
            *s = if k >> (d - 1 - j) & 1 == 1 { 1.0 } else { -1.0 };
        }
        for i in 0..d {
            let corr: f64 = a[i].iter().zip(&signs).map(|(aij, s)| aij * s).sum();
            child[i] = x[i] * (drift[i] + corr).exp();
        }
        f(&child);
    }
    Ok(())
}

/// Materialized children, for small d and tests.
pub fn ekvall_children(params: &BsParams, x: &[f64], dt: f64) -> Result<Vec<Vec<f64>>, BsError> {
    let mut out = Vec::with_capacity(1 << params.d());
    for_each_ekvall_child(params, x, dt, |c| out.push(c.to_vec()))?;
    Ok(out)
}

/// Cox-Ross-Rubinstein Bermudan price for a single underlying with a
/// continuous dividend yield. Exercise is permitted only every
/// `steps / n_exercise_dates` steps (and immediately at t=0).
pub fn crr_american_price_1d(
    spot: f64,
    rate: f64,
    dividend: f64,
    vol: f64,
    maturity: f64,
    steps: usize,
    n_exercise_dates: usize,
    payoff: impl Fn(f64) -> f64,
) -> f64 {
    assert!(steps >= 1 && n_exercise_dates >= 1);
    assert!(
        steps % n_exercise_dates == 0,
        "steps must be a multiple of the exercise-date count"
    );
    let dt = maturity / steps as f64;
    let stride = steps / n_exercise_dates;
    if vol <= 1e-12 {
        // deterministic underlying: optimal stopping over the exercise dates
        let mut best = payoff(spot);
        for k in 1..=n_exercise_dates {
            let t = maturity * k as f64 / n_exercise_dates as f64;
            best = best.max((-rate * t).exp() * payoff(spot * ((rate - dividend) * t).exp()));
        }
        return best;
    }
    let u = (vol * dt.sqrt()).exp();
    let dn = 1.0 / u;
    let p = (((rate - dividend) * dt).exp() - dn) / (u - dn);
    assert!(
        (0.0..=1.0).contains(&p),
        "CRR risk-neutral probability outside [0,1]; refine the time step"
    );
    let disc = (-rate * dt).exp();
    let mut values: Vec<f64> = (0..=steps)
        .map(|j| payoff(spot * u.powi(j as i32) * dn.powi((steps - j) as i32)))
        .collect();
    for n in (0..steps).rev() {
        for j in 0..=n {
            values[j] = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
        }
        if n % stride == 0 {
            for j in 0..=n {
                let s = spot * u.powi(j as i32) * dn.powi((n - j) as i32);
                values[j] = values[j].max(payoff(s));
            }
        }
    }
    values[0]
}

/// Parameters of the 1-D geometric Brownian motion followed by the
/// geometric mean of the basket: effective spot, effective volatility and
/// the effective continuous dividend yield.
pub fn geometric_reduction(params: &BsParams) -> (f64, f64, f64) {
    let d = params.d();
    let df = d as f64;
    let mut var = 0.0;
    for i in 0..d {
        for j in 0..d {
            var += params.corr.get(i, j) * params.vols[i] * params.vols[j];
        }
    }
    var /= df * df;
    let eff_vol = var.sqrt();
    let eff_spot = (params.spot.iter().map(|s| s.ln()).sum::<f64>() / df).exp();
    let eff_div = params.vols.iter().map(|s| s * s).sum::<f64>() / (2.0 * df) - 0.5 * var;
    (eff_spot, eff_vol, eff_div)
}

/// Full multi-dimensional equiprobable lattice price. The lattice recombines
/// in the d Brownian factors, so step n holds (n+1)^d nodes; memory limits
/// this to small d.
pub fn ekvall_tree_price(
    params: &BsParams,
    payoff: Payoff,
    maturity: f64,
    steps: usize,
    n_exercise_dates: usize,
) -> Result<f64, BsError> {
    let d = params.d();
    if d > MAX_LATTICE_DIMENSION {
        return Err(BsError::DimensionTooLarge(d, MAX_LATTICE_DIMENSION));
    }
    assert!(steps >= 1 && steps % n_exercise_dates == 0);
    let dt = maturity / steps as f64;
    let stride = steps / n_exercise_dates;
    let sqrt_dt = dt.sqrt();
    let chol = params.chol();
    let drift: Vec<f64> = params
        .vols
        .iter()
        .map(|&s| (params.rate - 0.5 * s * s) * dt)
        .collect();
    let a: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| params.vols[i] * sqrt_dt * chol.get(i, j))
                .collect()
        })
        .collect();

    // node (k_1..k_d) at step n: asset i price is
    // s0_i * exp(n*drift_i + sum_j a[i][j]*(2k_j - n))
    let price_at = |n: usize, ks: &[usize], out: &mut [f64]| {
        for i in 0..d {
            let mut e = drift[i] * n as f64;
            for j in 0..d {
                e += a[i][j] * (2.0 * ks[j] as f64 - n as f64);
            }
            out[i] = params.spot[i] * e.exp();
        }
    };
    let nodes_at = |n: usize| (n + 1).pow(d as u32);
    let disc = (-params.rate * dt).exp();

    // terminal layer
    let mut ks = vec![0usize; d];
    let mut s = vec![0.0; d];
    let mut values: Vec<f64> = Vec::with_capacity(nodes_at(steps));
    for idx in 0..nodes_at(steps) {
        decode_mixed_radix(idx, steps + 1, &mut ks);
        price_at(steps, &ks, &mut s);
        values.push(payoff.eval(&s));
    }

    for n in (0..steps).rev() {
        let base_next = n + 2; // radix of the layer we are consuming
        let mut next_values = Vec::with_capacity(nodes_at(n));
        let mut child = vec![0usize; d];
        for idx in 0..nodes_at(n) {
            decode_mixed_radix(idx, n + 1, &mut ks);
            let mut acc = 0.0;
            for b in 0..(1usize << d) {
                for j in 0..d {
                    child[j] = ks[j] + (b >> j & 1);
                }
                acc += values[encode_mixed_radix(&child, base_next)];
            }
            let mut v = disc * acc / (1 << d) as f64;
            if n % stride == 0 {
                price_at(n, &ks, &mut s);
                v = v.max(payoff.eval(&s));
            }
            next_values.push(v);
        }
        values = next_values;
    }
    Ok(values[0])
}

fn decode_mixed_radix(mut idx: usize, base: usize, out: &mut [usize]) {
    for k in out.iter_mut() {
        *k = idx % base;
        idx /= base;
    }
}

fn encode_mixed_radix(ks: &[usize], base: usize) -> usize {
    ks.iter().rev().fold(0, |acc, &k| acc * base + k)
}

/// Black-Scholes European price with continuous dividend yield; test oracle
/// and benchmark helper.
pub fn black_scholes_european(
    spot: f64,
    strike: f64,
    rate: f64,
    dividend: f64,
    vol: f64,
    maturity: f64,
    is_call: bool,
) -> f64 {
    if vol <= 1e-12 || maturity <= 0.0 {
        let fwd = spot * ((rate - dividend) * maturity).exp();
        let intrinsic = if is_call { fwd - strike } else { strike - fwd };
        return (-rate * maturity).exp() * intrinsic.max(0.0);
    }
    let sig = vol * maturity.sqrt();
    let d1 = ((spot / strike).ln() + (rate - dividend + 0.5 * vol * vol) * maturity) / sig;
    let d2 = d1 - sig;
    let df_r = (-rate * maturity).exp();
    let df_q = (-dividend * maturity).exp();
    if is_call {
        spot * df_q * normal_cdf(d1) - strike * df_r * normal_cdf(d2)
    } else {
        strike * df_r * normal_cdf(-d2) - spot * df_q * normal_cdf(-d1)
    }
}
