//! American put pricers under rough Bergomi: a GPR-assisted quadrinomial
//! tree (multi-step Alfonsi discretization of the driving Gaussians) and a
//! GPR pricer with closed-form conditional-Gaussian continuation values.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::gpr::{fit, GprError, GprModel, KernelKind, KernelSpec};
use crate::harness::{PriceReport, StepDiagnostic};
use crate::rbergomi::{alfonsi_nodes, rb_covariance, rb_simulate, RbCovariance, RbError, RbParams, RbPathSet};

/// Non-recombining quadrinomial trees grow 16-fold per step.
pub const MAX_TREE_BLOCK: usize = 3;

#[derive(Debug, Error)]
pub enum RbPricerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("tree block of {0} steps exceeds the supported maximum of {MAX_TREE_BLOCK}")]
    TreeTooDeep(usize),
    #[error(transparent)]
    Model(#[from] RbError),
    #[error(transparent)]
    Fit(#[from] GprError),
}

/// Configuration shared by both rough Bergomi pricers.
#[derive(Debug, Clone, Copy)]
pub struct RbPriceConfig {
    /// Number of Euler time steps to maturity.
    pub n_steps: usize,
    /// Steps per quadrinomial tree block (tree pricer only); must divide
    /// `n_steps`.
    pub tree_block: usize,
    /// Number of simulated paths.
    pub p_count: usize,
    /// History truncation: regressions see the last `history + 1` dates.
    pub history: usize,
    pub maturity: f64,
    pub strike: f64,
    pub seed: u64,
}

impl RbPriceConfig {
    fn validate(&self, need_block: bool) -> Result<(), RbPricerError> {
        if self.n_steps == 0 {
            return Err(RbPricerError::InvalidConfig("n_steps must be positive".into()));
        }
        if self.p_count < 2 {
            return Err(RbPricerError::InvalidConfig("p_count must be at least 2".into()));
        }
        if !(self.maturity > 0.0) {
            return Err(RbPricerError::InvalidConfig("maturity must be positive".into()));
        }
        if !(self.strike > 0.0) {
            return Err(RbPricerError::InvalidConfig("strike must be positive".into()));
        }
        if need_block {
            if self.tree_block == 0 || self.n_steps % self.tree_block != 0 {
                return Err(RbPricerError::InvalidConfig(
                    "tree_block must be positive and divide n_steps".into(),
                ));
            }
            if self.tree_block > MAX_TREE_BLOCK {
                return Err(RbPricerError::TreeTooDeep(self.tree_block));
            }
        }
        Ok(())
    }
}

fn put(strike: f64, s: f64) -> f64 {
    (strike - s).max(0.0)
}

/// Number of predictors for a regression window ending at step `n_end`:
/// (log S, log V) at the last `min(n_end, j + 1)` dates.
fn window_dim(n_end: usize, j: usize) -> usize {
    2 * n_end.min(j + 1)
}

/// Flattened per-path predictors for the window ending at step `n_end`,
/// ordered oldest date first, log-price before log-variance at each date.
fn window_predictors(paths: &RbPathSet, n_end: usize, j: usize) -> Vec<f64> {
    let w = n_end.min(j + 1);
    let mut out = Vec::with_capacity(paths.p_count() * 2 * w);
    for p in 0..paths.p_count() {
        for k in (n_end - w + 1)..=n_end {
            out.push(paths.s(p, k).ln());
            out.push(paths.v(p, k).ln());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// GPR-assisted quadrinomial tree
// ---------------------------------------------------------------------------

/// Continuation value at `t_base` of one path via an `m`-step quadrinomial
/// tree over the future Gaussian coordinates, with the path's own draws
/// frozen in the first `2 * base` coordinates. Interior nodes exercise;
/// the root does not (the caller applies the final max). `terminal_value`
/// receives the synthetic price and variance histories at steps
/// `base + 1 ..= base + m`.
pub fn quadrinomial_continuation(
    params: &RbParams,
    cov: &RbCovariance,
    base: usize,
    m: usize,
    s0: f64,
    v0: f64,
    frozen_g: &[f64],
    strike: f64,
    terminal_value: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
) -> f64 {
    assert!(m >= 1 && m <= MAX_TREE_BLOCK && base + m <= cov.n_steps());
    let dt = cov.dt();
    let disc = (-params.r * dt).exp();
    let alfonsi = alfonsi_nodes();
    let h2 = 2.0 * params.hurst;

    // The tree extends the frozen draws by two Alfonsi-valued coordinates per
    // step; each node tracks its own extension tail.
    struct Walk<'a> {
        params: &'a RbParams,
        cov: &'a RbCovariance,
        base: usize,
        m: usize,
        frozen_g: &'a [f64],
        strike: f64,
        terminal: &'a (dyn Fn(&[f64], &[f64]) -> f64 + Sync),
        disc: f64,
        dt: f64,
        h2: f64,
        support: [f64; 4],
        probs: [f64; 4],
    }

    impl Walk<'_> {
        /// Dot product of a factor row with the hybrid draw vector
        /// (frozen path draws, then the tree tail).
        fn row_dot(&self, row: usize, tail: &[f64]) -> f64 {
            let coeffs = self.cov.lambda().row(row);
            let split = (2 * self.base).min(coeffs.len());
            let mut acc = 0.0;
            for (c, g) in coeffs[..split].iter().zip(self.frozen_g) {
                acc += c * g;
            }
            for (c, g) in coeffs[split..].iter().zip(tail) {
                acc += c * g;
            }
            acc
        }

        fn node(
            &self,
            depth: usize,
            s: f64,
            v: f64,
            tail: &mut Vec<f64>,
            s_hist: &mut Vec<f64>,
            v_hist: &mut Vec<f64>,
        ) -> f64 {
            let k = self.base + depth;
            let t_next = self.dt * (k + 1) as f64;
            let mut acc = 0.0;
            for (gi, pi) in self.support.iter().zip(&self.probs) {
                for (gj, pj) in self.support.iter().zip(&self.probs) {
                    tail.push(*gi);
                    tail.push(*gj);
                    let dw1 = self.row_dot(2 * k, tail);
                    let wh = self.row_dot(2 * k + 1, tail);
                    let s_next = s * ((self.params.r - 0.5 * v) * self.dt + v.sqrt() * dw1).exp();
                    let v_next = self.params.xi0
                        * (-0.5 * self.params.eta * self.params.eta * t_next.powf(self.h2)
                            + self.params.eta * wh)
                            .exp();
                    s_hist.push(s_next);
                    v_hist.push(v_next);
                    let child = if depth + 1 == self.m {
                        (self.terminal)(s_hist, v_hist)
                    } else {
                        let cont = self.node(depth + 1, s_next, v_next, tail, s_hist, v_hist);
                        put(self.strike, s_next).max(cont)
                    };
                    acc += pi * pj * child;
                    s_hist.pop();
                    v_hist.pop();
                    tail.pop();
                    tail.pop();
                }
            }
            self.disc * acc
        }
    }

    let walk = Walk {
        params,
        cov,
        base,
        m,
        frozen_g,
        strike,
        terminal: terminal_value,
        disc,
        dt,
        h2,
        support: alfonsi.support,
        probs: alfonsi.probs,
    };
    walk.node(0, s0, v0, &mut Vec::with_capacity(2 * m), &mut Vec::with_capacity(m), &mut Vec::with_capacity(m))
}

/// Surrogate evaluation on a tree leaf: the path history up to `t_base`
/// extended by the leaf's synthetic observations, windowed to the last
/// `min(base + m, j + 1)` dates.
fn leaf_window_value(
    model: &GprModel,
    paths: &RbPathSet,
    p: usize,
    base: usize,
    j: usize,
    s_hist: &[f64],
    v_hist: &[f64],
) -> f64 {
    let n_end = base + s_hist.len();
    let w = n_end.min(j + 1);
    let mut x = Vec::with_capacity(2 * w);
    for k in (n_end - w + 1)..=n_end {
        let (s, v) = if k > base {
            (s_hist[k - base - 1], v_hist[k - base - 1])
        } else {
            (paths.s(p, k), paths.v(p, k))
        };
        x.push(s.ln());
        x.push(v.ln());
    }
    model.predict(&x).expect("window dimension matches the fitted surrogate")
}

/// American put price via backward induction over quadrinomial tree blocks
/// with GPR regression between blocks.
pub fn price_rb_gpr_tree(params: &RbParams, cfg: &RbPriceConfig) -> Result<PriceReport, RbPricerError> {
    cfg.validate(true)?;
    let start = Instant::now();
    let n = cfg.n_steps;
    let m = cfg.tree_block;
    let cov = rb_covariance(n, cfg.maturity, params.hurst, params.rho)?;
    let paths = rb_simulate(params, &cov, cfg.p_count, cfg.seed);

    let mut surrogate: Option<GprModel> = None;
    let mut per_step = Vec::new();
    let mut base = n - m;
    loop {
        if base == 0 {
            break;
        }
        let paths_ref = &paths;
        let surrogate_ref = &surrogate;
        let values: Vec<f64> = (0..cfg.p_count)
            .into_par_iter()
            .map(|p| {
                let terminal: Box<dyn Fn(&[f64], &[f64]) -> f64 + Sync> = match surrogate_ref {
                    None => Box::new(|s_hist: &[f64], _: &[f64]| put(cfg.strike, *s_hist.last().unwrap())),
                    Some(model) => Box::new(move |s_hist: &[f64], v_hist: &[f64]| {
                        leaf_window_value(model, paths_ref, p, base, cfg.history, s_hist, v_hist)
                    }),
                };
                let cont = quadrinomial_continuation(
                    params,
                    &cov,
                    base,
                    m,
                    paths.s(p, base),
                    paths.v(p, base),
                    paths.g(p),
                    cfg.strike,
                    terminal.as_ref(),
                );
                put(cfg.strike, paths.s(p, base)).max(cont)
            })
            .collect();

        let d = window_dim(base, cfg.history);
        let x = window_predictors(&paths, base, cfg.history);
        let warm = surrogate
            .as_ref()
            .filter(|s| s.dim() == d)
            .map(|s| (s.kernel().clone(), s.noise_var()));
        let model = fit(&x, d, &values, KernelKind::Ard, warm.as_ref().map(|(k, nv)| (k, *nv)))?;
        per_step.push(StepDiagnostic {
            step: base,
            kernel_summary: format!("{:?}", model.kernel()),
            warnings: Vec::new(),
        });
        surrogate = Some(model);
        base -= m;
    }

    // final block from the known initial state; no frozen draws remain
    let model = surrogate;
    let terminal: Box<dyn Fn(&[f64], &[f64]) -> f64 + Sync> = match &model {
        None => Box::new(|s_hist: &[f64], _: &[f64]| put(cfg.strike, *s_hist.last().unwrap())),
        Some(model) => Box::new(move |s_hist: &[f64], v_hist: &[f64]| {
            let n_end = s_hist.len();
            let w = n_end.min(cfg.history + 1);
            let mut x = Vec::with_capacity(2 * w);
            for k in (n_end - w)..n_end {
                x.push(s_hist[k].ln());
                x.push(v_hist[k].ln());
            }
            model.predict(&x).expect("window dimension matches the fitted surrogate")
        }),
    };
    let cont = quadrinomial_continuation(
        params,
        &cov,
        0,
        m,
        params.s0,
        params.xi0,
        &[],
        cfg.strike,
        terminal.as_ref(),
    );
    let price = put(cfg.strike, params.s0).max(cont);
    per_step.reverse();
    Ok(PriceReport {
        price,
        wall_time: start.elapsed().as_secs_f64(),
        per_step,
    })
}

// ---------------------------------------------------------------------------
// Closed-form conditional-Gaussian continuation
// ---------------------------------------------------------------------------

/// Value at the second-to-last date for one path: the terminal payoff
/// surrogate (1-D squared-exponential over log terminal price) convolved
/// with the conditional lognormal transition.
///
/// The conditional law of the log-price over one step has mean
/// `log s_prev + (r - v_prev / 2) dt` and variance `v_prev * dt`.
pub fn prop2_value(
    model: &GprModel,
    s_prev: f64,
    v_prev: f64,
    dt: f64,
    r: f64,
    strike: f64,
) -> f64 {
    let &KernelSpec::Se {
        signal_std,
        length_scale,
    } = model.kernel()
    else {
        panic!("terminal surrogate must use the squared-exponential kernel");
    };
    let mu = s_prev.ln() + (r - 0.5 * v_prev) * dt;
    let var = v_prev * dt;
    let sl2 = length_scale * length_scale;
    let scale = signal_std * signal_std * length_scale / (var + sl2).sqrt();
    let mut acc = 0.0;
    for (q, w) in model.weights().iter().enumerate() {
        let d = model.train_point(q)[0] - mu;
        acc += w * (-d * d / (2.0 * (var + sl2))).exp();
    }
    let cont = (-r * dt).exp() * (model.y_mean() + scale * acc);
    put(strike, s_prev).max(cont)
}

/// Conditional mean and covariance of the next (log-price, log-variance)
/// pair given a path's history through step `n` (0-based factor rows
/// `2n` and `2n + 1` drive the transition to step `n + 1`).
fn conditional_moments(
    params: &RbParams,
    cov: &RbCovariance,
    n: usize,
    s_n: f64,
    v_n: f64,
    g: &[f64],
) -> ([f64; 2], [[f64; 2]; 2]) {
    let dt = cov.dt();
    let t_next = dt * (n + 1) as f64;
    let v_row = cov.lambda().row(2 * n + 1);
    let frozen: f64 = v_row[..2 * n].iter().zip(g).map(|(c, x)| c * x).sum();
    let mu = [
        s_n.ln() + (params.r - 0.5 * v_n) * dt,
        params.xi0.ln() + params.eta * frozen
            - 0.5 * params.eta * params.eta * t_next.powf(2.0 * params.hurst),
    ];
    let lam_sv = v_row[2 * n];
    let lam_vv = v_row[2 * n + 1];
    let a = dt * v_n;
    let c = params.eta * a.sqrt() * lam_sv;
    let b = params.eta * params.eta * (lam_sv * lam_sv + lam_vv * lam_vv);
    (mu, [[a, c], [c, b]])
}

/// Value at step `n` for one path via the bivariate Gaussian convolution of
/// the step-`n + 1` surrogate: an ARD kernel factor over the lagged window
/// (absent at `n = 0`) times a closed-form factor over the two newest
/// predictors.
#[allow(clippy::too_many_arguments)]
pub fn prop3_value(
    model: &GprModel,
    params: &RbParams,
    cov: &RbCovariance,
    n: usize,
    s_n: f64,
    v_n: f64,
    g: &[f64],
    lagged: &[f64],
    strike: f64,
) -> f64 {
    let KernelSpec::Ard {
        signal_std,
        length_scales,
    } = model.kernel()
    else {
        panic!("backward-induction surrogate must use the ARD kernel");
    };
    let d = length_scales.len();
    assert_eq!(lagged.len(), d - 2);
    let (mu, sig) = conditional_moments(params, cov, n, s_n, v_n, g);
    let (sig_s, sig_v) = (length_scales[d - 2], length_scales[d - 1]);
    let m00 = sig[0][0] + sig_s * sig_s;
    let m01 = sig[0][1];
    let m11 = sig[1][1] + sig_v * sig_v;
    let det = m00 * m11 - m01 * m01;
    assert!(det > 0.0, "conditional covariance plus kernel diagonal must be positive definite");
    let (i00, i01, i11) = (m11 / det, -m01 / det, m00 / det);

    let dt = cov.dt();
    let mut acc = 0.0;
    for (q, w) in model.weights().iter().enumerate() {
        let zq = model.train_point(q);
        let mut h = 0.0;
        for i in 0..d - 2 {
            let diff = lagged[i] - zq[i];
            h += diff * diff / (length_scales[i] * length_scales[i]);
        }
        let d0 = zq[d - 2] - mu[0];
        let d1 = zq[d - 1] - mu[1];
        let quad = i00 * d0 * d0 + 2.0 * i01 * d0 * d1 + i11 * d1 * d1;
        acc += w * (-0.5 * (h + quad)).exp();
    }
    let factor = signal_std * signal_std * sig_s * sig_v / det.sqrt();
    let cont = (-params.r * dt).exp() * (model.y_mean() + factor * acc);
    put(strike, s_n).max(cont)
}

/// American put price via backward induction with closed-form conditional
/// continuation values.
pub fn price_rb_gpr_ei(params: &RbParams, cfg: &RbPriceConfig) -> Result<PriceReport, RbPricerError> {
    cfg.validate(false)?;
    let start = Instant::now();
    let n_steps = cfg.n_steps;
    let cov = rb_covariance(n_steps, cfg.maturity, params.hurst, params.rho)?;
    let paths = rb_simulate(params, &cov, cfg.p_count, cfg.seed);
    let dt = cov.dt();
    let mut per_step = Vec::new();

    // terminal payoff surrogate over the log terminal price
    let zt: Vec<f64> = (0..cfg.p_count).map(|p| paths.s(p, n_steps).ln()).collect();
    let yt: Vec<f64> = (0..cfg.p_count).map(|p| put(cfg.strike, paths.s(p, n_steps))).collect();
    let terminal_model = fit(&zt, 1, &yt, KernelKind::Se, None)?;
    per_step.push(StepDiagnostic {
        step: n_steps - 1,
        kernel_summary: format!("{:?}", terminal_model.kernel()),
        warnings: Vec::new(),
    });
    let mut values: Vec<f64> = (0..cfg.p_count)
        .into_par_iter()
        .map(|p| {
            prop2_value(
                &terminal_model,
                paths.s(p, n_steps - 1),
                paths.v(p, n_steps - 1),
                dt,
                params.r,
                cfg.strike,
            )
        })
        .collect();

    if n_steps == 1 {
        let price = prop2_value(&terminal_model, params.s0, params.xi0, dt, params.r, cfg.strike);
        return Ok(PriceReport {
            price,
            wall_time: start.elapsed().as_secs_f64(),
            per_step,
        });
    }

    let mut warm: Option<(KernelSpec, f64)> = None;
    let mut price = 0.0;
    for n in (0..=n_steps - 2).rev() {
        // regress the step-(n + 1) values on the window ending there
        let d = window_dim(n + 1, cfg.history);
        let x = window_predictors(&paths, n + 1, cfg.history);
        let warm_ref = warm
            .as_ref()
            .filter(|(k, _)| k.dim() == Some(d))
            .map(|(k, nv)| (k, *nv));
        let model = fit(&x, d, &values, KernelKind::Ard, warm_ref)?;
        per_step.push(StepDiagnostic {
            step: n,
            kernel_summary: format!("{:?}", model.kernel()),
            warnings: Vec::new(),
        });
        if n > 0 {
            let w = (n + 1).min(cfg.history + 1);
            values = (0..cfg.p_count)
                .into_par_iter()
                .map(|p| {
                    // lagged predictors: the same dates as the surrogate's
                    // window minus its newest pair, from this path's history
                    let mut lagged = Vec::with_capacity(2 * (w - 1));
                    for k in (n + 2 - w)..=n {
                        lagged.push(paths.s(p, k).ln());
                        lagged.push(paths.v(p, k).ln());
                    }
                    prop3_value(
                        &model,
                        params,
                        &cov,
                        n,
                        paths.s(p, n),
                        paths.v(p, n),
                        paths.g(p),
                        &lagged,
                        cfg.strike,
                    )
                })
                .collect();
        } else {
            price = prop3_value(&model, params, &cov, 0, params.s0, params.xi0, &[], &[], cfg.strike);
        }
        warm = Some((model.kernel().clone(), model.noise_var()));
    }

    Ok(PriceReport {
        price,
        wall_time: start.elapsed().as_secs_f64(),
        per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::gaussian_stream_keyed;

    const H: f64 = 0.07;
    const RHO: f64 = -0.9;

    fn reference_params() -> RbParams {
        RbParams::new(100.0, 0.05, 0.09, 1.9, H, RHO).unwrap()
    }

    fn small_cfg(strike: f64) -> RbPriceConfig {
        RbPriceConfig {
            n_steps: 4,
            tree_block: 2,
            p_count: 64,
            history: 1,
            maturity: 1.0,
            seed: 5,
            strike,
        }
    }

    #[test]
    fn quadrinomial_constant_terminal_is_identity_at_zero_rate() {
        let params = RbParams::new(100.0, 0.0, 0.09, 1.9, H, RHO).unwrap();
        let cov = rb_covariance(2, 1.0, H, RHO).unwrap();
        let c = 7.25;
        let got = quadrinomial_continuation(&params, &cov, 0, 1, 100.0, 0.09, &[], 100.0, &|_, _| c);
        assert!((got - c).abs() < 1e-12);
    }

    #[test]
    fn quadrinomial_single_step_matches_hand_sum() {
        // eta = 0 freezes the variance, so the sixteen leaves collapse to
        // four distinct prices driven by the first Alfonsi coordinate alone
        let params = RbParams::new(100.0, 0.05, 0.09, 0.0, H, RHO).unwrap();
        let n = 4;
        let cov = rb_covariance(n, 1.0, H, RHO).unwrap();
        let dt = cov.dt();
        let strike = 105.0;
        let got = quadrinomial_continuation(
            &params,
            &cov,
            0,
            1,
            100.0,
            0.09,
            &[],
            strike,
            &|s_hist, _| (strike - s_hist[0]).max(0.0),
        );
        let a = alfonsi_nodes();
        let lam = cov.lambda().get(0, 0);
        let mut want = 0.0;
        for (gi, pi) in a.support.iter().zip(&a.probs) {
            let s1 = 100.0 * ((params.r - 0.045) * dt + 0.3 * lam * gi).exp();
            want += pi * (strike - s1).max(0.0);
        }
        want *= (-params.r * dt).exp();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn quadrinomial_matches_monte_carlo_block() {
        // two-step block continuation vs brute-force normals in place of the
        // Alfonsi nodes. The terminal function is smooth (log-linear in the
        // leaf state) and the strike is token, so the moment-matched rule is
        // near-exact and the comparison isolates the tree mechanics; kinked
        // payoffs are covered by the end-to-end pricing tests
        let params = RbParams::new(100.0, 0.05, 0.09, 0.4, H, RHO).unwrap();
        let n = 2;
        let cov = rb_covariance(n, 0.5, H, RHO).unwrap();
        let strike = 0.01;
        let dt = cov.dt();
        let smooth = |s2: f64, v2: f64| s2.powf(0.5) + 3.0 * v2.powf(0.2);
        let tree = quadrinomial_continuation(&params, &cov, 0, 2, 100.0, 0.09, &[], strike, &|s, v| {
            smooth(s[1], v[1])
        });

        // replace only the first step's pair of coordinates by true normals;
        // the inner expectation stays the exact sixteen-node sum conditional
        // on the outer draws, so the gap is purely the outer discretization
        let a = alfonsi_nodes();
        let draws = 200_000;
        let disc = (-params.r * dt).exp();
        let t2 = 2.0 * dt;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for i in 0..draws {
            let g = gaussian_stream_keyed(99, i as u64, 2);
            let dw1_1 = cov.lambda().get(0, 0) * g[0];
            let wh_1 = cov.lambda().get(1, 0) * g[0] + cov.lambda().get(1, 1) * g[1];
            let s1 = 100.0 * ((params.r - 0.045) * dt + 0.3 * dw1_1).exp();
            let v1 = params.xi0
                * (-0.5 * params.eta * params.eta * dt.powf(2.0 * H) + params.eta * wh_1).exp();
            let mut inner = 0.0;
            for (gi, pi) in a.support.iter().zip(&a.probs) {
                for (gj, pj) in a.support.iter().zip(&a.probs) {
                    let dw1_2 = cov.lambda().row(2)[0] * g[0]
                        + cov.lambda().row(2)[1] * g[1]
                        + cov.lambda().row(2)[2] * gi;
                    let wh_2 = cov.lambda().row(3)[0] * g[0]
                        + cov.lambda().row(3)[1] * g[1]
                        + cov.lambda().row(3)[2] * gi
                        + cov.lambda().row(3)[3] * gj;
                    let s2 = s1 * ((params.r - 0.5 * v1) * dt + v1.sqrt() * dw1_2).exp();
                    let v2 = params.xi0
                        * (-0.5 * params.eta * params.eta * t2.powf(2.0 * H) + params.eta * wh_2)
                            .exp();
                    inner += pi * pj * smooth(s2, v2);
                }
            }
            let x = disc * put(strike, s1).max(disc * inner);
            acc += x;
            acc2 += x * x;
        }
        let mc = acc / draws as f64;
        let se = ((acc2 / draws as f64 - mc * mc) / draws as f64).sqrt();
        assert!(
            (tree - mc).abs() < (4.0 * se).max(1e-3),
            "tree {tree} vs hybrid Monte Carlo {mc} (se {se})"
        );
    }

    #[test]
    fn deep_itm_puts_exercise_immediately() {
        let params = reference_params();
        for strike in [130.0, 140.0] {
            let tree = price_rb_gpr_tree(&params, &small_cfg(strike)).unwrap();
            assert_eq!(tree.price, strike - 100.0, "tree K={strike}");
            let ei = price_rb_gpr_ei(&params, &small_cfg(strike)).unwrap();
            assert_eq!(ei.price, strike - 100.0, "ei K={strike}");
        }
    }

    #[test]
    fn prices_bounded_and_monotone_in_strike() {
        let params = reference_params();
        let mut last_tree = 0.0;
        let mut last_ei = 0.0;
        for strike in [70.0, 100.0, 140.0] {
            let tree = price_rb_gpr_tree(&params, &small_cfg(strike)).unwrap().price;
            let ei = price_rb_gpr_ei(&params, &small_cfg(strike)).unwrap().price;
            for price in [tree, ei] {
                assert!(price >= (strike - 100.0f64).max(0.0) - 1e-12);
                assert!(price <= strike);
            }
            assert!(tree >= last_tree && ei >= last_ei, "K={strike}");
            last_tree = tree;
            last_ei = ei;
        }
    }

    #[test]
    fn pricers_are_deterministic() {
        let params = reference_params();
        let cfg = small_cfg(100.0);
        let a = price_rb_gpr_tree(&params, &cfg).unwrap().price;
        let b = price_rb_gpr_tree(&params, &cfg).unwrap().price;
        assert_eq!(a, b);
        let c = price_rb_gpr_ei(&params, &cfg).unwrap().price;
        let d = price_rb_gpr_ei(&params, &cfg).unwrap().price;
        assert_eq!(c, d);
    }

    #[test]
    fn prop2_zero_variance_collapses_to_point_evaluation() {
        let params = reference_params();
        let cov = rb_covariance(2, 1.0, H, RHO).unwrap();
        let paths = rb_simulate(&params, &cov, 32, 1);
        let zt: Vec<f64> = (0..32).map(|p| paths.s(p, 2).ln()).collect();
        let yt: Vec<f64> = (0..32).map(|p| put(100.0, paths.s(p, 2))).collect();
        let model = fit(&zt, 1, &yt, KernelKind::Se, None).unwrap();
        let dt = cov.dt();
        let r = params.r;
        let got = prop2_value(&model, 100.0, 0.0, dt, r, 100.0);
        let mu = 100.0f64.ln() + r * dt;
        let want = ((-r * dt).exp() * model.predict(&[mu]).unwrap()).max(0.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn prop2_matches_quadrature() {
        let params = reference_params();
        let cov = rb_covariance(2, 1.0, H, RHO).unwrap();
        let paths = rb_simulate(&params, &cov, 64, 2);
        let zt: Vec<f64> = (0..64).map(|p| paths.s(p, 2).ln()).collect();
        let yt: Vec<f64> = (0..64).map(|p| put(100.0, paths.s(p, 2))).collect();
        let model = fit(&zt, 1, &yt, KernelKind::Se, None).unwrap();
        let dt = cov.dt();
        let (s_prev, v_prev) = (92.0, 0.12);
        let got = prop2_value(&model, s_prev, v_prev, dt, params.r, 1.0); // strike 1: continuation wins
        let mu = s_prev.ln() + (params.r - 0.5 * v_prev) * dt;
        let sd = (v_prev * dt).sqrt();
        let steps = 400_000;
        let lo = mu - 8.0 * sd;
        let hi = mu + 8.0 * sd;
        let hstep = (hi - lo) / steps as f64;
        let mut acc = 0.0;
        for i in 0..=steps {
            let z = lo + hstep * i as f64;
            let pdf = (-0.5 * ((z - mu) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            let wq = if i == 0 || i == steps { 0.5 } else { 1.0 };
            acc += wq * pdf * model.predict(&[z]).unwrap();
        }
        let want = (-params.r * dt).exp() * acc * hstep;
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn prop3_matches_conditional_monte_carlo() {
        // full-history window (large J): the closed-form continuation must
        // agree with brute-force conditional sampling of the next pair
        let params = reference_params();
        let n_steps = 3;
        let cov = rb_covariance(n_steps, 0.75, H, RHO).unwrap();
        let p_count = 48;
        let paths = rb_simulate(&params, &cov, p_count, 3);
        let strike = 100.0;
        let j = 10; // covers the whole history
        let n = 1usize;
        let d = window_dim(n + 1, j);
        let x = window_predictors(&paths, n + 1, j);
        let y: Vec<f64> = (0..p_count).map(|p| put(strike, paths.s(p, n + 1))).collect();
        let model = fit(&x, d, &y, KernelKind::Ard, None).unwrap();
        let dt = cov.dt();

        for p in [0usize, 7, 23] {
            let mut lagged = Vec::new();
            for k in 1..=n {
                lagged.push(paths.s(p, k).ln());
                lagged.push(paths.v(p, k).ln());
            }
            let got = prop3_value(
                &model, &params, &cov, n, paths.s(p, n), paths.v(p, n), paths.g(p), &lagged, 1.0,
            );

            // conditional draws: freeze the path's first 2n coordinates and
            // resample the step-(n + 1) pair
            let draws = 100_000;
            let g_frozen = &paths.g(p)[..2 * n];
            let s_row = cov.lambda().row(2 * n);
            let v_row = cov.lambda().row(2 * n + 1);
            let frozen_s: f64 = s_row[..2 * n].iter().zip(g_frozen).map(|(c, g)| c * g).sum();
            let frozen_v: f64 = v_row[..2 * n].iter().zip(g_frozen).map(|(c, g)| c * g).sum();
            let t_next = dt * (n + 1) as f64;
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for i in 0..draws {
                let gs = gaussian_stream_keyed(777, i as u64, 2);
                let dw1 = frozen_s + s_row[2 * n] * gs[0];
                let wh = frozen_v + v_row[2 * n] * gs[0] + v_row[2 * n + 1] * gs[1];
                let s_next = paths.s(p, n)
                    * ((params.r - 0.5 * paths.v(p, n)) * dt + paths.v(p, n).sqrt() * dw1).exp();
                let v_next = params.xi0
                    * (-0.5 * params.eta * params.eta * t_next.powf(2.0 * H) + params.eta * wh)
                        .exp();
                let mut xq = lagged.clone();
                xq.push(s_next.ln());
                xq.push(v_next.ln());
                let u = (-params.r * dt).exp() * model.predict(&xq).unwrap();
                acc += u;
                acc2 += u * u;
            }
            let mc = acc / draws as f64;
            let se = ((acc2 / draws as f64 - mc * mc) / draws as f64).sqrt();
            assert!(
                (got - mc).abs() < 3.0 * se.max(1e-6),
                "path {p}: {got} vs {mc} (se {se})"
            );
        }
    }

    #[test]
    fn prop3_factor_matches_tensor_quadrature() {
        // the bivariate convolution factor against brute-force integration
        // of the Gaussian density times the kernel's two newest coordinates
        let params = reference_params();
        let cov = rb_covariance(3, 0.75, H, RHO).unwrap();
        let paths = rb_simulate(&params, &cov, 32, 9);
        let strike = 100.0;
        let n = 1usize;
        let j = 0usize;
        let d = window_dim(n + 1, j);
        assert_eq!(d, 2);
        let x = window_predictors(&paths, n + 1, j);
        let y: Vec<f64> = (0..32).map(|p| put(strike, paths.s(p, n + 1))).collect();
        let model = fit(&x, d, &y, KernelKind::Ard, None).unwrap();

        let p = 4;
        let got = prop3_value(
            &model, &params, &cov, n, paths.s(p, n), paths.v(p, n), paths.g(p), &[], 1.0,
        );

        let (mu, sig) = conditional_moments(&params, &cov, n, paths.s(p, n), paths.v(p, n), paths.g(p));
        // dense trapezoid over +/- 8 marginal standard deviations
        let det = sig[0][0] * sig[1][1] - sig[0][1] * sig[0][1];
        let (i00, i01, i11) = (sig[1][1] / det, -sig[0][1] / det, sig[0][0] / det);
        let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
        let (sd0, sd1) = (sig[0][0].sqrt(), sig[1][1].sqrt());
        let steps = 1200usize;
        let (h0, h1) = (16.0 * sd0 / steps as f64, 16.0 * sd1 / steps as f64);
        let mut acc = 0.0;
        for i in 0..=steps {
            let z0 = mu[0] - 8.0 * sd0 + h0 * i as f64;
            let w0 = if i == 0 || i == steps { 0.5 } else { 1.0 };
            for k in 0..=steps {
                let z1 = mu[1] - 8.0 * sd1 + h1 * k as f64;
                let w1 = if k == 0 || k == steps { 0.5 } else { 1.0 };
                let d0 = z0 - mu[0];
                let d1 = z1 - mu[1];
                let pdf = norm * (-0.5 * (i00 * d0 * d0 + 2.0 * i01 * d0 * d1 + i11 * d1 * d1)).exp();
                acc += w0 * w1 * pdf * model.predict(&[z0, z1]).unwrap();
            }
        }
        let want = (-params.r * cov.dt()).exp() * acc * h0 * h1;
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }
}
