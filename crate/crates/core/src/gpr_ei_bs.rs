//! GPR-EI pricer for the multi-dimensional Black-Scholes model. Works on
//! the driftless coordinates Z_t = log S_t - (r - sigma^2/2) t: the grid of
//! z-points built from the terminal cloud is valid at every time step, and
//! the conditional expectation of the SE-kernel surrogate over one Gaussian
//! log-increment has a closed form (a convolution of two Gaussians), so no
//! inner sampling or quadrature is ever needed.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::bs_model::{BsError, BsParams, Payoff};
use crate::gpr::{fit, GprError, GprModel, KernelKind, KernelSpec};
use crate::harness::{PriceReport, StepDiagnostic};
use crate::linalg::{cholesky_lower, forward_solve, LowerTriangular, SymMatrix};
use crate::sampling::{build_state_cloud, SamplingError, StateCloud};

#[derive(Debug, Error)]
pub enum EiBsError {
    #[error(transparent)]
    Model(#[from] BsError),
    #[error(transparent)]
    Gpr(#[from] GprError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error("surrogate must use the isotropic SE kernel")]
    KernelNotSe,
}

/// Fixed evaluation grid in z-space plus the one-step log-increment
/// covariance; both are constant across the backward induction.
#[derive(Debug, Clone)]
pub struct ZGrid {
    d: usize,
    p_count: usize,
    z_points: Vec<f64>,
    pi: SymMatrix,
}

impl ZGrid {
    /// z^p = log(x^p) - (r - sigma^2/2) T componentwise;
    /// Pi_ij = rho_ij sigma_i sigma_j dt.
    pub fn build(params: &BsParams, cloud: &StateCloud, maturity: f64, dt: f64) -> Self {
        let d = params.d();
        let p_count = cloud.p_count();
        let mut z_points = vec![0.0; p_count * d];
        for p in 0..p_count {
            let logs = cloud.log_point(p);
            for i in 0..d {
                let s = params.vols()[i];
                z_points[p * d + i] = logs[i] - (params.rate() - 0.5 * s * s) * maturity;
            }
        }
        let pi = SymMatrix::from_fn(d, |i, j| {
            params.corr().get(i, j) * params.vols()[i] * params.vols()[j] * dt
        });
        Self {
            d,
            p_count,
            z_points,
            pi,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p_count(&self) -> usize {
        self.p_count
    }

    pub fn z_point(&self, p: usize) -> &[f64] {
        &self.z_points[p * self.d..(p + 1) * self.d]
    }

    pub fn z_points_flat(&self) -> &[f64] {
        &self.z_points
    }

    pub fn pi(&self) -> &SymMatrix {
        &self.pi
    }
}

/// Price point at which the payoff is evaluated for a z-grid point at time
/// t: exp(z + (r - sigma^2/2) t) componentwise.
pub fn exercise_price_at(z: &[f64], t: f64, params: &BsParams) -> Vec<f64> {
    z.iter()
        .zip(params.vols())
        .map(|(zi, s)| (zi + (params.rate() - 0.5 * s * s) * t).exp())
        .collect()
}

/// Shared per-step state for the closed-form continuation: Cholesky of
/// M = Pi + sigma_l^2 I and the whitened training points y_q = L^-1 z^q.
struct EiKernelState {
    chol: LowerTriangular,
    /// sigma_f^2 sigma_l^d / sqrt(det M)
    factor: f64,
    whitened: Vec<f64>,
}

impl EiKernelState {
    fn build(zgrid: &ZGrid, model: &GprModel) -> Result<Self, EiBsError> {
        let (sf, sl) = match model.kernel() {
            KernelSpec::Se {
                signal_std,
                length_scale,
            } => (*signal_std, *length_scale),
            KernelSpec::Ard { .. } => return Err(EiBsError::KernelNotSe),
        };
        let d = zgrid.d;
        let mut m = zgrid.pi.clone();
        m.add_diagonal(sl * sl);
        let chol = cholesky_lower(&m).expect("Pi + sigma_l^2 I is positive definite");
        let half_log_det: f64 = (0..d).map(|i| chol.get(i, i).ln()).sum();
        let factor = sf * sf * sl.powi(d as i32) * (-half_log_det).exp();
        let mut whitened = vec![0.0; zgrid.p_count * d];
        for q in 0..zgrid.p_count {
            let y = forward_solve(&chol, zgrid.z_point(q))?;
            whitened[q * d..(q + 1) * d].copy_from_slice(&y);
        }
        Ok(Self {
            chol,
            factor,
            whitened,
        })
    }

    /// Continuation value at an arbitrary z-point (not necessarily on the
    /// grid): e^{-r dt} [ mean(y) + factor * sum_q w_q exp(-1/2 |y_q - y_*|^2) ].
    fn continuation_at(
        &self,
        model: &GprModel,
        disc: f64,
        z_star: &[f64],
    ) -> Result<f64, EiBsError> {
        let y_star = forward_solve(&self.chol, z_star)?;
        Ok(disc * (model.y_mean() + self.factor * self.weighted_sum(model, &y_star)))
    }

    fn weighted_sum(&self, model: &GprModel, y_star: &[f64]) -> f64 {
        let d = y_star.len();
        let mut s = 0.0;
        for (q, w) in model.weights().iter().enumerate() {
            let mut q2 = 0.0;
            for (a, b) in self.whitened[q * d..(q + 1) * d].iter().zip(y_star) {
                let e = a - b;
                q2 += e * e;
            }
            s += w * (-0.5 * q2).exp();
        }
        s
    }
}

/// Exact one-step continuation at every grid point: the Gaussian
/// log-increment integrates the SE surrogate in closed form.
pub fn ei_continuation(
    zgrid: &ZGrid,
    model: &GprModel,
    dt: f64,
    rate: f64,
) -> Result<Vec<f64>, EiBsError> {
    let state = EiKernelState::build(zgrid, model)?;
    let disc = (-rate * dt).exp();
    let d = zgrid.d;
    Ok((0..zgrid.p_count)
        .into_par_iter()
        .map(|p| {
            let y_star = &state.whitened[p * d..(p + 1) * d];
            disc * (model.y_mean() + state.factor * state.weighted_sum(model, y_star))
        })
        .collect())
}

/// Continuation at a single off-grid z-point against the same surrogate.
pub fn ei_continuation_at(
    zgrid: &ZGrid,
    model: &GprModel,
    dt: f64,
    rate: f64,
    z_star: &[f64],
) -> Result<f64, EiBsError> {
    let state = EiKernelState::build(zgrid, model)?;
    state.continuation_at(model, (-rate * dt).exp(), z_star)
}

/// Full GPR-EI price.
pub fn price_gpr_ei_bs(
    params: &BsParams,
    payoff: Payoff,
    maturity: f64,
    n_steps: usize,
    p_count: usize,
    halton_skip: u64,
) -> Result<PriceReport, EiBsError> {
    assert!(n_steps >= 1 && p_count >= 2);
    let start = Instant::now();
    let dt = maturity / n_steps as f64;
    let cloud = build_state_cloud(params, maturity, p_count, halton_skip)?;
    let zgrid = ZGrid::build(params, &cloud, maturity, dt);

    // terminal condition: u(T, z^p) = payoff(x^p)
    let mut u: Vec<f64> = (0..p_count).map(|p| payoff.eval(cloud.point(p))).collect();
    let mut warm: Option<(KernelSpec, f64)> = None;
    let mut per_step = Vec::with_capacity(n_steps);
    let mut price = 0.0;
    for n in (0..n_steps).rev() {
        let model = fit(
            zgrid.z_points_flat(),
            zgrid.d(),
            &u,
            KernelKind::Se,
            warm.as_ref().map(|(k, n)| (k, *n)),
        )?;
        if n > 0 {
            let cont = ei_continuation(&zgrid, &model, dt, params.rate())?;
            let t_n = dt * n as f64;
            for p in 0..p_count {
                let s = exercise_price_at(zgrid.z_point(p), t_n, params);
                u[p] = payoff.eval(&s).max(cont[p]);
            }
        } else {
            // t = 0 readout at the spot itself: z = log(S0)
            let z_spot: Vec<f64> = params.spot().iter().map(|s| s.ln()).collect();
            let cont = ei_continuation_at(&zgrid, &model, dt, params.rate(), &z_spot)?;
            price = payoff.eval(params.spot()).max(cont);
        }
        per_step.push(StepDiagnostic {
            step: n,
            kernel_summary: format!("{:?}", model.kernel()),
            warnings: Vec::new(),
        });
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

    fn reference_params(d: usize) -> BsParams {
        BsParams::equicorrelated(d, 100.0, 0.05, 0.2, 0.2).unwrap()
    }

    fn manual_zgrid(d: usize, z_points: Vec<f64>, pi: SymMatrix) -> ZGrid {
        let p_count = z_points.len() / d;
        ZGrid {
            d,
            p_count,
            z_points,
            pi,
        }
    }

    #[test]
    fn exercise_price_trivials() {
        let params = reference_params(2);
        let z = [4.4, 4.7];
        let at0 = exercise_price_at(&z, 0.0, &params);
        assert!((at0[0] - z[0].exp()).abs() < 1e-12);
        assert!((at0[1] - z[1].exp()).abs() < 1e-12);

        // grid built from a cloud at t = T recovers the cloud point
        let cloud = build_state_cloud(&params, 1.0, 16, 20).unwrap();
        let zgrid = ZGrid::build(&params, &cloud, 1.0, 0.1);
        for p in 0..16 {
            let s = exercise_price_at(zgrid.z_point(p), 1.0, &params);
            for i in 0..2 {
                assert!((s[i] - cloud.point(p)[i]).abs() < 1e-9 * cloud.point(p)[i]);
            }
        }

        // hand substitution at t = 0.5
        let t = 0.5;
        let s = exercise_price_at(&z, t, &params);
        let drift = (0.05 - 0.5 * 0.04) * t;
        assert!((s[0] - (z[0] + drift).exp()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_convolution_is_kernel_value() {
        // Pi = 0, sigma_f = sigma_l = 1, one training point, w = 1, delta = 0,
        // r = 0 -> continuation = 1
        let kernel = KernelSpec::Se {
            signal_std: 1.0,
            length_scale: 1.0,
        };
        let model = GprModel::from_parts(kernel, 1, vec![0.3], vec![1.0], 0.0, 0.0);
        let zgrid = manual_zgrid(1, vec![0.3], SymMatrix::zeros(1));
        let cont = ei_continuation(&zgrid, &model, 0.1, 0.0).unwrap();
        assert!((cont[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn one_term_symbolic_oracle() {
        // single training point z_q, target z_p: the convolution of two 1-D
        // Gaussians has variance sigma_l^2 + Pi
        let (sf, sl, pi_v, w, zq, zp, r, dt) = (1.3, 0.7, 0.04, 2.5, 0.2, -0.4, 0.03, 0.25);
        let kernel = KernelSpec::Se {
            signal_std: sf,
            length_scale: sl,
        };
        let model = GprModel::from_parts(kernel, 1, vec![zq], vec![w], 0.0, 0.0);
        let zgrid = manual_zgrid(1, vec![zq], SymMatrix::from_fn(1, |_, _| pi_v));
        let got = ei_continuation_at(&zgrid, &model, dt, r, &[zp]).unwrap();
        let var = sl * sl + pi_v;
        let want = (-r * dt as f64).exp()
            * w
            * sf
            * sf
            * sl
            * (-0.5 * (zq - zp) * (zq - zp) / var).exp()
            / var.sqrt();
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn continuation_matches_quadrature_1d() {
        // fit a surrogate on real payoff data, then compare the closed form
        // against trapezoid integration of predict against the increment
        // density over +/- 8 standard deviations
        let params = BsParams::equicorrelated(1, 100.0, 0.05, 0.2, 0.0).unwrap();
        let payoff = Payoff::GeometricPut { strike: 100.0 };
        let cloud = build_state_cloud(&params, 1.0, 60, 20).unwrap();
        let dt = 0.1;
        let zgrid = ZGrid::build(&params, &cloud, 1.0, dt);
        let u: Vec<f64> = (0..60).map(|p| payoff.eval(cloud.point(p))).collect();
        let model = fit(zgrid.z_points_flat(), 1, &u, KernelKind::Se, None).unwrap();
        let cont = ei_continuation(&zgrid, &model, dt, params.rate()).unwrap();

        let sd = zgrid.pi().get(0, 0).sqrt();
        let disc = (-params.rate() * dt).exp();
        let steps = 40_000;
        for p in (0..60).step_by(7) {
            let z0 = zgrid.z_point(p)[0];
            let mut acc = 0.0;
            let h = 16.0 * sd / steps as f64;
            for k in 0..=steps {
                let x = -8.0 * sd + k as f64 * h;
                let dens = (-0.5 * (x / sd) * (x / sd)).exp()
                    / (sd * (2.0 * std::f64::consts::PI).sqrt());
                let v = model.predict(&[z0 + x]).unwrap();
                let wgt = if k == 0 || k == steps { 0.5 } else { 1.0 };
                acc += wgt * dens * v * h;
            }
            let want = disc * acc;
            assert!(
                (cont[p] - want).abs() < 1e-8,
                "p={p}: {} vs {want}",
                cont[p]
            );
        }
    }

    #[test]
    fn det_quadratic_form_matches_2x2_closed_form() {
        // the Cholesky-based exp(-1/2 d' M^-1 d)/sqrt(det M) against the
        // explicit 2x2 inverse
        let params = reference_params(2);
        let cloud = build_state_cloud(&params, 1.0, 8, 20).unwrap();
        let dt = 0.1;
        let zgrid = ZGrid::build(&params, &cloud, 1.0, dt);
        let (sf, sl) = (1.1, 0.4);
        let kernel = KernelSpec::Se {
            signal_std: sf,
            length_scale: sl,
        };
        let weights = vec![0.7, -0.2, 0.05, 0.4, -0.9, 0.33, 0.12, -0.05];
        let model = GprModel::from_parts(
            kernel,
            2,
            zgrid.z_points_flat().to_vec(),
            weights.clone(),
            0.0,
            0.0,
        );
        let cont = ei_continuation(&zgrid, &model, dt, 0.0).unwrap();

        let (a, b, c) = (
            zgrid.pi().get(0, 0) + sl * sl,
            zgrid.pi().get(0, 1),
            zgrid.pi().get(1, 1) + sl * sl,
        );
        let det = a * c - b * b;
        for p in 0..8 {
            let mut want = 0.0;
            for q in 0..8 {
                let d0 = zgrid.z_point(q)[0] - zgrid.z_point(p)[0];
                let d1 = zgrid.z_point(q)[1] - zgrid.z_point(p)[1];
                let quad = (c * d0 * d0 - 2.0 * b * d0 * d1 + a * d1 * d1) / det;
                want += weights[q] * sf * sf * sl * sl * (-0.5 * quad).exp() / det.sqrt();
            }
            assert!((cont[p] - want).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn continuation_matches_monte_carlo() {
        // end-to-end Appendix-style check: closed form vs MC expectation of
        // the surrogate at the next step, d in {1,2,3}
        for d in 1..=3usize {
            let params = BsParams::equicorrelated(d, 100.0, 0.04, 0.15 + 0.05 * d as f64, 0.3)
                .unwrap();
            let payoff = Payoff::GeometricPut { strike: 100.0 };
            let cloud = build_state_cloud(&params, 1.0, 40, 20).unwrap();
            let dt = 0.2;
            let zgrid = ZGrid::build(&params, &cloud, 1.0, dt);
            let u: Vec<f64> = (0..40).map(|p| payoff.eval(cloud.point(p))).collect();
            let model = fit(zgrid.z_points_flat(), d, &u, KernelKind::Se, None).unwrap();
            let cont = ei_continuation(&zgrid, &model, dt, params.rate()).unwrap();

            // the one-step z-increment is L_pi * G with L_pi = chol(Pi)
            let l_pi = cholesky_lower(zgrid.pi()).unwrap();
            let disc = (-params.rate() * dt).exp();
            let n_draws = 200_000usize;
            let p = 11; // one representative grid point
            let z0 = zgrid.z_point(p).to_vec();
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for i in 0..n_draws {
                let g = gaussian_stream_keyed(100 + d as u64, i as u64, d);
                let mut z = z0.clone();
                for k in 0..d {
                    let inc: f64 = l_pi.row(k).iter().zip(&g).map(|(l, x)| l * x).sum();
                    z[k] += inc;
                }
                let v = disc * model.predict(&z).unwrap();
                sum += v;
                sum2 += v * v;
            }
            let mean = sum / n_draws as f64;
            let var = (sum2 / n_draws as f64 - mean * mean).max(0.0);
            let se = (var / n_draws as f64).sqrt();
            assert!(
                (cont[p] - mean).abs() < 3.0 * se.max(1e-10),
                "d={d}: closed form {} vs MC {mean} (se {se})",
                cont[p]
            );
        }
    }

    #[test]
    fn update_floors_at_exercise() {
        let params = reference_params(2);
        let payoff = Payoff::GeometricPut { strike: 100.0 };
        let p_count = 120;
        let cloud = build_state_cloud(&params, 1.0, p_count, 20).unwrap();
        let n_steps = 5;
        let dt = 1.0 / n_steps as f64;
        let zgrid = ZGrid::build(&params, &cloud, 1.0, dt);
        let mut u: Vec<f64> = (0..p_count).map(|p| payoff.eval(cloud.point(p))).collect();
        for n in (1..n_steps).rev() {
            let model = fit(zgrid.z_points_flat(), 2, &u, KernelKind::Se, None).unwrap();
            let cont = ei_continuation(&zgrid, &model, dt, params.rate()).unwrap();
            let t_n = dt * n as f64;
            for p in 0..p_count {
                let s = exercise_price_at(zgrid.z_point(p), t_n, &params);
                u[p] = payoff.eval(&s).max(cont[p]);
                assert!(u[p] >= payoff.eval(&s));
            }
        }
    }

    #[test]
    fn deterministic_price() {
        let params = reference_params(2);
        let payoff = Payoff::GeometricPut { strike: 100.0 };
        let a = price_gpr_ei_bs(&params, payoff, 1.0, 5, 120, 20).unwrap();
        let b = price_gpr_ei_bs(&params, payoff, 1.0, 5, 120, 20).unwrap();
        assert_eq!(a.price, b.price);
        assert!(a.price > 0.0);
    }
}
