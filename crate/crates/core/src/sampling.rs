//! Quasi-random and pseudo-random generation: Halton sequences, inverse
//! normal CDF, terminal-distribution state clouds and seeded Gaussian
//! streams.
//!
//! Everything here is a pure function of its inputs. The pseudo-random side
//! uses a ChaCha stream cipher keyed by `(master seed, stream index)` so that
//! per-path work can never reorder draws.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bs_model::BsParams;
use crate::linalg::LinalgError;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("argument {0} outside the open interval (0,1)")]
    OutOfRange(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// First `d` primes, used as Halton bases.
pub fn first_primes(d: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(d);
    let mut candidate = 2u64;
    while primes.len() < d {
        if primes.iter().all(|&p| candidate % p != 0) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Radical inverse of `index` in the given prime base.
pub fn halton(index: u64, base: u64) -> f64 {
    debug_assert!(index >= 1 && base >= 2);
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    let b = base as f64;
    while i > 0 {
        f /= b;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Inverse standard normal CDF.
///
/// Acklam's rational approximation refined by one Newton step on the CDF,
/// which brings the absolute error well below 1e-9 over the whole range.
pub fn normal_inv_cdf(u: f64) -> Result<f64, SamplingError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(SamplingError::OutOfRange(u));
    }
    Ok(normal_inv_cdf_unchecked(u))
}

fn normal_inv_cdf_unchecked(u: f64) -> f64 {
    // Acklam coefficients
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const U_LOW: f64 = 0.02425;

    let x = if u < U_LOW {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if u <= 1.0 - U_LOW {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - u).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // one Newton step: x <- x - (Phi(x) - u) / phi(x)
    let e = normal_cdf(x) - u;
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - e / pdf
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function, Cody-style rational approximations.
fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    let z = if ax < 0.46875 {
        // erfc = 1 - erf, erf by rational approximation in x^2
        const A: [f64; 4] = [
            3.16112374387056560e0,
            1.13864154151050156e2,
            3.77485237685302021e2,
            3.20937758913846947e3,
        ];
        const A4: f64 = 1.85777706184603153e-1;
        const B: [f64; 4] = [
            2.36012909523441209e1,
            2.44024637934444173e2,
            1.28261652607737228e3,
            2.84423683343917062e3,
        ];
        let y = ax * ax;
        let mut num = A4 * y;
        let mut den = y;
        for i in 0..3 {
            num = (num + A[i]) * y;
            den = (den + B[i]) * y;
        }
        1.0 - ax * (num + A[3]) / (den + B[3])
    } else if ax < 4.0 {
        const C: [f64; 8] = [
            5.64188496988670089e-1,
            8.88314979438837594e0,
            6.61191906371416295e1,
            2.98635138197400131e2,
            8.81952221241769090e2,
            1.71204761263407058e3,
            2.05107837782607147e3,
            1.23033935479799725e3,
        ];
        const C8: f64 = 2.15311535474403846e-8;
        const D: [f64; 8] = [
            1.57449261107098347e1,
            1.17693950891312499e2,
            5.37181101862009858e2,
            1.62138957456669019e3,
            3.29079923573345963e3,
            4.36261909014324716e3,
            3.43936767414372164e3,
            1.23033935480374942e3,
        ];
        let mut num = C8 * ax;
        let mut den = ax;
        for i in 0..7 {
            num = (num + C[i]) * ax;
            den = (den + D[i]) * ax;
        }
        (-ax * ax).exp() * (num + C[7]) / (den + D[7])
    } else {
        const P: [f64; 5] = [
            3.05326634961232344e-1,
            3.60344899949804439e-1,
            1.25781726111229246e-1,
            1.60837851487422766e-2,
            6.58749161529837803e-4,
        ];
        const P5: f64 = 1.63153871373020978e-2;
        const Q: [f64; 5] = [
            2.56852019228982242e0,
            1.87295284992346047e0,
            5.27905102951428412e-1,
            6.05183413124413191e-2,
            2.33520497626869185e-3,
        ];
        let y = 1.0 / (ax * ax);
        let mut num = P5 * y;
        let mut den = y;
        for i in 0..4 {
            num = (num + P[i]) * y;
            den = (den + Q[i]) * y;
        }
        let r = y * (num + P[4]) / (den + Q[4]);
        let inv_sqrt_pi = 5.6418958354775628695e-1;
        (-ax * ax).exp() * (inv_sqrt_pi - r) / ax
    };
    if x < 0.0 {
        2.0 - z
    } else {
        z
    }
}

/// Quasi-random evaluation points in the strictly positive orthant, with
/// their componentwise logarithms.
#[derive(Debug, Clone)]
pub struct StateCloud {
    d: usize,
    p_count: usize,
    points: Vec<f64>,
    log_points: Vec<f64>,
}

impl StateCloud {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p_count(&self) -> usize {
        self.p_count
    }

    #[inline]
    pub fn point(&self, p: usize) -> &[f64] {
        &self.points[p * self.d..(p + 1) * self.d]
    }

    #[inline]
    pub fn log_point(&self, p: usize) -> &[f64] {
        &self.log_points[p * self.d..(p + 1) * self.d]
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn log_points_flat(&self) -> &[f64] {
        &self.log_points
    }
}

/// Digit permutation for scrambled Halton: 0 stays fixed (so trailing zero
/// digits contribute nothing) and the remaining digits are shuffled by a
/// ChaCha stream keyed by the base. Deterministic for a given base.
pub fn halton_digit_permutation(base: u64) -> Vec<u64> {
    let mut perm: Vec<u64> = (1..base).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x68616c746f6e ^ base);
    for i in (1..perm.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    let mut full = Vec::with_capacity(base as usize);
    full.push(0);
    full.extend(perm);
    full
}

/// Radical inverse with scrambled digits. Large prime bases make raw Halton
/// badly striped (consecutive points fall on few lines in high-dimensional
/// projections); permuting the digits breaks the stripes while keeping the
/// sequence deterministic and low-discrepancy.
pub fn halton_scrambled(index: u64, base: u64, perm: &[u64]) -> f64 {
    debug_assert_eq!(perm.len(), base as usize);
    let mut f = 1.0 / base as f64;
    let mut i = index;
    let mut r = 0.0;
    while i > 0 {
        r += f * perm[(i % base) as usize] as f64;
        i /= base;
        f /= base as f64;
    }
    r
}

/// Quasi-random cloud of `p_count` samples of `S_T` under the given model.
///
/// Point `p` has coordinate `i` equal to
/// `s0_i * exp((r - sigma_i^2/2) T + sigma_i sqrt(T) Sigma_i . G_p)` where
/// `G_p` maps the p-th d-dimensional scrambled Halton vector (first d primes
/// as bases, first `skip` points discarded) through the inverse normal CDF
/// and `Sigma_i` is row i of the Cholesky factor of the correlation matrix.
/// Base 2 has only the identity digit permutation, so one-dimensional clouds
/// coincide with the unscrambled sequence.
pub fn build_state_cloud(
    params: &BsParams,
    maturity: f64,
    p_count: usize,
    skip: u64,
) -> Result<StateCloud, SamplingError> {
    assert!(p_count >= 2, "state cloud needs at least two points");
    let d = params.d();
    let bases = first_primes(d);
    let perms: Vec<Vec<u64>> = bases.iter().map(|&b| halton_digit_permutation(b)).collect();
    let chol = params.chol();
    let sqrt_t = maturity.sqrt();
    let mut points = Vec::with_capacity(p_count * d);
    let mut gauss = vec![0.0; d];
    for p in 0..p_count {
        let index = skip + 1 + p as u64;
        for (i, &b) in bases.iter().enumerate() {
            gauss[i] = normal_inv_cdf(halton_scrambled(index, b, &perms[i]))?;
        }
        for i in 0..d {
            let corr: f64 = chol.row(i).iter().zip(&gauss).map(|(l, g)| l * g).sum();
            let sigma = params.vols()[i];
            let drift = (params.rate() - 0.5 * sigma * sigma) * maturity;
            points.push(params.spot()[i] * (drift + sigma * sqrt_t * corr).exp());
        }
    }
    let log_points = points.iter().map(|x| x.ln()).collect();
    Ok(StateCloud {
        d,
        p_count,
        points,
        log_points,
    })
}

/// Deterministic stream of standard normal draws for `(seed, stream key)`.
///
/// The key separates independent streams (one per simulated path), so
/// per-path parallelism cannot change results.
pub fn gaussian_stream_keyed(seed: u64, key: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    (0..count)
        .map(|_| {
            // (0,1) strictly: 53-bit mantissa offset by half an ulp
            let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            normal_inv_cdf_unchecked(u)
        })
        .collect()
}

/// Stream 0 of `gaussian_stream_keyed`.
pub fn gaussian_stream(seed: u64, count: usize) -> Vec<f64> {
    gaussian_stream_keyed(seed, 0, count)
}
