//! Python bindings for the pricing library: single-call pricers for the
//! multi-asset Black-Scholes payoffs and the rough Bergomi American put.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gpr_pricer::harness::{run, CorrSpec, Method, Model, PayoffKind, PricingConfig};

fn parse_method(method: &str) -> PyResult<Method> {
    Ok(match method {
        "gpr-tree" => Method::GprTree,
        "gpr-ei" => Method::GprEi,
        "crr-benchmark" => Method::CrrBenchmark,
        "ekvall-benchmark" => Method::EkvallBenchmark,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    })
}

/// Prices a basket option under multi-asset Black-Scholes with constant
/// spot, volatility and pairwise correlation. Returns (price, seconds).
#[pyfunction]
#[pyo3(signature = (method, payoff, d, strike=100.0, spot=100.0, rate=0.05, vol=0.2, corr=0.2, maturity=1.0, n_steps=10, p_count=1000, halton_skip=20))]
#[allow(clippy::too_many_arguments)]
fn price_bs(
    method: &str,
    payoff: &str,
    d: usize,
    strike: f64,
    spot: f64,
    rate: f64,
    vol: f64,
    corr: f64,
    maturity: f64,
    n_steps: usize,
    p_count: usize,
    halton_skip: u64,
) -> PyResult<(f64, f64)> {
    let payoff = match payoff {
        "geo-put" => PayoffKind::GeoPut,
        "ari-put" => PayoffKind::AriPut,
        "call-max" => PayoffKind::CallMax,
        other => return Err(PyValueError::new_err(format!("unknown payoff {other:?}"))),
    };
    let config = PricingConfig {
        model: Model::Bs,
        method: parse_method(method)?,
        payoff,
        d,
        spot,
        strike,
        maturity,
        rate,
        vol,
        corr: CorrSpec::Equi(corr),
        n_steps,
        p_count,
        halton_skip,
        ..PricingConfig::default()
    };
    let report = run(&config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((report.price, report.wall_time))
}

/// Prices an American put under rough Bergomi. Returns (price, seconds).
#[pyfunction]
#[pyo3(signature = (method, strike, spot=100.0, rate=0.05, xi0=0.09, eta=1.9, hurst=0.07, rho=-0.9, maturity=1.0, n_steps=50, tree_block=2, p_count=1000, history=0, seed=1))]
#[allow(clippy::too_many_arguments)]
fn price_rbergomi(
    method: &str,
    strike: f64,
    spot: f64,
    rate: f64,
    xi0: f64,
    eta: f64,
    hurst: f64,
    rho: f64,
    maturity: f64,
    n_steps: usize,
    tree_block: usize,
    p_count: usize,
    history: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let config = PricingConfig {
        model: Model::Rbergomi,
        method: parse_method(method)?,
        payoff: PayoffKind::Put,
        d: 1,
        spot,
        strike,
        maturity,
        rate,
        n_steps,
        p_count,
        tree_block,
        history,
        seed,
        xi0,
        eta,
        hurst,
        rho_sv: rho,
        ..PricingConfig::default()
    };
    let report = run(&config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((report.price, report.wall_time))
}

#[pymodule]
fn gpr_pricer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(price_bs, m)?)?;
    m.add_function(wrap_pyfunction!(price_rbergomi, m)?)?;
    Ok(())
}
