//! Experiment orchestration: pricing configurations, dispatch, and CSV
//! reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use thiserror::Error;

use crate::bs_model::{
    crr_american_price_1d, ekvall_tree_price, geometric_reduction, BsParams, Payoff,
    MAX_LATTICE_DIMENSION, MAX_TREE_DIMENSION,
};
use crate::gpr_ei_bs::price_gpr_ei_bs;
use crate::gpr_tree_bs::price_gpr_tree_bs;
use crate::linalg::SymMatrix;
use crate::rbergomi::RbParams;
use crate::rbergomi_pricers::{price_rb_gpr_ei, price_rb_gpr_tree, RbPriceConfig};

/// Per-step fitting diagnostics carried in a [`PriceReport`].
#[derive(Debug, Clone)]
pub struct StepDiagnostic {
    pub step: usize,
    pub kernel_summary: String,
    pub warnings: Vec<String>,
}

/// Result of a single pricing run.
#[derive(Debug, Clone)]
pub struct PriceReport {
    pub price: f64,
    pub wall_time: f64,
    pub per_step: Vec<StepDiagnostic>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("pricing failed: {0}")]
    Pricing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Bs,
    Rbergomi,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Bs => "bs",
            Model::Rbergomi => "rbergomi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GprTree,
    GprEi,
    CrrBenchmark,
    EkvallBenchmark,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GprTree => "gpr-tree",
            Method::GprEi => "gpr-ei",
            Method::CrrBenchmark => "crr-benchmark",
            Method::EkvallBenchmark => "ekvall-benchmark",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayoffKind {
    GeoPut,
    AriPut,
    CallMax,
    Put,
}

impl fmt::Display for PayoffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayoffKind::GeoPut => "geo-put",
            PayoffKind::AriPut => "ari-put",
            PayoffKind::CallMax => "call-max",
            PayoffKind::Put => "put",
        })
    }
}

/// Correlation input: a scalar expanded to an equicorrelation matrix, or a
/// full matrix loaded from a file of whitespace-separated rows.
#[derive(Debug, Clone)]
pub enum CorrSpec {
    Equi(f64),
    Full(Vec<Vec<f64>>),
}

/// A fully described pricing instance.
#[derive(Debug, Clone)]
pub struct PricingConfig {
    pub model: Model,
    pub method: Method,
    pub payoff: PayoffKind,
    pub d: usize,
    pub spot: f64,
    pub strike: f64,
    pub maturity: f64,
    pub rate: f64,
    pub vol: f64,
    pub corr: CorrSpec,
    pub n_steps: usize,
    pub p_count: usize,
    pub tree_block: usize,
    pub history: usize,
    pub seed: u64,
    pub halton_skip: u64,
    // rough Bergomi model parameters (ignored under Black-Scholes)
    pub xi0: f64,
    pub eta: f64,
    pub hurst: f64,
    pub rho_sv: f64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            model: Model::Bs,
            method: Method::GprEi,
            payoff: PayoffKind::GeoPut,
            d: 2,
            spot: 100.0,
            strike: 100.0,
            maturity: 1.0,
            rate: 0.05,
            vol: 0.2,
            corr: CorrSpec::Equi(0.2),
            n_steps: 10,
            p_count: 1000,
            tree_block: 2,
            history: 0,
            seed: 1,
            halton_skip: 20,
            xi0: 0.09,
            eta: 1.9,
            hurst: 0.07,
            rho_sv: -0.9,
        }
    }
}

impl PricingConfig {
    /// Parses a flat `key=value` file body; later lines win. Lines that are
    /// empty or start with `#` are skipped.
    pub fn from_key_values(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::ConfigInvalid(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies a single `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
            value.parse().map_err(|_| {
                HarnessError::ConfigInvalid(format!("key {key}: cannot parse {value:?}"))
            })
        }
        match key {
            "model" => {
                self.model = match value {
                    "bs" => Model::Bs,
                    "rbergomi" => Model::Rbergomi,
                    other => {
                        return Err(HarnessError::ConfigInvalid(format!(
                            "model must be bs or rbergomi, got {other:?}"
                        )))
                    }
                }
            }
            "method" => {
                self.method = match value {
                    "gpr-tree" => Method::GprTree,
                    "gpr-ei" => Method::GprEi,
                    "crr-benchmark" => Method::CrrBenchmark,
                    "ekvall-benchmark" => Method::EkvallBenchmark,
                    other => {
                        return Err(HarnessError::ConfigInvalid(format!(
                            "unknown method {other:?}"
                        )))
                    }
                }
            }
            "payoff" => {
                self.payoff = match value {
                    "geo-put" => PayoffKind::GeoPut,
                    "ari-put" => PayoffKind::AriPut,
                    "call-max" => PayoffKind::CallMax,
                    "put" => PayoffKind::Put,
                    other => {
                        return Err(HarnessError::ConfigInvalid(format!(
                            "unknown payoff {other:?}"
                        )))
                    }
                }
            }
            "d" => self.d = num(key, value)?,
            "spot" => self.spot = num(key, value)?,
            "strike" => self.strike = num(key, value)?,
            "maturity" => self.maturity = num(key, value)?,
            "rate" => self.rate = num(key, value)?,
            "vol" => self.vol = num(key, value)?,
            "corr" => self.corr = CorrSpec::Equi(num(key, value)?),
            "corr_file" => {
                let body = std::fs::read_to_string(value).map_err(|e| {
                    HarnessError::ConfigInvalid(format!("corr_file {value:?}: {e}"))
                })?;
                let rows: Vec<Vec<f64>> = body
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.split_whitespace()
                            .map(|t| {
                                t.parse().map_err(|_| {
                                    HarnessError::ConfigInvalid(format!(
                                        "corr_file {value:?}: bad number {t:?}"
                                    ))
                                })
                            })
                            .collect()
                    })
                    .collect::<Result<_, _>>()?;
                self.corr = CorrSpec::Full(rows);
            }
            "n_steps" => self.n_steps = num(key, value)?,
            "p_count" => self.p_count = num(key, value)?,
            "tree_block" => self.tree_block = num(key, value)?,
            "history" => self.history = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "halton_skip" => self.halton_skip = num(key, value)?,
            "xi0" => self.xi0 = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "hurst" => self.hurst = num(key, value)?,
            "rho" => self.rho_sv = num(key, value)?,
            other => {
                return Err(HarnessError::ConfigInvalid(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Checks cross-field consistency.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::ConfigInvalid(msg));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.n_steps == 0 {
            return bad("n_steps must be positive".into());
        }
        if !(self.maturity > 0.0) {
            return bad("maturity must be positive".into());
        }
        if !(self.strike > 0.0) {
            return bad("strike must be positive".into());
        }
        match self.model {
            Model::Bs => {
                if self.payoff == PayoffKind::Put {
                    return bad("payoff put is the rough Bergomi single-asset put; use geo-put, ari-put or call-max under bs".into());
                }
                if self.method == Method::GprTree && self.d > MAX_TREE_DIMENSION {
                    return bad(format!(
                        "bs gpr-tree supports d <= {MAX_TREE_DIMENSION}, got {}",
                        self.d
                    ));
                }
                if self.method == Method::EkvallBenchmark && self.d > MAX_LATTICE_DIMENSION {
                    return bad(format!(
                        "ekvall-benchmark supports d <= {MAX_LATTICE_DIMENSION}, got {}",
                        self.d
                    ));
                }
                if self.method == Method::CrrBenchmark && self.payoff != PayoffKind::GeoPut {
                    return bad("crr-benchmark applies only to geo-put (one-dimensional reduction)".into());
                }
                if matches!(self.method, Method::GprTree | Method::GprEi) && self.p_count < 2 {
                    return bad("p_count must be at least 2".into());
                }
                if let CorrSpec::Full(rows) = &self.corr {
                    if rows.len() != self.d || rows.iter().any(|r| r.len() != self.d) {
                        return bad(format!("correlation matrix must be {0}x{0}", self.d));
                    }
                }
            }
            Model::Rbergomi => {
                if self.payoff != PayoffKind::Put {
                    return bad("rbergomi supports only the put payoff".into());
                }
                if self.d != 1 {
                    return bad("rbergomi is a single-asset model; d must be 1".into());
                }
                if !matches!(self.method, Method::GprTree | Method::GprEi) {
                    return bad("rbergomi supports only gpr-tree and gpr-ei".into());
                }
                if self.method == Method::GprTree
                    && (self.tree_block == 0 || self.n_steps % self.tree_block != 0)
                {
                    return bad("tree_block must be positive and divide n_steps".into());
                }
            }
        }
        Ok(())
    }

    fn bs_params(&self) -> Result<BsParams, HarnessError> {
        let corr = match &self.corr {
            CorrSpec::Equi(rho) => {
                SymMatrix::from_fn(self.d, |i, j| if i == j { 1.0 } else { *rho })
            }
            CorrSpec::Full(rows) => SymMatrix::from_rows(rows),
        };
        BsParams::new(vec![self.spot; self.d], self.rate, vec![self.vol; self.d], corr)
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))
    }

    fn bs_payoff(&self) -> Payoff {
        match self.payoff {
            PayoffKind::GeoPut => Payoff::GeometricPut { strike: self.strike },
            PayoffKind::AriPut => Payoff::ArithmeticPut { strike: self.strike },
            PayoffKind::CallMax => Payoff::CallOnMax { strike: self.strike },
            PayoffKind::Put => unreachable!("rejected by validate"),
        }
    }
}

/// Prices one validated configuration.
pub fn run(config: &PricingConfig) -> Result<PriceReport, HarnessError> {
    config.validate()?;
    let pricing = |e: &dyn fmt::Display| HarnessError::Pricing(e.to_string());
    match config.model {
        Model::Bs => {
            let params = config.bs_params()?;
            let payoff = config.bs_payoff();
            match config.method {
                Method::GprTree => price_gpr_tree_bs(
                    &params,
                    payoff,
                    config.maturity,
                    config.n_steps,
                    config.p_count,
                    config.halton_skip,
                )
                .map_err(|e| pricing(&e)),
                Method::GprEi => price_gpr_ei_bs(
                    &params,
                    payoff,
                    config.maturity,
                    config.n_steps,
                    config.p_count,
                    config.halton_skip,
                )
                .map_err(|e| pricing(&e)),
                Method::CrrBenchmark => {
                    let start = Instant::now();
                    let (spot, vol, div) = geometric_reduction(&params);
                    let price = crr_american_price_1d(
                        spot,
                        config.rate,
                        div,
                        vol,
                        config.maturity,
                        config.n_steps,
                        config.n_steps,
                        &|s: f64| (config.strike - s).max(0.0),
                    );
                    Ok(PriceReport {
                        price,
                        wall_time: start.elapsed().as_secs_f64(),
                        per_step: Vec::new(),
                    })
                }
                Method::EkvallBenchmark => {
                    let start = Instant::now();
                    let price = ekvall_tree_price(
                        &params,
                        payoff,
                        config.maturity,
                        config.n_steps,
                        config.n_steps,
                    )
                    .map_err(|e| pricing(&e))?;
                    Ok(PriceReport {
                        price,
                        wall_time: start.elapsed().as_secs_f64(),
                        per_step: Vec::new(),
                    })
                }
            }
        }
        Model::Rbergomi => {
            let params = RbParams::new(
                config.spot,
                config.rate,
                config.xi0,
                config.eta,
                config.hurst,
                config.rho_sv,
            )
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
            let cfg = RbPriceConfig {
                n_steps: config.n_steps,
                tree_block: config.tree_block,
                p_count: config.p_count,
                history: config.history,
                maturity: config.maturity,
                strike: config.strike,
                seed: config.seed,
            };
            match config.method {
                Method::GprTree => price_rb_gpr_tree(&params, &cfg).map_err(|e| pricing(&e)),
                Method::GprEi => price_rb_gpr_ei(&params, &cfg).map_err(|e| pricing(&e)),
                _ => unreachable!("rejected by validate"),
            }
        }
    }
}

/// One CSV row of a suite run; `error` is empty on success.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub config: PricingConfig,
    pub repetition: usize,
    pub price: Option<f64>,
    pub seconds: f64,
    pub error: String,
}

pub const CSV_HEADER: &str = "model,method,payoff,d,K,N,P,m,J,seed,price,seconds,error";

impl SuiteRow {
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let price = match self.price {
            Some(p) => format!("{p:.4}"),
            None => String::new(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.1},{}",
            c.model,
            c.method,
            c.payoff,
            c.d,
            c.strike,
            c.n_steps,
            c.p_count,
            c.tree_block,
            c.history,
            c.seed,
            price,
            self.seconds,
            self.error
        )
    }
}

/// Runs each configuration `repeat` times; per-row failures are recorded in
/// the row's error column without aborting the suite. Rows come back in
/// input order.
pub fn run_suite(configs: &[PricingConfig], repeat: usize) -> Result<Vec<SuiteRow>, HarnessError> {
    if configs.is_empty() {
        return Err(HarnessError::ConfigInvalid("suite has no configurations".into()));
    }
    if repeat == 0 {
        return Err(HarnessError::ConfigInvalid("repeat must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(configs.len() * repeat);
    for config in configs {
        for repetition in 0..repeat {
            let start = Instant::now();
            let row = match run(config) {
                Ok(report) => SuiteRow {
                    config: config.clone(),
                    repetition,
                    price: Some(report.price),
                    seconds: report.wall_time,
                    error: String::new(),
                },
                Err(e) => SuiteRow {
                    config: config.clone(),
                    repetition,
                    price: None,
                    seconds: start.elapsed().as_secs_f64(),
                    error: e.to_string().replace(',', ";"),
                },
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Serializes suite rows as CSV (header included, LF line endings). The
/// seconds column is excluded from byte-stability guarantees; everything
/// else is deterministic for fixed inputs and seeds.
pub fn rows_to_csv(rows: &[SuiteRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

/// Convenience: stable key-sorted echo of a config, used by the CLI when
/// printing what it is about to run.
pub fn config_echo(config: &PricingConfig) -> String {
    let mut map = BTreeMap::new();
    map.insert("model", config.model.to_string());
    map.insert("method", config.method.to_string());
    map.insert("payoff", config.payoff.to_string());
    map.insert("d", config.d.to_string());
    map.insert("strike", config.strike.to_string());
    map.insert("maturity", config.maturity.to_string());
    map.insert("rate", config.rate.to_string());
    map.insert("n_steps", config.n_steps.to_string());
    map.insert("p_count", config.p_count.to_string());
    map.insert("tree_block", config.tree_block.to_string());
    map.insert("history", config.history.to_string());
    map.insert("seed", config.seed.to_string());
    map.insert("halton_skip", config.halton_skip.to_string());
    map.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}
