//! American (Bermudan) option pricing by backward dynamic programming with
//! Gaussian-process regression of the continuation value. Supports
//! multi-dimensional Black-Scholes baskets (one-step equiprobable tree or
//! exact Gaussian convolution against the GPR surrogate) and the rough
//! Bergomi stochastic-volatility model.

pub mod bs_model;
pub mod gpr;
pub mod gpr_ei_bs;
pub mod gpr_tree_bs;
pub mod harness;
pub mod linalg;
pub mod rbergomi;
pub mod rbergomi_pricers;
pub mod sampling;
