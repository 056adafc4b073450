//! Provable repair of local-robustness violations in feed-forward ReLU
//! networks.
//!
//! The library verifies robustness queries with symbolic bound propagation
//! ([`deeppoly`]), expresses a violation as a closed-form loss over a box
//! ([`loss`]), and trains small patch modules against that loss until the
//! composite network is provably robust, bisecting input regions where the
//! abstraction is too coarse ([`repair`]).  Repaired networks route inputs to
//! patches by region membership or predicted-class allocation ([`patched`]).
//! Gradient attacks ([`attacks`]), evaluation metrics ([`metrics`]), dataset
//! and file-format handling ([`dataset`], [`formats`], [`nnet`]) round out an
//! experiment harness, and [`synth`] generates desk-scale training problems.

pub mod attacks;
pub mod dataset;
pub mod deeppoly;
pub mod demo;
pub mod error;
pub mod formats;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nnet;
pub mod patched;
pub mod repair;
pub mod synth;

pub use error::{Error, Result};
