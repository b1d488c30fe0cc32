//! Deterministic simulator for personalized federated learning with personal
//! embeddings, sub-population heads and Gaussian differential privacy.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod privacy;
pub mod seed;
pub mod verify;

pub use error::{FedError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/privacy.md")]
    mod privacy {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
