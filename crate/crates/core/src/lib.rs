//! Actor-critic with experience replay: off-policy return estimators, a
//! statistics-space trust region, stochastic dueling critics and the tabular
//! operators used to check them.

pub mod acer;
pub mod approximator;
pub mod env;
pub mod error;
pub mod experiment;
pub mod policy;
pub mod replay;
pub mod returns;
pub mod trust_region;
pub mod verify;

pub use error::{AcerError, Result};

/// Guide chapters, compiled so their examples run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/returns.md")]
    mod returns {}
    #[doc = include_str!("../../../book/src/truncation.md")]
    mod truncation {}
    #[doc = include_str!("../../../book/src/trust-region.md")]
    mod trust_region {}
    #[doc = include_str!("../../../book/src/sdn.md")]
    mod sdn {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
