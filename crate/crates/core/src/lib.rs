// SPDX-License-Identifier: Apache-2.0

//! Transfer learning for day-ahead wind power forecasts across the lifecycle
//! of a wind farm.

pub mod baseline;
pub mod csge;
pub mod data;
pub mod error;
pub mod lifecycle;
pub mod nnet;
pub mod preselect;
pub mod scenario;
pub mod transfer;
pub mod synthdata;
pub mod util;

pub use error::{Error, Result};

// Code in the guide runs as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/preselection.md")]
    mod preselection {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/csge.md")]
    mod csge {}
    #[doc = include_str!("../../../book/src/lifecycle.md")]
    mod lifecycle {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
