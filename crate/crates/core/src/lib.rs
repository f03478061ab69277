//! Sparse mixture-of-experts connectors and hierarchical group attention
//! over synthetic multi-encoder feature streams.
//!
//! Build order, bottom up: [`numerics`] (matrices, reverse-mode tape),
//! [`encoders`] (synthetic streams), [`moec`] (routed connector), [`hga`]
//! (cross-token fusion), [`pipeline`] (model, losses, training) and
//! [`experiment`] (config files, checkpoints, runs and ablations).

pub mod encoders;
pub mod experiment;
pub mod error;
pub mod hga;
pub mod moec;
pub mod numerics;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub struct Intro;
    #[doc = include_str!("../../../book/src/numerics.md")]
    pub struct Numerics;
    #[doc = include_str!("../../../book/src/streams.md")]
    pub struct Streams;
    #[doc = include_str!("../../../book/src/moec.md")]
    pub struct Moec;
    #[doc = include_str!("../../../book/src/hga.md")]
    pub struct Hga;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/flops.md")]
    pub struct Flops;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
