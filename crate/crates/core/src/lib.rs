pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod text;
pub mod textgen;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    struct SyntheticData;
    #[doc = include_str!("../../../book/src/encoder-and-heads.md")]
    struct EncoderAndHeads;
    #[doc = include_str!("../../../book/src/decoder.md")]
    struct Decoder;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
