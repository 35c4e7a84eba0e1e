pub mod datagen;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod influence;
pub mod nn;
pub mod pipeline;
pub mod selection;

mod codec;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/pivotal.md")]
    mod pivotal {}
    #[doc = include_str!("../../../book/src/finetuning.md")]
    mod finetuning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
