pub mod cell;
pub mod data;
pub mod error;
pub mod experiment;
pub mod maskgen;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Conv2dSpec, Graph, PoolKind, Real, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/operations.md")]
    mod operations {}
    #[doc = include_str!("../../../book/src/cell-search.md")]
    mod cell_search {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
