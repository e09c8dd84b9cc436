//! Blockout: stochastic regularization that learns hierarchical
//! (block-structured) layer architectures.
//!
//! Nodes on either side of a fully connected layer are softly assigned to `k`
//! clusters. Each training iteration samples hard assignments, masks the
//! weights so that only nodes sharing a cluster stay connected, and
//! back-propagates into both the weights and the membership probabilities.
//! Inference uses the expected mask.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`rng`]: dense `f64` matrices and seeded random streams.
//! - [`blockout`]: mask construction and a single Blockout layer.
//! - [`network`]: layer stacks, loss, and whole-network backprop.
//! - [`train`]: momentum SGD, training loop and evaluation.
//! - [`checkpoint`]: the `BLKO` binary network format.
//! - [`data`]: synthetic hierarchical data and the `BODS` dataset format.
//! - [`analysis`]: histograms, PCA and per-category cluster counts of `P`.
//!
//! ```
//! use blockout::{data, network::Network, rng::RngStream, train};
//!
//! let spec = data::HierarchySpec {
//!     seed: 1, superclasses: 2, subclasses_per: 2, dim: 8,
//!     per_class: 20, intra_spread: 1.0, inter_spread: 4.0,
//! };
//! let (train_set, test_set) = data::generate_hierarchical_split(&spec, 20).unwrap();
//! let mut rng = RngStream::new(7);
//! let mut net = Network::mlp(8, &[16, 16], 4, 2, 2, &mut rng).unwrap();
//! let config = train::TrainConfig { iterations: 50, batch_size: 16, ..Default::default() };
//! let log = train::train(&mut net, &train_set, Some(&test_set), &config).unwrap();
//! assert_eq!(log.iterations.len(), 50);
//! ```

pub mod analysis;
pub mod blockout;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// The guide's code listings are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/learning-clusters.md")]
    mod learning_clusters {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
