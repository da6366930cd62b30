//! Anomalous sound detection for machines whose attribute labels are missing.
//!
//! A small three-branch network learns discriminative embeddings with a
//! sub-cluster AdaCos loss, a subspace loss and a triplet loss. k-means on the
//! learned embeddings supplies pseudo-attribute labels, and clips from an
//! external pool that score as normal for some machine are added back as
//! extra classes. Each stage trains on what the previous stage produced.
//!
//! | module | contents |
//! |---|---|
//! | [`autodiff`] | reverse-mode tape, layers, AdamW, finite-difference checks |
//! | [`features`] | STFT and DFT inputs, SNR mixing, pitch shift, mixup |
//! | [`model`] | the three-branch network and its embeddings |
//! | [`losses`] | SCAC, subspace, triplet and combined losses |
//! | [`cluster`] | k-means, representatives, anomaly scores, pseudo-labels |
//! | [`selector`] | pseudo-anomalous external selection |
//! | [`pipeline`] | training, stages and artifacts |
//! | [`evalio`] | AUC, manifests, WAV input and the synthetic corpus |
//!
//! The guide in `book/` walks through each piece with runnable examples.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod autodiff;
pub mod checkpoint;
pub mod cluster;
pub mod error;
pub mod evalio;
pub mod features;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod selector;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
