//! ECG rhythm classification with convolutional and convolutional-recurrent
//! networks over log-spectrograms.
//!
//! The pipeline is: [`signal_io`] loads records and builds stratified
//! partitions, [`spectrogram`] turns a record into a normalized
//! log-spectrogram, [`augmentation`] perturbs training signals,
//! [`diffcompute`] provides the layers and optimizer, [`network`] assembles
//! the two architectures, [`training`] runs the optimization protocols and
//! [`evaluation`] scores, cross-validates and ensembles models.

pub mod augmentation;
pub mod checkpoint;
pub mod diffcompute;
pub mod evaluation;
pub mod network;
pub mod signal_io;
pub mod spectrogram;
pub mod synthetic;
pub mod training;

pub use signal_io::{Dataset, EcgRecord, Label};

/// The guide's chapters, compiled so that their snippets run as doc tests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/spectrogram.md")]
    pub mod spectrogram {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    pub mod augmentation {}
    #[doc = include_str!("../../../book/src/layers.md")]
    pub mod layers {}
    #[doc = include_str!("../../../book/src/networks.md")]
    pub mod networks {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
