//! Deep subspace clustering with mini-batch memory-bank training.
//!
//! The crate implements three trainers over one model family:
//!
//! - **DSC**: the classical full-batch deep subspace clustering network —
//!   an autoencoder with a trainable self-expressive matrix `C` between
//!   encoder and decoder.
//! - **BDSC**: the mini-batch variant. A memory bank keeps the latest
//!   latent code of every sample so each batch step can form the
//!   self-expressive product `C Z` against the whole dataset. With the
//!   batch size equal to the dataset size, BDSC reduces to DSC exactly.
//! - **CLBDSC**: a decoder-free variant that swaps the reconstruction
//!   loss for InfoNCE over memory-bank negatives, with the self-expressed
//!   latent as the anchor.
//!
//! Downstream of training, [`clustering`] turns `C` into an affinity
//!   matrix, runs normalized spectral clustering, and scores the result
//!   (ACC via optimal assignment, NMI).
//!
//! Supporting pieces: a minimal f64 tensor engine with reverse-mode
//! differentiation ([`tensor`]), synthetic union-of-subspaces data and
//! file formats ([`data`]), and runnable verification suites ([`verify`]).
//! Everything is deterministic given the config seeds.

#![allow(clippy::needless_range_loop)]

pub mod bank;
pub mod clustering;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selfexpress;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ParameterSet, Tape, Tensor, Var};
