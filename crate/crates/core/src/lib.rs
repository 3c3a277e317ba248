//! Core of a dual-forward path teacher distillation framework.
//!
//! Everything here is pure computation over in-memory data and builds with
//! `no_std` + `alloc`; file formats, the experiment runner's persistence and
//! the command line live in the `dfpt` companion crate.
#![no_std]
extern crate alloc;

pub mod analysis;
pub mod data;
pub mod dfpt;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tape, Tensor, Var};
