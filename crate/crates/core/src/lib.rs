//! Language-guided distillation at desk scale.
//!
//! A small student encoder learns to match a frozen teacher's similarity
//! score distributions over two anchor banks: a fixed bank of text-derived
//! category anchors and a momentum-updated bank of visual category anchors
//! aggregated from teacher features. Everything runs on synthetic worlds or
//! precomputed embedding files; no real encoders are involved.
//!
//! Modules follow the pipeline: [`numerics`] (dense math), [`banks`] (anchor
//! banks and aggregation), [`losses`] (alignment objectives with analytic
//! gradients), [`student`] (encoder, optimizer, training loop),
//! [`synthworld`] (controllable synthetic teachers), [`dataio`] (bit-exact
//! file formats), and [`eval`] (zero-shot, probe, and paired experiments).

pub mod banks;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
mod par;
pub mod rng;
pub mod student;
pub mod synthworld;

pub use error::{Error, Result};
