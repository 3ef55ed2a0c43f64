//! Transducer-based speech recognition on a synthetic tonal toy language.
//!
//! The crate covers the full desk-scale pipeline: a dense-tensor autodiff
//! engine ([`numerics`]), the alignment-lattice transducer loss
//! ([`transducer`]), the encoder/prediction/joint model ([`model`]),
//! byte-level BPE ([`tokenizer`]), Tai-lo orthography utilities
//! ([`orthography`]), a deterministic corpus generator ([`corpus`]),
//! staged training ([`training`]), and decoding plus CER/tone-confusion
//! evaluation ([`decode`], [`eval`]).

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod orthography;
pub mod tokenizer;
pub mod training;
pub mod transducer;

pub use model::{ModelParams, Utterance};
pub use numerics::{GradTape, Tensor, ValueId};
pub use tokenizer::BpeModel;
pub use transducer::JointLogProbLattice;
