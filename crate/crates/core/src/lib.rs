//! Desk-scale response retrieval toolkit.
//!
//! Everything needed to train and compare response-selection models on a
//! single machine: a small reverse-mode autodiff engine ([`tape`]), tiny
//! transformer and BiLSTM encoders ([`encoder`]), bi-encoder and
//! cross-encoder scoring heads ([`heads`]), a teacher→student knowledge
//! distillation pipeline ([`train`]), ranking metrics with significance
//! testing and a latency benchmark ([`eval`]), and dataset/vocabulary
//! plumbing including a synthetic dialogue generator ([`data`]).

pub mod data;
pub mod encoder;
pub mod eval;
pub mod heads;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
