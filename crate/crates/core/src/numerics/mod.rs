//! Differentiable matrix kernel: tape, attention, recurrent cells, Adam and
//! a finite-difference gradient checker.

pub mod adam;
pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rnn;
pub mod tensor;

pub use adam::{AdamConfig, AdamState, LinearDecay};
pub use attention::{multi_head_self_attention, scaled_dot_attention, Attended};
pub use gradcheck::{finite_diff_grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use rnn::{BiRnn, BiRnnOutput, CellKind};
pub use tensor::Tensor;
