//! Reverse-mode AD tape and the MLP coefficient networks.

mod mlp;
mod params;
mod tape;

pub use mlp::{InputJet, Mlp, PAPER_HIDDEN_WIDTH};
pub use params::{BlockKind, Checkpoint, ParamBlock, ParamVector, Segment, PARAMS_FORMAT};
pub use tape::{softplus, Op, Real, Tape, Var};
