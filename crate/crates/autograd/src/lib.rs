//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays,
//! with the small set of neural-network layers and the optimizer used by the
//! benchmark crate.
//!
//! The design is a Wengert list (`Tape`): every operation appends a node that
//! holds its output value and a closure which maps the output gradient to
//! contributions for the operation's inputs. Parameters live outside the tape
//! in a [`ParamSet`] and are bound to tape leaves per forward pass, so one
//! model can be run many times (or under two parameter sets, as a momentum
//! shadow) without rebuilding anything.

mod nn;
mod optim;
mod tape;

pub use nn::{BatchNorm, Binder, Conv2d, Init, LayerNorm, Linear, Mode, ParamId, ParamSet};
pub use optim::AdamW;
pub use tape::{channel_stats, Arr, Gradients, Tape, Var};
