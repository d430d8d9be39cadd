//! Training engine for multi-agent decision-focused learning with
//! value-aware sequential communication.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches the
//! filesystem, the clock or the command line lives in the companion
//! `seqcomm-cli` crate.
//!
//! Layout:
//!
//! - [`diffcore`]: dense tensors and a recording tape with reverse-mode
//!   differentiation, including gradients of gradients.
//! - [`nets`]: message encoder, refinement net, world model, critic with
//!   monotonic mixing, and the soft value over joint actions.
//! - [`env`]: the hospital Dec-POMDP and small tabular environments.
//! - [`comm`]: decision-impact estimates, guidance potential, priority
//!   ordering, sequential action selection and the communication losses.
//! - [`bilevel`]: inner critic loop, conjugate gradient, implicit
//!   hypergradients.
//! - [`trainer`]: the outer training loop, replay buffer and metrics.
#![no_std]
// `!(x > 0.0)` style guards are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bilevel;
pub mod comm;
pub mod diffcore;
pub mod env;
mod error;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
