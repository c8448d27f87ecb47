//! Dense 2-D tensor engine with reverse-mode differentiation.
//!
//! Everything in this crate computes on row-major `[rows x cols]` matrices:
//! a batch of token positions is `[positions x hidden]`, logits are
//! `[positions x vocab]`, a scalar loss is `[1 x 1]`. Ops are recorded on a
//! [`Graph`] tape; [`Graph::backward`] walks the tape in reverse and
//! accumulates exact gradients into every reachable node that requires them.
//!
//! Parameters live outside the tape in a [`ParamStore`] and are bound into a
//! graph per training step; frozen parameters bind as constants, so no
//! gradient ever flows into them.

mod element;
mod gradcheck;
mod graph;
mod param;
mod schedule;
mod seeds;

pub use element::Element;
pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use param::{adam_step, AdamHyper, Parameter, ParamStore};
pub use schedule::{inverse_sqrt_lr, polynomial_decay_lr};
pub use seeds::{derive_seed, seeded_rng};
