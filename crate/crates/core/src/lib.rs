//! Newton-GRAPE optimal control for magnetic resonance spin systems.
//!
//! The crate is organised bottom-up: [`spinop`] builds operators and states,
//! [`matexp`] provides exponentials and their directional derivatives,
//! [`grape`] evaluates fidelities with exact gradients and Hessians,
//! [`penalty`] holds control penalties and coordinate transforms, [`optim`]
//! drives the ascent and [`cli`] wires everything to configuration files.

pub mod cli;
pub mod grape;
pub mod linalg;
pub mod matexp;
pub mod optim;
pub mod penalty;
pub mod spinop;
