//! Reverse-mode autodiff and its finite-difference checker.

pub mod check;
mod tape;

pub use tape::{BatchStats, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
