//! Core library for `shep`: static rewriting of PE32 kernel-style modules and
//! runtime enforcement of a control-transfer policy.
//!
//! The pipeline is: parse a PE32 image ([`pe`]), recover its code as a graph of
//! functions and basic blocks ([`disasm`], [`analyzer`]), emit an instrumented
//! copy of every safely-patchable function into a new executable section
//! ([`rewriter`]), and at run time route every indirect transfer through a
//! filter that consults a page-level policy map ([`monitor`]). A deterministic
//! x86 interpreter ([`emulator`]) executes original and rewritten images for
//! equivalence and attack testing, and [`corpus`] generates synthetic driver
//! images with known ground truth to test all of the above against.

pub mod analyzer;
pub mod corpus;
pub mod disasm;
pub mod emulator;
pub mod monitor;
pub mod pe;
pub mod rewriter;
