//! Shape arithmetic expressions: a transparency-validated expression
//! language, a differentiable evaluator for trainable univariate shape
//! functions, genetic-programming structure search, synthetic data
//! generators, shape-curve analysis, and a closed-form transparency checker.

pub mod analysis;
pub mod closedform;
pub mod config;
pub mod data;
pub mod eval;
pub mod expr;
pub mod gp;
