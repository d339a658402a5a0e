//! Interactive grammar-guided genetic programming for composing
//! machine-learning workflows: a BNF grammar defines the search space, an
//! evolutionary engine optimises cross-validated balanced accuracy, and at
//! scheduled pauses a human (or a simulated user) can prune algorithms and
//! hyperparameter values from the grammar.

pub mod engine;
pub mod evaluation;
pub mod experiment;
pub mod grammar;
pub mod interaction;
pub mod mlcatalog;
pub mod search;
pub mod simusers;
