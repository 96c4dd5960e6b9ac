//! Query-trained inference networks for undirected graphical models.
//!
//! A graphical model (binary RBM, two-layer DBM, Gaussian RBM or a
//! clone-structured grid MRF) is compiled into a feed-forward network by
//! unrolling parallel loopy belief propagation for a fixed number of layers.
//! The network takes evidence plus a query mask and returns marginals for the
//! queried variables; its parameters are the model parameters, trained end to
//! end on a masked cross-entropy loss.

pub mod binary;
pub mod checkpoint;
pub mod checks;
pub mod datasets;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod query;
pub mod tensor;
pub mod train;

pub use error::{QtError, Result};
pub use model::{LayerTrace, ModelKind, Parameters};
pub use numerics::Temperature;
pub use query::{QueryMask, QuerySpec};
pub use tensor::{Matrix, Tensor};
