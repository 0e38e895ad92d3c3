//! Inverse inference on networked linear systems under cooperative control.
//!
//! Pipeline: noisy snapshots → transition matrix (`estimation`, `confit`) →
//! continuous closed loop (`matlog`) → Laplacian and nodal factors
//! (`decouple`) → LQ weights that explain the gain (`inverse_lq`).

pub mod confit;
pub mod decouple;
pub mod estimation;
pub mod harness;
pub mod inverse_lq;
pub mod io;
pub mod linalg;
pub mod matlog;
pub mod sim;
pub mod system;

pub use linalg::LinalgError;
pub use system::{
    build_laplacian, check_consensus_stability, closed_loop_matrix, discretize, ClosedLoop, ConsensusReport,
    DirectedGraph, Laplacian, NodalSystem, SystemError, SystemSpec,
};
