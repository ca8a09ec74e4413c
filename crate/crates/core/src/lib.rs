//! Hierarchical domain decomposition solver for the Poisson-type problem
//! `-div(κ grad u) = f` on the unit square with Dirichlet data.

pub mod bayes;
pub mod cli;
pub mod ddtree;
pub mod error;
pub mod fem;
pub mod functionals;
pub mod hdd;
pub(crate) mod linalg;
pub mod lowrank;
pub mod mesh;
pub mod oracle;

pub use ddtree::{DDNode, DDTree, NodeId};
pub use error::{HddError, Result};
pub use fem::CoefficientField;
pub use lowrank::ToleranceSpec;
pub use mesh::{IndexSet, Mesh, Rect};
