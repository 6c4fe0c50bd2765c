//! Model layer: domains with hard walls, potentials and their gradients,
//! canonical measures, state partitions and reaction coordinates.

mod domain;
mod measure;
mod partition;
mod potential;
mod rc;

pub use domain::{Block, Domain};
pub(crate) use measure::truncation_box;
pub use measure::{partition_function, CanonicalMeasure};
pub use partition::{Region, StatePartition};
pub use potential::Potential;
pub use rc::{RcRange, ReactionCoordinate};
