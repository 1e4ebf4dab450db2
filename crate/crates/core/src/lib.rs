//! Ring conformer generation by flow matching in Cremer-Pople coordinates.
//!
//! A ring of 5 to 8 atoms is described by its `n - 3` puckering coordinates.
//! A learned vector field transports samples from a bounded prior to the
//! data distribution, and Cartesian structures are rebuilt from tabulated
//! bond lengths and angles.

pub mod bond_params;
pub mod error;
pub mod evaluation;
pub mod generative;
pub mod io;
pub mod puckering;
pub mod ring;
pub mod synthetic;
pub mod vector_field;

pub use bond_params::{build_table, BondAngleKey, BondLengthKey, BondParameterTable};
pub use error::{Error, Result};
pub use evaluation::{compute_metrics, EnsemblePair, MetricKind, MetricReport, SymmetryMode};
pub use generative::{sample, train, FlowModel, PriorSpec, SampleConfig, TrainConfig};
pub use vector_field::{Checkpoint, ModelConfig, ModelParams};
pub use puckering::{cart_to_cp, cp_to_cart, feasibility_check, CpCoords, FeasibilityReport};
pub use ring::{BondOrder, Conformer, Numbering, Point3, RingDataset, RingRecord, RingSpec};
