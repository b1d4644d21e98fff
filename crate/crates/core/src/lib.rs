//! Dynamical thickening of local stable manifolds at non-degenerate critical
//! points, flow selectors inside the resulting Conley blocks, and a cubical
//! homology check of the cell-attachment step of Morse theory.
//!
//! The pipeline runs bottom-up:
//!
//! 1. [`field`] locates a critical point `x` and its Morse data,
//! 2. [`flow`] integrates the negative gradient flow with level events,
//! 3. [`thickening`] builds the block `N` with its stable fibration and the
//!    fiberwise semi-flow `theta`,
//! 4. [`selector`] builds the selector hypersurface and the region classifier,
//! 5. [`retract`] implements the deformation retraction and the homotopy,
//! 6. [`homology`] compares Betti numbers of the sublevel sets at `c +- eps`.

pub mod field;
pub mod flow;
pub mod homology;
pub mod retract;
pub mod selector;
pub mod thickening;
pub mod util;

pub use field::{
    find_critical, morse_data, verify_isolation, CriticalPoint, Domain, Factor, FieldError, FieldFn,
    IsolationReport, MorseData, Point, Probe, ScalarField, Term, TermField,
};
pub use flow::{Crossing, FlowConfig, FlowError, GradientFlow, Termination, Trajectory};
pub use homology::{attach_cell_check, betti_euler, build_complex, AttachVerdict, BettiVector, CubicalComplex, HomologyError};
pub use retract::{homotopy_h, retract_point, verify_homotopy, verify_retraction, HomotopyReport, RetractError, RetractionReport};
pub use selector::{build_selector, s_reparam, Classification, Region, SelectorComplex, SelectorError};
pub use thickening::{build_block, BlockConfig, BlockError, ConleyBlock, FiberCoordinates, Label};
