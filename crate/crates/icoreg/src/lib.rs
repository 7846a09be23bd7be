//! Point cloud registration built on rotation-equivariant local descriptors.
//!
//! Local patch features are lifted onto the 60-element icosahedral rotation
//! group, embedded with localized group convolutions, and pooled into
//! rotation-invariant descriptors. Because the group feature of a rotated
//! patch is a row permutation of the original, each descriptor match also
//! yields a rotation estimate, which the reduced-search RANSAC estimators
//! (coarse rotation verification and one-shot estimation) exploit to cut the
//! hypothesis space from correspondence triplets down to single matches.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability has one. The `icoreg` binary exposes the same
//! pipeline as subcommands.

pub mod backbone;
pub mod error;
pub mod geom;
pub mod groupnet;
pub mod icosa;
pub mod kdtree;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod ransac;
pub mod so3;

pub use error::{Error, Result};
pub use icosa::{icosahedral_group, GroupElement, IcosahedralGroup};
