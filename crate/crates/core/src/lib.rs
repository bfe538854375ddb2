//! Algorithmic core for NMS-free detector analysis.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (only `alloc` is required):
//!
//! - [`geometry`]: corner-form boxes, IoU, anchor points and the spatial prior.
//! - [`assignment`]: the task-aligned matching metric, one-to-many and
//!   one-to-one assignment, classification targets, the supervision gap and
//!   alignment counting.
//! - [`postprocess`]: greedy NMS and NMS-free top-k selection.
//! - [`tensor`]: dense NCHW tensors, reference convolution, BN folding,
//!   large-kernel reparameterization, block forwards and exact cost models.
//! - [`rank`]: SVD-based numerical rank and rank-guided block allocation.
//!
//! File formats, the benchmark harness and the CLI live in the `detlab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assignment;
pub mod geometry;
pub mod postprocess;
pub mod rank;
pub mod tensor;

pub use assignment::{
    alignment_frequency, assign_one_to_many, assign_one_to_one, consistency_ratio, gap_oracle,
    matching_metric, supervision_gap, AlignmentCount, AssignError, AssignmentResult, GapReport,
    GroundTruth, GtAssignment, MetricParams, Positive, Prediction,
};
pub use geometry::{iou, spatial_prior, AnchorPoint, BoundingBox, GeometryError};
pub use postprocess::{nms, nms_free_select, Detection, NmsConfig, SelectConfig};
pub use rank::{
    numerical_rank, rank_guided_allocate, singular_values, stage_ranks, AllocationStep,
    AllocationTrace, Matrix, RankError, RankReport, StageEntry, StageRank,
};
pub use tensor::{Tensor, TensorArchive, TensorError};
