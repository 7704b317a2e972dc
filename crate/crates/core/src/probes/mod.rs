//! Differentiable stand-ins for segmentation and attribute classifiers.

mod layout;
mod positive;
mod probe;

pub use layout::{region_mask, Region, RegionLayout, RegionMask, RegionShape, FULL_REGION};
pub use positive::{collect_positive, PositiveSample, PositiveSet};
pub use probe::{probe_logit, AttributeProbe, LinearProbe, ProbeSpec, ProbeTerm, StepProbe};
