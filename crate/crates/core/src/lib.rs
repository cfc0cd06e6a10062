//! Fresh-impact survey pipeline: sliding-window scanning of a raster
//! archive with a calibrated scorer, grouping of detections into dateable
//! candidates, confidence and thermal-inertia stratified selection, bias
//! measurement, and a review catalog.

// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod candidates;
pub mod catalog;
pub mod layout;
pub mod pipeline;
pub mod raster;
pub mod scan;
pub mod scorer;
pub mod synth;
