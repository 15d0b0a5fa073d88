//! Event-by-event graph convolution over sliding windows of camera events.
pub mod events;
pub mod graph;
pub mod metrics;
pub mod net;
pub mod pixel_index;
pub mod run;
pub mod slide;
pub mod state_aware;
