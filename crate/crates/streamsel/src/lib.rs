//! Two-stage data selection for training on a sample stream: a cheap
//! feature-statistics filter keeps a small candidate buffer, and a
//! class-stratified importance sampler picks the mini-batch that minimizes
//! the gradient-estimator variance. Includes a verification engine
//! (closed-form vs Monte-Carlo variance, exhaustive allocation search) and
//! a simulated sequential-vs-pipelined training loop.

pub mod config;
pub mod error;
pub mod filter;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod stream;
pub mod variance;
pub mod vecmath;
