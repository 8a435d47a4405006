//! Three-class backchannel prediction (no backchannel, continuer,
//! assessment) from frontchannel words, frontchannel audio and a learned
//! listener embedding.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod features;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod textfeat;
pub mod train;
