//! Keyframe selection for video question answering by predictive surprise.
//!
//! A sparse set of anchor frames is encoded into a latent space, a predictor
//! fills in latents for every frame, and the frames whose real latents
//! deviate most from the prediction are handed to a vision-language model.

pub mod bank;
pub mod cli;
pub mod evalharness;
pub mod ingest;
pub mod latents;
pub mod pipeline;
pub mod prior;
pub mod select;
pub mod synthworld;
pub mod transport;
pub mod vlmclient;
