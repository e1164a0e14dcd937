//! Scene-graph guided dense video captioning with object grounding.

pub mod autodiff;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod gradcheck;
pub mod graph_encoder;
pub mod grounding;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scene_graph;
pub mod tensor;
pub mod training;
