//! City-level geolocation of tweets.
//!
//! A four-branch neural classifier (word-vector BiLSTM text encoder with
//! attention and max pooling, character-level profile-location encoder,
//! and calendar encoders for the two timestamps) over a gazetteer of city
//! bounding boxes, plus the batching NDJSON pipeline that feeds it.

pub mod data;
pub mod embeddings;
pub mod gazetteer;
pub mod metrics;
pub mod model;
pub mod stream;
pub mod tensor;
pub mod training;
