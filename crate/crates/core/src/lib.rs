//! One-shot federated collaborative filtering.
//!
//! Clients fit bias-aware masked NMF models on their own ratings, upload only
//! item factors and item biases, and receive global item patterns back from a
//! single joint factorization on the processor.

pub mod data;
pub mod nmf;
pub mod cnmf;
pub mod tuning;
pub mod eval;
pub mod federation;
pub mod privacy_audit;
pub mod container;
pub mod synthetic;
pub mod experiment;
