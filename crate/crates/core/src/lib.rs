//! Terminology-presence retrieval engine.
//!
//! A single-layer multi-head cross-attention scorer converts attention
//! between an utterance's feature frames and a candidate term's tokens
//! into a presence probability. The scorer trains with a dual-objective
//! BCE loss under a three-stage curriculum (word spans, phrase spans,
//! annotated terms) and serves Top-k retrieval over a term bank with
//! per-stage latency instrumentation, next to a cosine-similarity
//! baseline and a recall@k evaluation harness.

pub mod baseline;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalbench;
pub mod numerics;
pub mod retriever;
pub mod seeds;
pub mod serving;
pub mod training;
