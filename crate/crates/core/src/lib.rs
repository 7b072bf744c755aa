// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod dynamics;
pub mod harness;
pub mod llm_client;
pub mod network;
pub mod scenario;
