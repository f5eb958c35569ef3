//! Erasure-coded leader-based state machine replication: Carnot 1, its optimised variant and
//! Carnot 2, together with a deterministic network simulator and an offline trace verifier.

pub mod carnot1_core;
pub mod carnot1_opt;
pub mod carnot2;
pub mod codec;
pub mod net_sim;
pub mod protocol_types;
pub mod replica;
pub mod sim_crypto;
pub mod verifier;
pub mod wire;
