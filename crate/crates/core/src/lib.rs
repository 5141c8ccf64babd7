//! Discrete-event simulator for layered QKD + PQC trusted-node networks.
//!
//! Hop tunnels between neighbouring nodes are keyed from QKD link buffers by a
//! rotation agent; an end-to-end PQC handshake rides those tunnels and keys the
//! data tunnel. Every layer rekeys on a fixed period and falls back to random keys
//! when its source stops producing, so failures cascade upwards on a bounded clock.

pub mod hop_tunnel;
pub mod netmodel;
pub mod qkd_kms;
pub mod simcore;
pub mod rotation_agent;
pub mod e2e_pqc;
pub mod security_model;
pub mod scenario;
