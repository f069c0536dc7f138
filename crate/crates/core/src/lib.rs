//! Encode TCP sessions from PCAP captures into typed feature tensors, train
//! autoencoders with a knowledge-augmented loss, and repair reconstructions
//! into protocol-compliant sessions.

pub mod autodiff;
pub mod enforce;
pub mod features;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod pcap;
pub mod session;
pub mod synth;
