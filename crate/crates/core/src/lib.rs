//! Simulator of a TrustZone-style microcontroller with PAC/BTI control-flow
//! protection and a runtime fault-based attestation stack.

pub mod machine;
pub mod securezone;
pub mod assembler;
pub mod runpba;
pub mod attestation;
pub mod device;
pub mod harness;
