//! Tamper-evident sealing of IoT sensor logs.
//!
//! Readings are encrypted at the controller, assigned a capture state by
//! user-visible rules inside a trusted enclave, and sealed into hash-chained
//! chunks whose proofs let an auditor check integrity and let each user check
//! that their readings were treated as the rules required.

pub mod bench;
pub mod chain;
pub mod crypto;
pub mod enclave;
pub mod harness;
pub mod model;
pub mod notify;
pub mod pipeline;
pub mod rules;
pub mod store;
pub mod verify;
