//! Runtime around `proofkernel-core`: the master state machine, workers in
//! threads, processes or a virtual-time simulator, the JSON-lines protocol
//! and the batch and replay drivers.

pub mod check;
pub mod kernel;
pub mod protocol;
pub mod replay;
pub mod runtime;
pub mod serve;
pub mod sim;
pub mod wire;
pub mod worker;
