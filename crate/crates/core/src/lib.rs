//! Link-reversal scheduling of mobile servers on an overlay HST: graph and
//! tree construction, the message protocol, a discrete-event simulator,
//! offline forest oracles, trace analysis and invariant checking.

pub mod checker;
pub mod embed;
pub mod experiment;
pub mod fixtures;
pub mod forest;
pub mod gaps;
pub mod graph;
pub mod hst;
pub mod protocol;
pub mod rational;
pub mod sim;
