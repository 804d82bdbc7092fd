//! In-process horizontal and vertical federation built on explicit messages.

pub mod hfl;
pub mod messages;
pub mod party;
pub mod vfl;

pub use hfl::{hfl_aggregate, hfl_local_epoch, run_hfl, HflClient, HflConfig, HflOutcome};
pub use messages::{audit_log, FedMessage, MessageLog, MetricRecord};
pub use party::{
    batch_order, stream_rng, train_centralized, PartyObfuscation, PassportMode,
};
pub use vfl::{
    run_vfl, vfl_predict, vfl_step, VflActiveParty, VflConfig, VflOutcome, VflPassiveParty,
};
