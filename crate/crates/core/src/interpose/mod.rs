//! The upper half: wrappers around every application-visible call.
//!
//! Wrappers translate virtual handles to the current epoch's real ones,
//! count bytes per process pair, keep the active request and communicator
//! lists, and break blocking calls into non-blocking steps so the process
//! can be checkpointed between any two of them. Everything here except the
//! metrics is what a checkpoint image stores.

mod calls;
mod state;
mod upper;
mod vtable;

pub use calls::{CollStage, CollectiveCall, Emulation, Mode, RecvCall, SendCall, SplitCall};
pub use state::{
    gid_of, ActiveCommList, CollKey, CommDescriptor, Direction, DrainedBuffer, GroupDescriptor, P2pRecord,
    PairCounters, ReplayEntry,
};
pub use upper::{Completion, ProcessReport, Upper, WrapperContext, WrapperStats, EMULATION_TAG};
pub use vtable::{Binding, HandleKind, TableSnapshot, VirtualId, VirtualTable};

#[cfg(test)]
mod tests;
