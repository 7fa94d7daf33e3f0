//! Execution trace and the audits run over it.

use std::hash::{Hash, Hasher};

use thiserror::Error;

use super::HaltReason;
use crate::machine::cpu::FaultKind;
use crate::machine::memory::{Memory, World};
use crate::runpba::{FaultClass, FaultRecord, RecoveryDecision};
use crate::securezone::Vector;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    Provisioned,
    Boot { epoch: u32 },
    /// A retired instruction.
    Exec { pc: u32, world: World },
    Fault { kind: FaultKind, world: World, pc: u32 },
    FaultDispatch { vector: Vector, world: World, escalated: bool },
    IrqDispatch { id: u8, world: World },
    Classified { class: Option<FaultClass> },
    Flih { pc: u32, overwrote: bool },
    Lockdown { hold_stub: u32 },
    InterruptsCleared { count: usize },
    Persisted { record: FaultRecord },
    PersistFailed { error: String },
    Reset { reason: String, epoch: u32 },
    Restart,
    Recover { decision: RecoveryDecision },
    Attestation { lifecycle_claim: u16 },
    AttackerRead { addr: u32, ok: bool },
    AttackerWrite { addr: u32, value: u32, ok: bool },
    Halt { reason: HaltReason },
}

pub type TraceEntry = TraceEvent;

/// Append-only event log. When recording is off only a running digest and
/// counters are kept.
#[derive(Debug, Clone)]
pub struct Trace {
    record: bool,
    entries: Vec<TraceEvent>,
    digest: std::collections::hash_map::DefaultHasher,
    executed: u64,
}

impl Trace {
    pub fn new(record: bool) -> Trace {
        Trace { record, entries: Vec::new(), digest: Default::default(), executed: 0 }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn push(&mut self, e: TraceEvent) {
        e.hash(&mut self.digest);
        if self.record {
            self.entries.push(e);
        }
    }

    pub(super) fn exec(&mut self, pc: u32, world: World) {
        self.executed += 1;
        self.push(TraceEvent::Exec { pc, world });
    }

    pub fn entries(&self) -> &[TraceEvent] {
        &self.entries
    }

    /// Instructions retired since the device was built.
    pub fn executed(&self) -> u64 {
        self.executed
    }

    /// Order-sensitive digest of every event, recorded or not.
    pub fn digest(&self) -> u64 {
        self.digest.clone().finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditViolation {
    #[error("event {index}: non-secure instruction at {pc:#06x} ran between a PACBTI fault and lockdown")]
    RanBeforeLockdown { index: usize, pc: u32 },
    #[error("event {index}: non-secure instruction at {pc:#06x} ran outside the hold loop before recovery")]
    EscapedHold { index: usize, pc: u32 },
    #[error("event {index}: instruction fetched from non-executable address {pc:#06x}")]
    NonExecutable { index: usize, pc: u32 },
    #[error("event {index}: attacker accessed secure address {addr:#06x}")]
    SecureAccess { index: usize, addr: u32 },
    #[error("trace was not recorded")]
    NotRecorded,
}

/// Checks the no-resume property: once a fault is classified as PACBTI, no
/// non-secure instruction runs until lockdown, and afterwards only the hold
/// loop runs until the device is reset, restarted or recovered.
pub fn audit_no_resume(trace: &Trace, hold_stub: u32) -> Result<(), AuditViolation> {
    if !trace.is_recording() {
        return Err(AuditViolation::NotRecorded);
    }
    enum Phase {
        Normal,
        AwaitingLockdown,
        Held,
    }
    let mut phase = Phase::Normal;
    for (index, e) in trace.entries().iter().enumerate() {
        match e {
            TraceEvent::Classified { class: Some(c) } if c.is_pacbti() => {
                phase = Phase::AwaitingLockdown;
            }
            TraceEvent::Lockdown { .. } => phase = Phase::Held,
            TraceEvent::Reset { .. } | TraceEvent::Restart | TraceEvent::Recover { .. } | TraceEvent::Boot { .. } => {
                phase = Phase::Normal
            }
            TraceEvent::Exec { pc, world: World::NonSecure } => match phase {
                Phase::Normal => {}
                Phase::AwaitingLockdown => return Err(AuditViolation::RanBeforeLockdown { index, pc: *pc }),
                Phase::Held if *pc != hold_stub => return Err(AuditViolation::EscapedHold { index, pc: *pc }),
                Phase::Held => {}
            },
            _ => {}
        }
    }
    Ok(())
}

/// Every executed pc lies in an executable region, and no attacker access
/// to secure memory succeeded.
pub fn audit_memory(trace: &Trace, memory: &Memory) -> Result<(), AuditViolation> {
    if !trace.is_recording() {
        return Err(AuditViolation::NotRecorded);
    }
    for (index, e) in trace.entries().iter().enumerate() {
        match *e {
            TraceEvent::Exec { pc, .. } if !memory.region_at(pc).is_some_and(|r| r.flags.executable) => {
                return Err(AuditViolation::NonExecutable { index, pc });
            }
            TraceEvent::AttackerRead { addr, ok: true } | TraceEvent::AttackerWrite { addr, ok: true, .. }
                if memory.region_at(addr).is_some_and(|r| r.world == World::Secure) =>
            {
                return Err(AuditViolation::SecureAccess { index, addr });
            }
            _ => {}
        }
    }
    Ok(())
}
