//! Application root of trust: PACBTI fault classification, first- and
//! second-level fault handling, persistence into trusted storage, non-secure
//! lockdown and the device lifecycle.

pub mod its;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::isa::Instruction;
use crate::machine::layout;
use crate::machine::memory::{Memory, World};
use crate::machine::pac::PacbtiControl;
use crate::securezone::{FaultContext, FRAME_PC, FRAME_XPSR, XPSR_B};
pub use its::{ItsError, ItsStore, StorageFault};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultClass {
    PacFault,
    BtiFault,
    OtherInvalidState,
}

impl FaultClass {
    pub fn is_pacbti(self) -> bool {
        matches!(self, FaultClass::PacFault | FaultClass::BtiFault)
    }

    fn code(self) -> u8 {
        match self {
            FaultClass::PacFault => 1,
            FaultClass::BtiFault => 2,
            FaultClass::OtherInvalidState => 3,
        }
    }

    fn from_code(c: u8) -> Option<FaultClass> {
        match c {
            1 => Some(FaultClass::PacFault),
            2 => Some(FaultClass::BtiFault),
            3 => Some(FaultClass::OtherInvalidState),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunPbaError {
    #[error("fault is not a non-secure invalid-state UsageFault")]
    NotInvalidState,
    #[error("partition buffer already held an unpersisted fault; it was overwritten")]
    BufferOccupied,
    #[error("partition buffer is empty")]
    BufferEmpty,
    #[error("trusted storage failure: {0}")]
    StorageFailure(#[from] ItsError),
    #[error("invalid lifecycle transition {from:?} -> {to:?}")]
    InvalidTransition { from: LifecycleState, to: LifecycleState },
    #[error("malformed fault record")]
    MalformedRecord,
}

/// Decides whether an invalid-state fault came from PAC or BTI.
///
/// A fault stacked at an `AUT` is a PAC failure. Otherwise a set EPSR.B means
/// an indirect branch missed its landing pad. Anything else is some other
/// invalid-state condition.
pub fn classify_fault(ctx: &FaultContext, image: &Memory) -> Result<FaultClass, RunPbaError> {
    if !ctx.cfsr_invalid_state() || ctx.world != World::NonSecure {
        return Err(RunPbaError::NotInvalidState);
    }
    let at_aut = image
        .peek(ctx.stacked_pc)
        .and_then(|w| Instruction::decode(w).ok())
        .is_some_and(|i| i == Instruction::Aut);
    Ok(if at_aut {
        FaultClass::PacFault
    } else if ctx.epsr_b {
        FaultClass::BtiFault
    } else {
        FaultClass::OtherInvalidState
    })
}

/// Persisted evidence of one PACBTI violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultRecord {
    pub sequence: u64,
    pub kind: FaultClass,
    pub fault_pc: u32,
    pub fault_sp: u32,
    pub fault_lr: u32,
    pub privileged: bool,
    pub boot_epoch: u32,
}

impl FaultRecord {
    pub const BYTES: usize = 26;

    /// Little-endian fields in declaration order.
    pub fn to_bytes(&self) -> [u8; Self::BYTES] {
        let mut out = [0u8; Self::BYTES];
        out[0..8].copy_from_slice(&self.sequence.to_le_bytes());
        out[8] = self.kind.code();
        out[9..13].copy_from_slice(&self.fault_pc.to_le_bytes());
        out[13..17].copy_from_slice(&self.fault_sp.to_le_bytes());
        out[17..21].copy_from_slice(&self.fault_lr.to_le_bytes());
        out[21] = self.privileged as u8;
        out[22..26].copy_from_slice(&self.boot_epoch.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<FaultRecord, RunPbaError> {
        if b.len() != Self::BYTES || b[21] > 1 {
            return Err(RunPbaError::MalformedRecord);
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        Ok(FaultRecord {
            sequence: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            kind: FaultClass::from_code(b[8]).ok_or(RunPbaError::MalformedRecord)?,
            fault_pc: u32_at(9),
            fault_sp: u32_at(13),
            fault_lr: u32_at(17),
            privileged: b[21] == 1,
            boot_epoch: u32_at(22),
        })
    }
}

/// Reads every fault record from storage in sequence order.
pub fn list_records(its: &ItsStore) -> Result<Vec<FaultRecord>, RunPbaError> {
    its.entries()?.map(|(_, blob)| FaultRecord::from_bytes(blob)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LifecycleState {
    AssemblyAndTest,
    Provisioning,
    Secured,
    NspeCompromised,
    RecoverableDebug,
    Decommissioned,
}

impl LifecycleState {
    /// PSA-style state code carried in the low byte of the lifecycle claim.
    pub fn code(self) -> u8 {
        match self {
            LifecycleState::AssemblyAndTest => 0x10,
            LifecycleState::Provisioning => 0x20,
            LifecycleState::Secured => 0x30,
            LifecycleState::NspeCompromised => 0x35,
            LifecycleState::RecoverableDebug => 0x50,
            LifecycleState::Decommissioned => 0x60,
        }
    }

    pub fn from_code(code: u8) -> Option<LifecycleState> {
        LifecycleState::ALL.into_iter().find(|s| s.code() == code)
    }

    pub const ALL: [LifecycleState; 6] = [
        LifecycleState::AssemblyAndTest,
        LifecycleState::Provisioning,
        LifecycleState::Secured,
        LifecycleState::NspeCompromised,
        LifecycleState::RecoverableDebug,
        LifecycleState::Decommissioned,
    ];

    pub fn can_transition(self, to: LifecycleState) -> bool {
        use LifecycleState::*;
        matches!(
            (self, to),
            (AssemblyAndTest, Provisioning)
                | (Provisioning, Secured)
                | (Secured, NspeCompromised)
                | (NspeCompromised, Secured)
                | (_, Decommissioned)
        )
    }

    pub fn transition(&mut self, to: LifecycleState) -> Result<(), RunPbaError> {
        if !self.can_transition(to) {
            return Err(RunPbaError::InvalidTransition { from: *self, to });
        }
        *self = to;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPbaStatus {
    pub runtime_failure: bool,
    pub malfunction: bool,
    pub control: PacbtiControl,
}

/// Operator decision after a compromise has been assessed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecoveryDecision {
    Recover,
    Decommission,
}

/// Partition-private state of the RunPBA service.
#[derive(Debug, Clone, Default)]
pub struct RunPbaPartition {
    buffer: Option<FaultContext>,
    /// Sticky until power cycle: set when the service itself misbehaved.
    pub malfunction: bool,
    next_sequence: u64,
}

impl RunPbaPartition {
    /// Resumes sequence numbering after the records already in storage.
    pub fn new(its: &ItsStore) -> RunPbaPartition {
        let next_sequence = its
            .entries()
            .ok()
            .and_then(|e| e.map(|(uid, _)| uid).max())
            .map(|uid| uid + 1)
            .unwrap_or(1);
        RunPbaPartition { buffer: None, malfunction: false, next_sequence }
    }

    pub fn buffer(&self) -> Option<&FaultContext> {
        self.buffer.as_ref()
    }

    /// First-level handler: copies the context into the partition buffer,
    /// mirrored byte-for-byte into secure RAM. Touches nothing else.
    pub fn flih_capture(&mut self, ctx: &FaultContext, secure_ram: &mut Memory) -> Result<(), RunPbaError> {
        let occupied = self.buffer.is_some();
        for (i, w) in ctx.to_words().iter().enumerate() {
            secure_ram.poke(layout::PARTITION_BUFFER + i as u32, *w);
        }
        self.buffer = Some(*ctx);
        if occupied {
            self.malfunction = true;
            return Err(RunPbaError::BufferOccupied);
        }
        Ok(())
    }

    /// Reads the buffer back from secure RAM, as the SLIH sees it.
    pub fn buffered_context(&self, secure_ram: &Memory) -> Option<FaultContext> {
        self.buffer?;
        let mut w = [0u32; FaultContext::WORDS];
        for (i, slot) in w.iter_mut().enumerate() {
            *slot = secure_ram.peek(layout::PARTITION_BUFFER + i as u32)?;
        }
        FaultContext::from_words(&w)
    }

    /// Second-level handler: classifies the buffered fault, persists the
    /// record and moves the lifecycle to NSPE_COMPROMISED. A storage error
    /// still clears the buffer and changes the lifecycle, but sets the
    /// malfunction flag.
    pub fn slih_persist(
        &mut self,
        memory: &Memory,
        its: &mut ItsStore,
        lifecycle: &mut LifecycleState,
        boot_epoch: u32,
    ) -> Result<FaultRecord, RunPbaError> {
        let ctx = self.buffered_context(memory).ok_or(RunPbaError::BufferEmpty)?;
        self.buffer = None;
        let kind = classify_fault(&ctx, memory)?;
        let record = FaultRecord {
            sequence: self.next_sequence,
            kind,
            fault_pc: ctx.stacked_pc,
            fault_sp: ctx.stacked_sp,
            fault_lr: ctx.stacked_lr,
            privileged: ctx.privileged,
            boot_epoch,
        };
        if kind.is_pacbti() && *lifecycle == LifecycleState::Secured {
            lifecycle.transition(LifecycleState::NspeCompromised)?;
        }
        if let Err(e) = its.set(record.sequence, &record.to_bytes()) {
            self.malfunction = true;
            return Err(e.into());
        }
        self.next_sequence += 1;
        Ok(record)
    }

    /// Live status for attestation.
    pub fn query_status(&self, its: &ItsStore, lifecycle: LifecycleState, control: PacbtiControl) -> RunPbaStatus {
        let compromised = lifecycle == LifecycleState::NspeCompromised;
        match list_records(its) {
            Ok(records) => RunPbaStatus {
                runtime_failure: compromised || records.iter().any(|r| r.kind.is_pacbti()),
                malfunction: self.malfunction,
                control,
            },
            Err(_) => RunPbaStatus { runtime_failure: compromised, malfunction: true, control },
        }
    }
}

/// Redirects the stacked non-secure return address to the hold loop and
/// clears the stacked EPSR.B so the loop itself cannot fault.
pub fn lockdown_nspe(memory: &mut Memory, frame_addr: u32, hold_stub: u32) {
    memory.poke(frame_addr + FRAME_PC, hold_stub);
    if let Some(xpsr) = memory.peek(frame_addr + FRAME_XPSR) {
        memory.poke(frame_addr + FRAME_XPSR, xpsr & !XPSR_B);
    }
}
