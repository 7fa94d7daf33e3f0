//! One simulated device: core, secure zone, RunPBA partition, trusted
//! storage, lifecycle and attestation identity.
//!
//! Secure-world code is native: when the core's pc lands on a secure handler
//! address, the device runs the corresponding Rust routine instead of
//! fetching instructions.

mod state;
pub mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::NS_USAGEFAULT_SYMBOL;
use crate::attestation::{build_token, AttestError, Authenticator, AttestationKey, AttestationToken, Evidence, Nonce, INSTANCE_ID_LEN};
use crate::machine::cpu::{FaultKind, MachineError, MachineState, StepResult, UsageCause};
use crate::machine::image::ProgramImage;
use crate::machine::layout;
use crate::machine::memory::{AccessKind, AccessViolation, Accessor, LayoutError, Memory, MemoryRegion, Privilege, RegionFlags, RegionKind, World};
use crate::machine::pac::{PacbtiControl, DEFAULT_TAG_WIDTH};
use crate::runpba::{
    classify_fault, list_records, lockdown_nspe, FaultClass, FaultRecord, ItsStore, LifecycleState, RecoveryDecision,
    RunPbaError, RunPbaPartition, RunPbaStatus,
};
use crate::securezone::{
    ConfigError, DispatchError, ExceptionCause, PendedInterrupt, ReturnError, SecureZone, SystemControlRegisters,
    Vector, RUNPBA_SLIH_IRQ,
};
pub use state::{DeviceDir, DeviceDirError, PersistedState};
pub use trace::{Trace, TraceEntry, TraceEvent};

/// What the second-level handler does after persisting a fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostPersistPolicy {
    /// Keep the non-secure side parked in the hold loop until an operator decides.
    #[default]
    HoldInSpe,
    /// Recover automatically: back to SECURED with a full reset and a fresh key.
    ResetAfterPersist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub tag_width: u32,
    pub policy: PostPersistPolicy,
    /// Install the RunPBA fault configuration at boot. Off models a stock device.
    pub runpba: bool,
    pub trace: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig { tag_width: DEFAULT_TAG_WIDTH, policy: PostPersistPolicy::HoldInSpe, runpba: true, trace: true }
    }
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("lockup: {0}")]
    Lockup(#[from] DispatchError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("secure world reached {0:#06x}, which holds no handler")]
    SecureCodeFault(u32),
    #[error(transparent)]
    ExceptionReturn(#[from] ReturnError),
    #[error("boot configuration rejected: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    RunPba(#[from] RunPbaError),
    #[error("image does not fit the device address map: {0}")]
    Layout(#[from] LayoutError),
}

/// Why the device stopped executing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    /// The non-secure program executed `HALT`.
    Exit,
    Decommissioned,
    /// Simulation error; see the message.
    Diagnostic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tick {
    /// A non-secure instruction retired.
    Instruction,
    /// A fault was raised and dispatched.
    Fault,
    /// Native secure code or an interrupt dispatch ran.
    Secure,
    Halted,
}

/// One fault raised by the non-secure world, as observed by the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub tick: u64,
    pub kind: FaultKind,
    pub pc: u32,
    /// RunPBA classification, for invalid-state UsageFaults.
    pub class: Option<FaultClass>,
}

pub struct Device {
    pub machine: MachineState,
    pub zone: SecureZone,
    pub partition: RunPbaPartition,
    pub its: ItsStore,
    pub lifecycle: LifecycleState,
    pub boot_epoch: u32,
    pub config: DeviceConfig,
    pub trace: Trace,
    pub halted: Option<HaltReason>,
    pub faults: Vec<FaultEvent>,
    instance_id: [u8; INSTANCE_ID_LEN],
    attestation_key: Option<AttestationKey>,
    image: ProgramImage,
    rng: ChaCha20Rng,
    ticks: u64,
}

fn secure_regions() -> Vec<MemoryRegion> {
    let halt = crate::machine::isa::Instruction::<i32>::Halt.encode().unwrap();
    let region = |name: &str, kind, base, len: u32, flags, fill| MemoryRegion {
        name: name.to_string(),
        kind,
        base,
        flags,
        world: World::Secure,
        min_privilege: Privilege::Privileged,
        contents: vec![fill; len as usize],
    };
    vec![
        region("s_code", RegionKind::Code, layout::SECURE_CODE_BASE, layout::SECURE_CODE_LEN, RegionFlags::RX, halt),
        region("s_data", RegionKind::Data, layout::SECURE_DATA_BASE, layout::SECURE_DATA_LEN, RegionFlags::RW, 0),
        region("s_stack", RegionKind::Stack, layout::SECURE_STACK_BASE, layout::SECURE_STACK_LEN, RegionFlags::RW, 0),
    ]
}

/// Full address map for `image`: the fixed secure regions plus the image's.
pub fn device_memory(image: &ProgramImage) -> Result<Memory, LayoutError> {
    let mut regions = secure_regions();
    regions.extend(image.regions.iter().map(|r| r.to_memory_region()));
    Memory::new(regions)
}

impl Device {
    /// Builds a device in ASSEMBLY_AND_TEST, installs the image, draws its
    /// identity and attestation key, and moves it to SECURED.
    pub fn provision(image: ProgramImage, config: DeviceConfig, seed: u64, its: ItsStore) -> Result<Device, DeviceError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut lifecycle = LifecycleState::AssemblyAndTest;
        lifecycle.transition(LifecycleState::Provisioning)?;
        let mut instance_id = [0u8; INSTANCE_ID_LEN];
        rand::RngCore::fill_bytes(&mut rng, &mut instance_id);
        let key = AttestationKey::random(&mut rng);
        lifecycle.transition(LifecycleState::Secured)?;
        let mut dev = Device::assemble_parts(image, config, rng, its, lifecycle, 0, instance_id, Some(key))?;
        dev.trace.push(TraceEvent::Provisioned);
        Ok(dev)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble_parts(
        image: ProgramImage,
        config: DeviceConfig,
        mut rng: ChaCha20Rng,
        its: ItsStore,
        lifecycle: LifecycleState,
        boot_epoch: u32,
        instance_id: [u8; INSTANCE_ID_LEN],
        attestation_key: Option<AttestationKey>,
    ) -> Result<Device, DeviceError> {
        let memory = device_memory(&image)?;
        let machine = MachineState::new(memory, &mut rng, config.tag_width);
        let partition = RunPbaPartition::new(&its);
        let halted = (lifecycle == LifecycleState::Decommissioned).then_some(HaltReason::Decommissioned);
        Ok(Device {
            machine,
            zone: SecureZone::default(),
            partition,
            its,
            lifecycle,
            boot_epoch,
            config,
            trace: Trace::new(config.trace),
            halted,
            faults: Vec::new(),
            instance_id,
            attestation_key,
            image,
            rng,
            ticks: 0,
        })
    }

    pub fn image(&self) -> &ProgramImage {
        &self.image
    }

    pub fn instance_id(&self) -> [u8; INSTANCE_ID_LEN] {
        self.instance_id
    }

    pub fn attestation_key(&self) -> Option<&AttestationKey> {
        self.attestation_key.as_ref()
    }

    /// Device ticks so far (instructions, fault dispatches and secure routines).
    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.image.symbol(name)
    }

    /// The non-secure side is parked in the lockdown loop.
    pub fn is_held(&self) -> bool {
        self.machine.world == World::NonSecure && self.machine.regs.pc == self.image.hold_stub
    }

    pub fn in_ns_thread(&self) -> bool {
        self.machine.world == World::NonSecure && !self.machine.handler_mode
    }

    fn halt(&mut self, reason: HaltReason) {
        self.trace.push(TraceEvent::Halt { reason: reason.clone() });
        self.machine.halted = true;
        self.halted = Some(reason);
    }

    fn diagnostic(&mut self, err: DeviceError) -> DeviceError {
        self.halt(HaltReason::Diagnostic(err.to_string()));
        err
    }

    /// Advances the device by one tick.
    pub fn step(&mut self) -> Result<Tick, DeviceError> {
        if self.halted.is_some() {
            return Ok(Tick::Halted);
        }
        self.ticks += 1;
        if self.machine.world == World::Secure {
            let pc = self.machine.regs.pc;
            return match self.run_native(pc) {
                Ok(()) => Ok(Tick::Secure),
                Err(e) => Err(self.diagnostic(e)),
            };
        }
        if let Some(irq) = self.zone.take_dispatchable(&self.machine) {
            self.trace.push(TraceEvent::IrqDispatch { id: irq.id, world: irq.world });
            return match self.zone.dispatch_interrupt(&mut self.machine, irq) {
                Ok(_) => Ok(Tick::Secure),
                Err(e) => Err(self.diagnostic(e.into())),
            };
        }
        let pc = self.machine.regs.pc;
        let world = self.machine.world;
        let res = match self.machine.step() {
            Ok(r) => r,
            Err(e) => return Err(self.diagnostic(e.into())),
        };
        match res {
            StepResult::Continue => {
                self.trace.exec(pc, world);
                Ok(Tick::Instruction)
            }
            StepResult::Halted => {
                self.trace.exec(pc, world);
                self.halt(HaltReason::Exit);
                Ok(Tick::Halted)
            }
            StepResult::ExceptionReturn(v) => {
                self.trace.exec(pc, world);
                match self.zone.exception_return(&mut self.machine, v) {
                    Ok(_) => Ok(Tick::Instruction),
                    Err(e) => Err(self.diagnostic(e.into())),
                }
            }
            StepResult::Faulted(f) => {
                self.trace.push(TraceEvent::Fault { kind: f.kind, world: f.world, pc: f.context.stacked_pc });
                let class = match f.kind {
                    FaultKind::UsageFault(UsageCause::InvalidState) => self.classify(&f.context).ok(),
                    _ => None,
                };
                self.faults.push(FaultEvent { tick: self.ticks, kind: f.kind, pc: f.context.stacked_pc, class });
                match self.zone.raise_fault(&mut self.machine, f) {
                    Ok(out) => {
                        self.trace.push(TraceEvent::FaultDispatch {
                            vector: out.vector,
                            world: out.world,
                            escalated: out.escalated,
                        });
                        Ok(Tick::Fault)
                    }
                    Err(e) => Err(self.diagnostic(e.into())),
                }
            }
        }
    }

    /// Steps until the device halts or `max_ticks` elapse. Returns ticks used.
    pub fn run(&mut self, max_ticks: u64) -> Result<u64, DeviceError> {
        let start = self.ticks;
        while self.halted.is_none() && self.ticks - start < max_ticks {
            self.step()?;
        }
        Ok(self.ticks - start)
    }

    fn run_native(&mut self, pc: u32) -> Result<(), DeviceError> {
        match pc {
            layout::SECURE_RESET_VECTOR => self.secure_boot(),
            layout::SECURE_HARDFAULT_HANDLER => self.hardfault_handler(),
            layout::SECURE_MEMMANAGE_HANDLER | layout::SECURE_USAGEFAULT_HANDLER => {
                self.reset("secure fault");
                Ok(())
            }
            p if p == layout::SECURE_IRQ_BASE + u32::from(RUNPBA_SLIH_IRQ) => self.slih_handler(),
            other => Err(DeviceError::SecureCodeFault(other)),
        }
    }

    fn boot_scr(&self) -> SystemControlRegisters {
        let mut scr = if self.config.runpba {
            SystemControlRegisters::runpba()
        } else {
            SystemControlRegisters::default()
        };
        let hold = self.image.hold_stub;
        let ns_usage = self.image.symbol(NS_USAGEFAULT_SYMBOL).unwrap_or(hold);
        scr.vector_table.insert((World::NonSecure, Vector::UsageFault), ns_usage);
        scr.vector_table.insert((World::NonSecure, Vector::HardFault), hold);
        scr.register_irq(RUNPBA_SLIH_IRQ, layout::SECURE_IRQ_BASE + u32::from(RUNPBA_SLIH_IRQ));
        scr
    }

    /// Secure boot: installs the fault configuration and enters the
    /// non-secure image in privileged thread mode.
    fn secure_boot(&mut self) -> Result<(), DeviceError> {
        if self.lifecycle == LifecycleState::Decommissioned {
            self.halt(HaltReason::Decommissioned);
            return Ok(());
        }
        let scr = self.boot_scr();
        if self.config.runpba {
            scr.audit()?;
        }
        self.zone.reset(scr);
        let m = &mut self.machine;
        m.world = World::NonSecure;
        m.handler_mode = false;
        m.regs.privileged = true;
        m.regs.sp_ns = self.image.initial_sp;
        m.regs.sp_s = layout::SECURE_STACK_BASE + layout::SECURE_STACK_LEN;
        m.regs.pc = self.image.entry;
        m.control = 0;
        self.trace.push(TraceEvent::Boot { epoch: self.boot_epoch });
        Ok(())
    }

    fn hardfault_handler(&mut self) -> Result<(), DeviceError> {
        let Some(active) = self.zone.active().copied() else {
            return Err(DeviceError::SecureCodeFault(layout::SECURE_HARDFAULT_HANDLER));
        };
        let ExceptionCause::Fault(fault) = active.cause else {
            return Err(DeviceError::SecureCodeFault(layout::SECURE_HARDFAULT_HANDLER));
        };
        let class = match fault.kind {
            FaultKind::UsageFault(UsageCause::InvalidState) => classify_fault(&fault.context, &self.machine.memory).ok(),
            _ => None,
        };
        let Some(class) = class.filter(|c| c.is_pacbti()) else {
            self.trace.push(TraceEvent::Classified { class });
            self.reset("non-PACBTI HardFault");
            return Ok(());
        };
        self.trace.push(TraceEvent::Classified { class: Some(class) });
        // First-level handling: capture, schedule the second level, park the NSPE.
        let overwrote = self.partition.flih_capture(&fault.context, &mut self.machine.memory).is_err();
        self.trace.push(TraceEvent::Flih { pc: fault.context.stacked_pc, overwrote });
        self.zone.pend_interrupt(PendedInterrupt::runpba_slih()).expect("SLIH vector installed at boot");
        lockdown_nspe(&mut self.machine.memory, active.frame_addr, self.image.hold_stub);
        self.trace.push(TraceEvent::Lockdown { hold_stub: self.image.hold_stub });
        let cleared = self.zone.clear_nonessential_interrupts();
        self.trace.push(TraceEvent::InterruptsCleared { count: cleared });
        let lr = self.machine.regs.lr;
        self.zone.exception_return(&mut self.machine, lr)?;
        Ok(())
    }

    fn slih_handler(&mut self) -> Result<(), DeviceError> {
        let result =
            self.partition
                .slih_persist(&self.machine.memory, &mut self.its, &mut self.lifecycle, self.boot_epoch);
        match &result {
            Ok(rec) => self.trace.push(TraceEvent::Persisted { record: *rec }),
            Err(e) => self.trace.push(TraceEvent::PersistFailed { error: e.to_string() }),
        }
        if self.config.policy == PostPersistPolicy::ResetAfterPersist
            && self.lifecycle == LifecycleState::NspeCompromised
        {
            self.recover(RecoveryDecision::Recover)?;
            return Ok(());
        }
        let lr = self.machine.regs.lr;
        self.zone.exception_return(&mut self.machine, lr)?;
        Ok(())
    }

    /// Warm reset: new PAC key, memory reloaded, next boot epoch. Trusted
    /// storage and lifecycle survive.
    pub fn reset(&mut self, reason: &str) {
        self.machine.reset(&mut self.rng);
        self.zone = SecureZone::default();
        let malfunction = self.partition.malfunction;
        self.partition = RunPbaPartition::new(&self.its);
        self.partition.malfunction = malfunction;
        self.boot_epoch += 1;
        self.trace.push(TraceEvent::Reset { reason: reason.to_string(), epoch: self.boot_epoch });
    }

    /// Reboots the non-secure image with the current key and epoch.
    pub fn restart_nspe(&mut self) {
        self.machine.restart();
        self.zone = SecureZone::default();
        self.halted = None;
        self.trace.push(TraceEvent::Restart);
    }

    /// Operator decision for a device in NSPE_COMPROMISED.
    pub fn recover(&mut self, decision: RecoveryDecision) -> Result<LifecycleState, DeviceError> {
        if self.lifecycle != LifecycleState::NspeCompromised {
            let to = match decision {
                RecoveryDecision::Recover => LifecycleState::Secured,
                RecoveryDecision::Decommission => LifecycleState::Decommissioned,
            };
            return Err(RunPbaError::InvalidTransition { from: self.lifecycle, to }.into());
        }
        self.trace.push(TraceEvent::Recover { decision });
        match decision {
            RecoveryDecision::Recover => {
                self.lifecycle.transition(LifecycleState::Secured)?;
                self.reset("recovery");
            }
            RecoveryDecision::Decommission => self.decommission()?,
        }
        Ok(self.lifecycle)
    }

    /// Permanently retires the device: the attestation key is erased.
    pub fn decommission(&mut self) -> Result<(), DeviceError> {
        self.lifecycle.transition(LifecycleState::Decommissioned)?;
        self.attestation_key = None;
        self.halt(HaltReason::Decommissioned);
        Ok(())
    }

    /// PACBTI control as the non-secure world currently has it.
    pub fn live_control(&self) -> PacbtiControl {
        self.machine.pacbti_control()
    }

    pub fn query_status(&self) -> RunPbaStatus {
        self.partition.query_status(&self.its, self.lifecycle, self.live_control())
    }

    pub fn fault_records(&self) -> Result<Vec<FaultRecord>, RunPbaError> {
        list_records(&self.its)
    }

    pub fn evidence(&self) -> Evidence {
        let fault_count = self
            .fault_records()
            .map(|r| r.iter().filter(|r| r.kind.is_pacbti()).count() as u32)
            .unwrap_or(0);
        Evidence {
            lifecycle: self.lifecycle,
            status: self.query_status(),
            instance_id: self.instance_id,
            boot_epoch: self.boot_epoch,
            fault_count,
        }
    }

    /// Builds a token over live state.
    pub fn attest(&mut self, nonce: &Nonce) -> Result<AttestationToken, AttestError> {
        let ev = self.evidence();
        let token = build_token(&ev, nonce, self.attestation_key.as_ref().map(|k| k as &dyn Authenticator))?;
        self.trace.push(TraceEvent::Attestation { lifecycle_claim: token.claims.lifecycle.encode() });
        Ok(token)
    }

    /// Serves one challenge-response exchange on `transport`.
    pub fn serve<T: std::io::Read + std::io::Write>(&mut self, transport: &mut T) -> Result<AttestationToken, AttestError> {
        crate::attestation::serve_challenge(transport, |n| self.attest(n))
    }

    /// Out-of-band attacker access: non-secure, privileged, permission-checked.
    pub fn attacker_read(&mut self, addr: u32) -> Result<u32, AccessViolation> {
        let who = Accessor { world: World::NonSecure, privilege: Privilege::Privileged };
        let r = self.machine.memory.read(addr, AccessKind::Read, who);
        self.trace.push(TraceEvent::AttackerRead { addr, ok: r.is_ok() });
        r
    }

    pub fn attacker_write(&mut self, addr: u32, value: u32) -> Result<(), AccessViolation> {
        let who = Accessor { world: World::NonSecure, privilege: Privilege::Privileged };
        let r = self.machine.memory.write(addr, value, who);
        self.trace.push(TraceEvent::AttackerWrite { addr, value, ok: r.is_ok() });
        r
    }

    /// Classifies the fault a dispatch record refers to; exposed for audits.
    pub fn classify(&self, ctx: &crate::securezone::FaultContext) -> Result<FaultClass, RunPbaError> {
        classify_fault(ctx, &self.machine.memory)
    }
}
