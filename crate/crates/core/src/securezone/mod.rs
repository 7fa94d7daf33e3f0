//! Secure/non-secure split: banked fault configuration, fault escalation,
//! interrupt pending with secure priority, and exception stacking.

pub mod context;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::machine::cpu::{Fault, FaultKind, MachineState};
use crate::machine::layout;
use crate::machine::memory::World;
pub use context::FaultContext;

/// Secure GPIO interrupt used to trigger the RunPBA second-level handler.
pub const RUNPBA_SLIH_IRQ: u8 = 5;
/// Interrupt ids below this are secure, the rest (up to 31) non-secure.
pub const FIRST_NS_IRQ: u8 = 16;
pub const MAX_IRQ: u8 = 31;

/// xPSR bit holding the stacked EPSR.B flag.
pub const XPSR_B: u32 = 1 << 21;
/// Words in a basic exception frame: r0-r3, r12, lr, pc, xPSR.
pub const FRAME_WORDS: u32 = 8;
pub const FRAME_PC: u32 = 6;
pub const FRAME_XPSR: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Vector {
    HardFault,
    MemManage,
    UsageFault,
    Irq(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemControlRegisters {
    /// Non-secure UsageFault handler enabled. RunPBA needs this clear.
    pub shcsr_ns_usgfaultact: bool,
    /// HardFaults taken in the secure state. RunPBA needs this set.
    pub aircr_bfhfnmins: bool,
    pub vector_table: BTreeMap<(World, Vector), u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("SHCSR_NS.USGFAULTACT must be 0")]
    UsageFaultHandlerEnabled,
    #[error("AIRCR.BFHFNMINS must be 1")]
    HardFaultNotSecure,
    #[error("no handler for {0:?} in the {1} world")]
    MissingVector(Vector, World),
}

impl Default for SystemControlRegisters {
    /// Reset values: non-secure UsageFault handler on, HardFaults non-secure.
    fn default() -> Self {
        let mut vector_table = BTreeMap::new();
        vector_table.insert((World::Secure, Vector::HardFault), layout::SECURE_HARDFAULT_HANDLER);
        vector_table.insert((World::Secure, Vector::MemManage), layout::SECURE_MEMMANAGE_HANDLER);
        vector_table.insert((World::Secure, Vector::UsageFault), layout::SECURE_USAGEFAULT_HANDLER);
        SystemControlRegisters { shcsr_ns_usgfaultact: true, aircr_bfhfnmins: false, vector_table }
    }
}

impl SystemControlRegisters {
    /// The configuration secure boot installs when RunPBA is present.
    pub fn runpba() -> Self {
        SystemControlRegisters { shcsr_ns_usgfaultact: false, aircr_bfhfnmins: true, ..Self::default() }
    }

    pub fn audit(&self) -> Result<(), ConfigError> {
        if self.shcsr_ns_usgfaultact {
            return Err(ConfigError::UsageFaultHandlerEnabled);
        }
        if !self.aircr_bfhfnmins {
            return Err(ConfigError::HardFaultNotSecure);
        }
        let v = Vector::HardFault;
        if !self.vector_table.contains_key(&(World::Secure, v)) {
            return Err(ConfigError::MissingVector(v, World::Secure));
        }
        Ok(())
    }

    pub fn handler(&self, world: World, v: Vector) -> Option<u32> {
        self.vector_table.get(&(world, v)).copied()
    }

    pub fn register_irq(&mut self, id: u8, handler: u32) {
        let world = if id < FIRST_NS_IRQ { World::Secure } else { World::NonSecure };
        self.vector_table.insert((world, Vector::Irq(id)), handler);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IrqKind {
    Flih,
    Slih,
    Ordinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PendedInterrupt {
    pub id: u8,
    pub world: World,
    /// Lower is more urgent.
    pub priority: u8,
    pub kind: IrqKind,
}

impl PendedInterrupt {
    pub fn runpba_slih() -> Self {
        PendedInterrupt { id: RUNPBA_SLIH_IRQ, world: World::Secure, priority: 0, kind: IrqKind::Slih }
    }

    fn order_key(&self) -> (bool, u8, u8) {
        (self.world == World::NonSecure, self.priority, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrqError {
    #[error("interrupt {id} is not registered for the {world} world")]
    UnknownIrq { id: u8, world: World },
}

/// Why an exception is active and where its frame lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptionCause {
    Fault(Fault),
    Interrupt(PendedInterrupt),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveException {
    pub vector: Vector,
    pub world: World,
    pub cause: ExceptionCause,
    /// World whose stack holds the frame.
    pub frame_world: World,
    pub frame_addr: u32,
    prev_handler_mode: bool,
    prev_privileged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchOutcome {
    pub vector: Vector,
    pub world: World,
    pub handler: u32,
    /// A non-secure fault was promoted to a HardFault.
    pub escalated: bool,
    pub frame_addr: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("fault while stacking exception frame at {addr:#06x} (lockup)")]
    DoubleFault { addr: u32 },
    #[error("HardFault raised while a HardFault is active (lockup)")]
    NestedHardFault,
    #[error("no handler for {0:?} in the {1} world")]
    NoHandler(Vector, World),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReturnError {
    #[error("exception return {0:#010x} with no active exception")]
    NoActiveException(u32),
    #[error("exception frame at {0:#06x} is unreadable")]
    BadFrame(u32),
}

/// Secure-side system state owned by one device.
#[derive(Debug, Clone, Default)]
pub struct SecureZone {
    pub scr: SystemControlRegisters,
    pending: Vec<PendedInterrupt>,
    active: Vec<ActiveException>,
}

impl SecureZone {
    pub fn new(scr: SystemControlRegisters) -> Self {
        SecureZone { scr, pending: Vec::new(), active: Vec::new() }
    }

    pub fn active(&self) -> Option<&ActiveException> {
        self.active.last()
    }

    pub fn active_depth(&self) -> usize {
        self.active.len()
    }

    pub fn pending(&self) -> &[PendedInterrupt] {
        &self.pending
    }

    pub fn secure_pending(&self) -> bool {
        self.pending.iter().any(|i| i.world == World::Secure)
    }

    /// Drops all pending and active state (device reset).
    pub fn reset(&mut self, scr: SystemControlRegisters) {
        *self = SecureZone::new(scr);
    }

    /// Routes a synchronous fault to its handler, stacking the faulting
    /// context. Non-secure UsageFaults escalate to HardFault when the
    /// non-secure handler is disabled; HardFaults go to the secure world when
    /// BFHFNMINS is set.
    pub fn raise_fault(&mut self, m: &mut MachineState, fault: Fault) -> Result<DispatchOutcome, DispatchError> {
        let (vector, escalated) = match (fault.world, fault.kind) {
            (World::NonSecure, FaultKind::UsageFault(_)) if self.scr.shcsr_ns_usgfaultact => (Vector::UsageFault, false),
            (World::NonSecure, FaultKind::UsageFault(_) | FaultKind::MemFault { .. }) => (Vector::HardFault, true),
            (World::Secure, FaultKind::UsageFault(_)) => (Vector::UsageFault, false),
            (World::Secure, FaultKind::MemFault { .. }) => (Vector::MemManage, false),
            (_, FaultKind::HardFault) => (Vector::HardFault, false),
        };
        let world = match (fault.world, vector) {
            (World::Secure, _) => World::Secure,
            (World::NonSecure, Vector::HardFault) if self.scr.aircr_bfhfnmins => World::Secure,
            (World::NonSecure, _) => World::NonSecure,
        };
        if vector == Vector::HardFault && self.active.iter().any(|a| a.vector == Vector::HardFault) {
            m.halted = true;
            return Err(DispatchError::NestedHardFault);
        }
        let handler = self.scr.handler(world, vector).ok_or(DispatchError::NoHandler(vector, world))?;
        let frame = frame_from_context(&fault.context);
        let frame_addr = self.enter(m, vector, world, ExceptionCause::Fault(fault), handler, frame)?;
        Ok(DispatchOutcome { vector, world, handler, escalated, frame_addr })
    }

    pub fn pend_interrupt(&mut self, irq: PendedInterrupt) -> Result<(), IrqError> {
        let unknown = IrqError::UnknownIrq { id: irq.id, world: irq.world };
        let expected = if irq.id < FIRST_NS_IRQ { World::Secure } else { World::NonSecure };
        if irq.id > MAX_IRQ || irq.world != expected || self.scr.handler(irq.world, Vector::Irq(irq.id)).is_none() {
            return Err(unknown);
        }
        if !self.pending.iter().any(|p| p.id == irq.id) {
            self.pending.push(irq);
        }
        Ok(())
    }

    /// Removes and returns the next interrupt allowed to run given the
    /// current execution state. Secure interrupts always win. Inside a secure
    /// handler only first-level handlers may preempt; second-level work waits
    /// until the handler returns.
    pub fn take_dispatchable(&mut self, m: &MachineState) -> Option<PendedInterrupt> {
        let in_secure_handler = m.handler_mode && m.world == World::Secure;
        let in_ns_handler = m.handler_mode && m.world == World::NonSecure;
        let idx = self
            .pending
            .iter()
            .enumerate()
            .filter(|(_, i)| match (i.world, i.kind) {
                (_, IrqKind::Flih) => true,
                (World::Secure, _) => !in_secure_handler,
                (World::NonSecure, _) => !m.handler_mode && !in_ns_handler,
            })
            .min_by_key(|(_, i)| i.order_key())
            .map(|(idx, _)| idx)?;
        Some(self.pending.remove(idx))
    }

    /// Enters the handler for a pended interrupt taken from `take_dispatchable`.
    pub fn dispatch_interrupt(&mut self, m: &mut MachineState, irq: PendedInterrupt) -> Result<DispatchOutcome, DispatchError> {
        let vector = Vector::Irq(irq.id);
        let handler = self.scr.handler(irq.world, vector).ok_or(DispatchError::NoHandler(vector, irq.world))?;
        let ctx = m.capture_context(0);
        let frame = frame_from_context(&ctx);
        let frame_addr = self.enter(m, vector, irq.world, ExceptionCause::Interrupt(irq), handler, frame)?;
        Ok(DispatchOutcome { vector, world: irq.world, handler, escalated: false, frame_addr })
    }

    /// Drops every pending interrupt except the RunPBA second-level trigger.
    pub fn clear_nonessential_interrupts(&mut self) -> usize {
        let before = self.pending.len();
        self.pending.retain(|i| i.id == RUNPBA_SLIH_IRQ && i.world == World::Secure && i.kind == IrqKind::Slih);
        before - self.pending.len()
    }

    fn enter(
        &mut self,
        m: &mut MachineState,
        vector: Vector,
        world: World,
        cause: ExceptionCause,
        handler: u32,
        frame: [u32; FRAME_WORDS as usize],
    ) -> Result<u32, DispatchError> {
        let frame_world = m.world;
        let frame_addr = m.sp().wrapping_sub(FRAME_WORDS);
        let who = crate::machine::memory::Accessor {
            world: frame_world,
            privilege: crate::machine::memory::Privilege::Privileged,
        };
        for i in 0..FRAME_WORDS {
            if let Err(v) = m.memory.check(frame_addr.wrapping_add(i), crate::machine::memory::AccessKind::Write, who) {
                m.halted = true;
                return Err(DispatchError::DoubleFault { addr: v.addr() });
            }
        }
        for (i, w) in frame.iter().enumerate() {
            m.memory.poke(frame_addr + i as u32, *w);
        }
        m.set_sp(frame_addr);
        self.active.push(ActiveException {
            vector,
            world,
            cause,
            frame_world,
            frame_addr,
            prev_handler_mode: m.handler_mode,
            prev_privileged: m.regs.privileged,
        });
        m.regs.lr = if m.handler_mode { layout::EXC_RETURN_HANDLER_NS } else { layout::EXC_RETURN_THREAD_NS };
        m.world = world;
        m.handler_mode = true;
        m.regs.privileged = true;
        m.regs.epsr_b = false;
        m.regs.pc = handler;
        Ok(frame_addr)
    }

    /// Unstacks the innermost exception frame and resumes the interrupted
    /// context.
    pub fn exception_return(&mut self, m: &mut MachineState, exc_return: u32) -> Result<ActiveException, ReturnError> {
        let a = self.active.pop().ok_or(ReturnError::NoActiveException(exc_return))?;
        let mut frame = [0u32; FRAME_WORDS as usize];
        for (i, slot) in frame.iter_mut().enumerate() {
            *slot = m.memory.peek(a.frame_addr + i as u32).ok_or(ReturnError::BadFrame(a.frame_addr))?;
        }
        m.world = a.frame_world;
        m.handler_mode = a.prev_handler_mode;
        m.regs.privileged = a.prev_privileged;
        m.regs.general[..4].copy_from_slice(&frame[..4]);
        m.regs.general[12] = frame[4];
        m.regs.lr = frame[5];
        m.regs.pc = frame[FRAME_PC as usize];
        m.regs.epsr_b = frame[FRAME_XPSR as usize] & XPSR_B != 0;
        m.set_sp(a.frame_addr + FRAME_WORDS);
        Ok(a)
    }
}

fn frame_from_context(ctx: &FaultContext) -> [u32; FRAME_WORDS as usize] {
    let r = ctx.stacked_r0_r3;
    let xpsr = if ctx.epsr_b { XPSR_B } else { 0 };
    [r[0], r[1], r[2], r[3], ctx.stacked_r12, ctx.stacked_lr, ctx.stacked_pc, xpsr]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::cpu::UsageCause;
    use crate::machine::memory::{Memory, MemoryRegion, Privilege, RegionFlags, RegionKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn machine() -> MachineState {
        let region = |name: &str, kind, base, len, flags, world| MemoryRegion {
            name: String::from(name),
            kind,
            base,
            flags,
            world,
            min_privilege: Privilege::Unprivileged,
            contents: vec![0; len],
        };
        let mem = Memory::new(vec![
            region("ns_code", RegionKind::Code, 0x1000, 0x10, RegionFlags::RX, World::NonSecure),
            region("ns_stack", RegionKind::Stack, 0x6000, 0x40, RegionFlags::RW, World::NonSecure),
        ])
        .unwrap();
        let mut m = MachineState::with_default_tag_width(mem, &mut ChaCha20Rng::seed_from_u64(3));
        m.world = World::NonSecure;
        m.regs.sp_ns = 0x6030;
        m.regs.pc = 0x1004;
        m
    }

    fn usage_fault(m: &MachineState) -> Fault {
        Fault {
            kind: FaultKind::UsageFault(UsageCause::InvalidState),
            world: World::NonSecure,
            context: m.capture_context(context::cfsr::INVSTATE),
        }
    }

    #[test]
    fn runpba_config_escalates_to_secure_hardfault() {
        let mut m = machine();
        let mut z = SecureZone::new(SystemControlRegisters::runpba());
        z.scr.audit().unwrap();
        let f = usage_fault(&m);
        let out = z.raise_fault(&mut m, f).unwrap();
        assert!(out.escalated);
        assert_eq!((out.vector, out.world), (Vector::HardFault, World::Secure));
        assert_eq!(m.regs.pc, layout::SECURE_HARDFAULT_HANDLER);
        assert_eq!(m.world, World::Secure);
        assert_eq!(m.memory.peek(out.frame_addr + FRAME_PC), Some(0x1004));
    }

    #[test]
    fn non_runpba_config_uses_ns_handler() {
        let mut m = machine();
        let mut scr = SystemControlRegisters::default();
        scr.vector_table.insert((World::NonSecure, Vector::UsageFault), 0x1008);
        assert_eq!(scr.audit(), Err(ConfigError::UsageFaultHandlerEnabled));
        let mut z = SecureZone::new(scr);
        let f = usage_fault(&m);
        let out = z.raise_fault(&mut m, f).unwrap();
        assert!(!out.escalated);
        assert_eq!((out.vector, out.world, m.regs.pc), (Vector::UsageFault, World::NonSecure, 0x1008));
    }

    #[test]
    fn secure_memfault_stays_secure() {
        let mut m = machine();
        let mut z = SecureZone::new(SystemControlRegisters::runpba());
        let mut f = usage_fault(&m);
        f.world = World::Secure;
        f.kind = FaultKind::MemFault { addr: 0x100, access: crate::machine::memory::AccessKind::Read };
        let out = z.raise_fault(&mut m, f).unwrap();
        assert_eq!((out.vector, out.world, out.escalated), (Vector::MemManage, World::Secure, false));
    }

    #[test]
    fn stacking_failure_is_double_fault() {
        let mut m = machine();
        m.regs.sp_ns = 0x6004;
        let mut z = SecureZone::new(SystemControlRegisters::runpba());
        let f = usage_fault(&m);
        assert!(matches!(z.raise_fault(&mut m, f), Err(DispatchError::DoubleFault { .. })));
        assert!(m.halted);
    }

    #[test]
    fn exception_return_restores_context() {
        let mut m = machine();
        m.regs.general[0] = 42;
        m.regs.epsr_b = true;
        let before = m.regs;
        let mut z = SecureZone::new(SystemControlRegisters::runpba());
        let f = usage_fault(&m);
        z.raise_fault(&mut m, f).unwrap();
        m.regs.general[0] = 0;
        let lr = m.regs.lr;
        z.exception_return(&mut m, lr).unwrap();
        assert_eq!(m.regs, before);
        assert_eq!((m.world, m.handler_mode), (World::NonSecure, false));
        assert!(z.exception_return(&mut m, lr).is_err());
    }

    fn zone_with_irqs() -> SecureZone {
        let mut scr = SystemControlRegisters::runpba();
        scr.register_irq(RUNPBA_SLIH_IRQ, layout::SECURE_IRQ_BASE + 5);
        scr.register_irq(20, 0x1008);
        SecureZone::new(scr)
    }

    fn ns_irq(id: u8) -> PendedInterrupt {
        PendedInterrupt { id, world: World::NonSecure, priority: 0, kind: IrqKind::Ordinary }
    }

    #[test]
    fn slih_deferred_until_handler_returns() {
        let mut m = machine();
        let mut z = zone_with_irqs();
        let f = usage_fault(&m);
        z.raise_fault(&mut m, f).unwrap();
        z.pend_interrupt(PendedInterrupt::runpba_slih()).unwrap();
        assert_eq!(z.take_dispatchable(&m), None);
        let lr = m.regs.lr;
        z.exception_return(&mut m, lr).unwrap();
        assert_eq!(z.take_dispatchable(&m), Some(PendedInterrupt::runpba_slih()));
    }

    #[test]
    fn secure_before_non_secure() {
        let m = machine();
        let mut z = zone_with_irqs();
        z.pend_interrupt(ns_irq(20)).unwrap();
        let mut slih = PendedInterrupt::runpba_slih();
        slih.priority = 200;
        z.pend_interrupt(slih).unwrap();
        assert_eq!(z.take_dispatchable(&m).unwrap().world, World::Secure);
        assert_eq!(z.take_dispatchable(&m).unwrap().world, World::NonSecure);
        assert_eq!(z.take_dispatchable(&m), None);
    }

    #[test]
    fn unknown_irq_rejected() {
        let mut z = zone_with_irqs();
        assert!(z.pend_interrupt(ns_irq(21)).is_err());
        assert!(z.pend_interrupt(PendedInterrupt { world: World::NonSecure, ..PendedInterrupt::runpba_slih() }).is_err());
    }

    #[test]
    fn clearing_keeps_only_slih() {
        let mut z = zone_with_irqs();
        assert_eq!(z.clear_nonessential_interrupts(), 0);
        z.pend_interrupt(PendedInterrupt::runpba_slih()).unwrap();
        assert_eq!(z.clear_nonessential_interrupts(), 0);
        z.pend_interrupt(ns_irq(20)).unwrap();
        assert_eq!(z.clear_nonessential_interrupts(), 1);
        assert_eq!(z.pending(), &[PendedInterrupt::runpba_slih()]);
    }
}
