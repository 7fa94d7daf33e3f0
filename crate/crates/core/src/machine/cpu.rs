use std::collections::VecDeque;

use rand::RngCore;
use thiserror::Error;

use super::isa::{Cond, DecodeError, Instruction, Operand, Reg, SysReg};
use super::layout;
use super::memory::{AccessKind, AccessViolation, Accessor, Memory, Privilege, World};
use super::pac::{control_bits, pac_compute, PacKeySet, PacbtiControl, DEFAULT_TAG_WIDTH};
use crate::securezone::context::{cfsr, FaultContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegisterFile {
    /// r0..r12. r12 doubles as the PAC tag register.
    pub general: [u32; 13],
    pub sp_ns: u32,
    pub sp_s: u32,
    pub lr: u32,
    pub pc: u32,
    /// Set by a BTI-checked indirect branch until the next instruction issues.
    pub epsr_b: bool,
    pub privileged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

impl Flags {
    fn holds(&self, cond: Cond) -> bool {
        match cond {
            Cond::Eq => self.z,
            Cond::Ne => !self.z,
            Cond::Lt => self.n != self.v,
            Cond::Ge => self.n == self.v,
            Cond::Gt => !self.z && self.n == self.v,
            Cond::Le => self.z || self.n != self.v,
            Cond::Lo => !self.c,
            Cond::Hs => self.c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UsageCause {
    InvalidState,
    UndefinedInstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    UsageFault(UsageCause),
    MemFault { addr: u32, access: AccessKind },
    HardFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub world: World,
    pub context: FaultContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Continue,
    Halted,
    /// A branch consumed an EXC_RETURN value; the exception model must unstack.
    ExceptionReturn(u32),
    Faulted(Fault),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("undecodable instruction at {pc:#06x}: {source}")]
    UndecodableInstruction { pc: u32, source: DecodeError },
    #[error("machine is halted")]
    Halted,
}

/// Architectural state of one simulated core plus its memory image.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub regs: RegisterFile,
    pub flags: Flags,
    pub memory: Memory,
    pub keys: PacKeySet,
    /// Non-secure CONTROL: nPRIV plus the PACBTI enables.
    pub control: u32,
    pub world: World,
    pub handler_mode: bool,
    pub halted: bool,
    /// Words written by `OUT`, kept across resets like a console log.
    pub output: Vec<u32>,
    pub input: VecDeque<u32>,
    input_template: Vec<u32>,
    pristine: Memory,
    /// Instructions retired since construction.
    pub retired: u64,
}

impl MachineState {
    /// Builds a core with `memory` as its power-on image and resets it.
    pub fn new(memory: Memory, rng: &mut impl RngCore, tag_width: u32) -> MachineState {
        let mut m = MachineState {
            regs: RegisterFile::default(),
            flags: Flags::default(),
            pristine: memory.clone(),
            memory,
            keys: PacKeySet::new(0, tag_width),
            control: 0,
            world: World::Secure,
            handler_mode: false,
            halted: false,
            output: Vec::new(),
            input: VecDeque::new(),
            input_template: Vec::new(),
            retired: 0,
        };
        m.reset(rng);
        m
    }

    pub fn with_default_tag_width(memory: Memory, rng: &mut impl RngCore) -> MachineState {
        MachineState::new(memory, rng, DEFAULT_TAG_WIDTH)
    }

    /// Warm reset: registers cleared, pc at the secure reset vector, memory
    /// reloaded from the power-on image and a fresh PAC key drawn from `rng`.
    pub fn reset(&mut self, rng: &mut impl RngCore) {
        self.keys = PacKeySet::random(rng, self.keys.tag_width);
        self.restart();
    }

    /// Like `reset` but keeps the current PAC key.
    pub fn restart(&mut self) {
        self.regs = RegisterFile {
            pc: layout::SECURE_RESET_VECTOR,
            privileged: true,
            ..RegisterFile::default()
        };
        self.flags = Flags::default();
        self.memory = self.pristine.clone();
        self.control = 0;
        self.world = World::Secure;
        self.handler_mode = false;
        self.halted = false;
        self.input = self.input_template.iter().copied().collect();
    }

    /// Sets the input queue consumed by `SVC #0`; it is re-armed on every reset.
    pub fn set_input(&mut self, words: Vec<u32>) {
        self.input = words.iter().copied().collect();
        self.input_template = words;
    }

    pub fn pristine_memory(&self) -> &Memory {
        &self.pristine
    }

    pub fn privilege(&self) -> Privilege {
        if self.regs.privileged {
            Privilege::Privileged
        } else {
            Privilege::Unprivileged
        }
    }

    pub fn accessor(&self) -> Accessor {
        Accessor { world: self.world, privilege: self.privilege() }
    }

    pub fn pacbti_control(&self) -> PacbtiControl {
        PacbtiControl::from_control_bits(self.control)
    }

    pub fn set_pacbti_control(&mut self, ctrl: PacbtiControl) {
        self.control = (self.control & !control_bits::PACBTI_MASK) | ctrl.to_control_bits();
    }

    pub fn sp(&self) -> u32 {
        match self.world {
            World::Secure => self.regs.sp_s,
            World::NonSecure => self.regs.sp_ns,
        }
    }

    pub fn set_sp(&mut self, v: u32) {
        match self.world {
            World::Secure => self.regs.sp_s = v,
            World::NonSecure => self.regs.sp_ns = v,
        }
    }

    pub fn reg(&self, r: Reg) -> u32 {
        match r {
            Reg::SP => self.sp(),
            Reg::LR => self.regs.lr,
            r => self.regs.general[r.index()],
        }
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        match r {
            Reg::SP => self.set_sp(v),
            Reg::LR => self.regs.lr = v,
            r => self.regs.general[r.index()] = v,
        }
    }

    /// Snapshot of the state a fault at the current pc would stack.
    pub fn capture_context(&self, cfsr_bits: u32) -> FaultContext {
        let g = &self.regs.general;
        FaultContext {
            stacked_pc: self.regs.pc,
            stacked_sp: self.sp(),
            stacked_lr: self.regs.lr,
            stacked_r0_r3: [g[0], g[1], g[2], g[3]],
            stacked_r12: g[12],
            epsr_b: self.regs.epsr_b,
            world: self.world,
            privileged: self.regs.privileged,
            cfsr: cfsr_bits,
        }
    }

    fn fault(&self, kind: FaultKind) -> StepResult {
        let bits = match kind {
            FaultKind::UsageFault(UsageCause::InvalidState) => cfsr::INVSTATE,
            FaultKind::UsageFault(UsageCause::UndefinedInstruction) => cfsr::UNDEFINSTR,
            FaultKind::MemFault { access: AccessKind::Fetch, .. } => cfsr::IACCVIOL,
            FaultKind::MemFault { .. } => cfsr::DACCVIOL,
            FaultKind::HardFault => 0,
        };
        StepResult::Faulted(Fault { kind, world: self.world, context: self.capture_context(bits) })
    }

    fn mem_fault(&self, v: AccessViolation, access: AccessKind) -> StepResult {
        self.fault(FaultKind::MemFault { addr: v.addr(), access })
    }

    /// Decodes the instruction at `pc` without permission checks.
    pub fn instruction_at(&self, addr: u32) -> Option<Instruction> {
        Instruction::decode(self.memory.peek(addr)?).ok()
    }

    /// Executes exactly one instruction.
    pub fn step(&mut self) -> Result<StepResult, MachineError> {
        if self.halted {
            return Err(MachineError::Halted);
        }
        let pc = self.regs.pc;
        let word = match self.memory.read(pc, AccessKind::Fetch, self.accessor()) {
            Ok(w) => w,
            Err(v) => return Ok(self.mem_fault(v, AccessKind::Fetch)),
        };
        let insn = Instruction::decode(word).map_err(|source| {
            self.halted = true;
            MachineError::UndecodableInstruction { pc, source }
        })?;
        if self.regs.epsr_b {
            if !insn.is_landing_pad() {
                return Ok(self.fault(FaultKind::UsageFault(UsageCause::InvalidState)));
            }
            self.regs.epsr_b = false;
        }
        let result = self.execute(insn, pc);
        if !matches!(result, StepResult::Faulted(_)) {
            self.retired += 1;
        }
        Ok(result)
    }

    fn operand(&self, op: Operand<i32>) -> u32 {
        match op {
            Operand::Reg(r) => self.reg(r),
            Operand::Imm(v) => v as u32,
        }
    }

    fn branch_indirect(&mut self, target: u32) -> StepResult {
        if layout::is_exc_return(target) {
            return StepResult::ExceptionReturn(target);
        }
        if self.pacbti_control().bti_enabled(self.privilege()) {
            self.regs.epsr_b = true;
        }
        self.regs.pc = target;
        StepResult::Continue
    }

    fn execute(&mut self, insn: Instruction, pc: u32) -> StepResult {
        use Instruction as I;
        let next = pc.wrapping_add(1);
        let who = self.accessor();
        match insn {
            I::Mov { rd, src } => {
                let v = self.operand(src);
                self.set_reg(rd, v);
            }
            I::Ldr { rt, base, offset } => {
                let addr = self.reg(base).wrapping_add(offset as u32);
                match self.memory.read(addr, AccessKind::Read, who) {
                    Ok(v) => self.set_reg(rt, v),
                    Err(v) => return self.mem_fault(v, AccessKind::Read),
                }
            }
            I::Str { rt, base, offset } => {
                let addr = self.reg(base).wrapping_add(offset as u32);
                let v = self.reg(rt);
                if let Err(v) = self.memory.write(addr, v, who) {
                    return self.mem_fault(v, AccessKind::Write);
                }
            }
            I::Add { rd, rn, op2 } => {
                let v = self.reg(rn).wrapping_add(self.operand(op2));
                self.set_reg(rd, v);
            }
            I::Sub { rd, rn, op2 } => {
                let v = self.reg(rn).wrapping_sub(self.operand(op2));
                self.set_reg(rd, v);
            }
            I::Cmp { rn, op2 } => {
                let (a, b) = (self.reg(rn), self.operand(op2));
                let r = a.wrapping_sub(b);
                self.flags = Flags {
                    n: (r as i32) < 0,
                    z: r == 0,
                    c: a >= b,
                    v: ((a ^ b) & (a ^ r)) >> 31 != 0,
                };
            }
            I::B { target } => {
                self.regs.pc = target as u32;
                return StepResult::Continue;
            }
            I::BCond { cond, target } => {
                if self.flags.holds(cond) {
                    self.regs.pc = target as u32;
                    return StepResult::Continue;
                }
            }
            I::Bl { target } => {
                self.regs.lr = next;
                self.regs.pc = target as u32;
                return StepResult::Continue;
            }
            I::Bx { rm } => return self.branch_indirect(self.reg(rm)),
            I::Blx { rm } => {
                let target = self.reg(rm);
                self.regs.lr = next;
                return self.branch_indirect(target);
            }
            I::Push { regs } => {
                let sp = self.sp();
                let base = sp.wrapping_sub(regs.len());
                for i in 0..regs.len() {
                    if let Err(v) = self.memory.check(base.wrapping_add(i), AccessKind::Write, who) {
                        return self.mem_fault(v, AccessKind::Write);
                    }
                }
                for (i, r) in regs.iter().enumerate() {
                    let v = self.reg(r);
                    self.memory.write(base.wrapping_add(i as u32), v, who).expect("checked");
                }
                self.set_sp(base);
            }
            I::Pop { regs } => {
                let sp = self.sp();
                let mut vals = Vec::with_capacity(regs.len() as usize);
                for i in 0..regs.len() {
                    match self.memory.read(sp.wrapping_add(i), AccessKind::Read, who) {
                        Ok(v) => vals.push(v),
                        Err(v) => return self.mem_fault(v, AccessKind::Read),
                    }
                }
                for (r, v) in regs.iter().zip(vals) {
                    self.set_reg(r, v);
                }
                self.set_sp(sp.wrapping_add(regs.len()));
            }
            I::Pacg | I::Pacbti => {
                if self.pacbti_control().pac_enabled(self.privilege()) {
                    self.regs.general[12] = pac_compute(self.regs.lr, self.sp(), &self.keys);
                }
            }
            I::Aut => {
                if self.pacbti_control().pac_enabled(self.privilege())
                    && pac_compute(self.regs.lr, self.sp(), &self.keys) != self.regs.general[12]
                {
                    return self.fault(FaultKind::UsageFault(UsageCause::InvalidState));
                }
            }
            I::Bti | I::Nop => {}
            I::Ret => {
                let target = self.regs.lr;
                if layout::is_exc_return(target) {
                    return StepResult::ExceptionReturn(target);
                }
                self.regs.pc = target;
                return StepResult::Continue;
            }
            I::Msr { sysreg: SysReg::Control, rn } => {
                if !self.regs.privileged {
                    return self.fault(FaultKind::UsageFault(UsageCause::UndefinedInstruction));
                }
                self.control = self.reg(rn) & (control_bits::NPRIV | control_bits::PACBTI_MASK);
                if !self.handler_mode && self.control & control_bits::NPRIV != 0 {
                    self.regs.privileged = false;
                }
            }
            I::Mrs { rd, sysreg: SysReg::Control } => {
                let v = self.control;
                self.set_reg(rd, v);
            }
            I::Svc { imm: 0 } => {
                let (value, valid) = match self.input.pop_front() {
                    Some(v) => (v, 1),
                    None => (0, 0),
                };
                self.regs.general[0] = value;
                self.regs.general[1] = valid;
            }
            I::Svc { .. } => {
                return self.fault(FaultKind::UsageFault(UsageCause::UndefinedInstruction));
            }
            I::Out { rs } => self.output.push(self.reg(rs)),
            I::Halt => {
                self.halted = true;
                return StepResult::Halted;
            }
        }
        self.regs.pc = next;
        StepResult::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::isa::RegList;
    use crate::machine::memory::{MemoryRegion, RegionFlags, RegionKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const CODE: u32 = 0x1000;
    const DATA: u32 = 0x4000;
    const STACK_TOP: u32 = 0x6100;

    fn machine(code: &[Instruction]) -> MachineState {
        let words = code.iter().map(|i| i.encode().unwrap()).collect::<Vec<_>>();
        let mut contents = words;
        contents.resize(0x40, Instruction::Halt.encode().unwrap());
        let mem = Memory::new(vec![
            MemoryRegion {
                name: "code".into(),
                kind: RegionKind::Code,
                base: CODE,
                flags: RegionFlags::RX,
                world: World::NonSecure,
                min_privilege: Privilege::Unprivileged,
                contents,
            },
            MemoryRegion {
                name: "data".into(),
                kind: RegionKind::Data,
                base: DATA,
                flags: RegionFlags::RW,
                world: World::NonSecure,
                min_privilege: Privilege::Unprivileged,
                contents: vec![0; 0x10],
            },
            MemoryRegion {
                name: "stack".into(),
                kind: RegionKind::Stack,
                base: 0x6000,
                flags: RegionFlags::RW,
                world: World::NonSecure,
                min_privilege: Privilege::Unprivileged,
                contents: vec![0; 0x100],
            },
        ])
        .unwrap();
        let mut m = MachineState::with_default_tag_width(mem, &mut ChaCha20Rng::seed_from_u64(1));
        m.world = World::NonSecure;
        m.regs.pc = CODE;
        m.regs.sp_ns = STACK_TOP - 4;
        m.set_pacbti_control(PacbtiControl::ALL);
        m
    }

    fn run(m: &mut MachineState, limit: usize) -> StepResult {
        for _ in 0..limit {
            match m.step().unwrap() {
                StepResult::Continue => {}
                other => return other,
            }
        }
        panic!("step limit");
    }

    fn imm(v: u32) -> Operand<i32> {
        Operand::Imm(v as i32)
    }

    // main: BL f; HALT   f: PACBTI; PUSH {lr}; NOP; POP {lr}; AUT; RET
    fn call_program() -> Vec<Instruction> {
        let lr = RegList::from_regs(&[Reg::LR]).unwrap();
        vec![
            Instruction::Bl { target: (CODE + 2) as i32 },
            Instruction::Halt,
            Instruction::Pacbti,
            Instruction::Push { regs: lr },
            Instruction::Nop,
            Instruction::Pop { regs: lr },
            Instruction::Aut,
            Instruction::Ret,
        ]
    }

    #[test]
    fn untampered_call_returns() {
        let mut m = machine(&call_program());
        assert_eq!(run(&mut m, 20), StepResult::Halted);
        assert_eq!(m.regs.pc, CODE + 1);
    }

    #[test]
    fn overwritten_return_address_faults_at_aut() {
        let mut m = machine(&call_program());
        for _ in 0..4 {
            m.step().unwrap();
        }
        // lr now saved at sp; the attacker replaces it.
        let slot = m.sp();
        m.memory.poke(slot, CODE + 4).unwrap();
        let res = run(&mut m, 10);
        let StepResult::Faulted(f) = res else { panic!("{res:?}") };
        assert_eq!(f.kind, FaultKind::UsageFault(UsageCause::InvalidState));
        assert_eq!(f.context.stacked_pc, CODE + 6);
        assert!(f.context.cfsr_invalid_state());
        // synchronous: the stacked state reproduces the mismatch
        assert_ne!(
            pac_compute(f.context.stacked_lr, f.context.stacked_sp, &m.keys),
            f.context.stacked_r12
        );
        assert_eq!(m.regs.pc, CODE + 6);
    }

    #[test]
    fn indirect_branch_to_non_landing_pad_faults() {
        let prog = vec![
            Instruction::Mov { rd: Reg::R3, src: imm(CODE + 3) },
            Instruction::Blx { rm: Reg::R3 },
            Instruction::Halt,
            Instruction::Mov { rd: Reg::R0, src: imm(1) },
            Instruction::Halt,
        ];
        let mut m = machine(&prog);
        let StepResult::Faulted(f) = run(&mut m, 5) else { panic!() };
        assert_eq!(f.kind, FaultKind::UsageFault(UsageCause::InvalidState));
        assert!(f.context.epsr_b);
        assert_eq!(f.context.stacked_pc, CODE + 3);
        assert_eq!(m.regs.general[0], 0, "target must not execute");
    }

    #[test]
    fn indirect_branch_to_landing_pad_is_fine() {
        let prog = vec![
            Instruction::Mov { rd: Reg::R3, src: imm(CODE + 3) },
            Instruction::Bx { rm: Reg::R3 },
            Instruction::Halt,
            Instruction::Bti,
            Instruction::Mov { rd: Reg::R0, src: imm(1) },
            Instruction::Halt,
        ];
        let mut m = machine(&prog);
        assert_eq!(run(&mut m, 10), StepResult::Halted);
        assert_eq!(m.regs.general[0], 1);
        assert!(!m.regs.epsr_b);
    }

    #[test]
    fn store_to_code_is_mem_fault() {
        let prog = vec![
            Instruction::Mov { rd: Reg::R1, src: imm(CODE) },
            Instruction::Str { rt: Reg::R0, base: Reg::R1, offset: 0 },
        ];
        let mut m = machine(&prog);
        let StepResult::Faulted(f) = run(&mut m, 3) else { panic!() };
        assert_eq!(f.kind, FaultKind::MemFault { addr: CODE, access: AccessKind::Write });
    }

    #[test]
    fn executing_data_is_mem_fault() {
        let prog = vec![
            Instruction::Mov { rd: Reg::R1, src: imm(DATA) },
            Instruction::Bx { rm: Reg::R1 },
        ];
        let mut m = machine(&prog);
        let StepResult::Faulted(f) = run(&mut m, 3) else { panic!() };
        assert_eq!(f.kind, FaultKind::MemFault { addr: DATA, access: AccessKind::Fetch });
    }

    #[test]
    fn disabled_features_make_pacbti_instructions_nops() {
        let mut m = machine(&call_program());
        m.set_pacbti_control(PacbtiControl::NONE);
        for _ in 0..4 {
            m.step().unwrap();
        }
        let slot = m.sp();
        m.memory.poke(slot, CODE + 1).unwrap();
        assert_eq!(run(&mut m, 10), StepResult::Halted);
        assert_eq!(m.regs.general[12], 0);
    }

    #[test]
    fn unprivileged_msr_is_undefined() {
        let prog = vec![
            Instruction::Mov { rd: Reg::R0, src: imm(control_bits::NPRIV | control_bits::PACBTI_MASK) },
            Instruction::Msr { sysreg: SysReg::Control, rn: Reg::R0 },
            Instruction::Mov { rd: Reg::R0, src: imm(0) },
            Instruction::Msr { sysreg: SysReg::Control, rn: Reg::R0 },
        ];
        let mut m = machine(&prog);
        let StepResult::Faulted(f) = run(&mut m, 5) else { panic!() };
        assert_eq!(f.kind, FaultKind::UsageFault(UsageCause::UndefinedInstruction));
        assert!(!f.context.privileged);
        assert_eq!(m.pacbti_control(), PacbtiControl::ALL);
    }

    #[test]
    fn undecodable_word_is_an_error() {
        let mut m = machine(&[]);
        m.memory.region_named_mut("code").unwrap().contents[0] = 0xFFFF_FFFF;
        assert!(matches!(m.step(), Err(MachineError::UndecodableInstruction { pc: CODE, .. })));
        assert_eq!(m.step(), Err(MachineError::Halted));
    }

    #[test]
    fn reset_rotates_key_and_restores_memory() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut m = machine(&call_program());
        m.memory.poke(DATA, 5).unwrap();
        m.reset(&mut rng);
        let k1 = m.keys.key;
        m.reset(&mut rng);
        assert_ne!(k1, m.keys.key);
        assert_eq!(m.memory.peek(DATA), Some(0));
        assert_eq!(m.world, World::Secure);
        assert!(m.regs.privileged);
        assert_eq!(m.regs.pc, layout::SECURE_RESET_VECTOR);
    }

    #[test]
    fn compare_and_branch() {
        let prog = vec![
            Instruction::Mov { rd: Reg::R0, src: imm(3) },
            Instruction::Sub { rd: Reg::R0, rn: Reg::R0, op2: imm(1) },
            Instruction::Out { rs: Reg::R0 },
            Instruction::Cmp { rn: Reg::R0, op2: imm(0) },
            Instruction::BCond { cond: Cond::Gt, target: (CODE + 1) as i32 },
            Instruction::Halt,
        ];
        let mut m = machine(&prog);
        assert_eq!(run(&mut m, 50), StepResult::Halted);
        assert_eq!(m.output, vec![2, 1, 0]);
    }
}
