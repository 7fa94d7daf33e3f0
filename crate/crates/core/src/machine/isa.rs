//! Toy instruction set with PAC/BTI extensions.
//!
//! Every instruction is encoded in a single 32-bit word and occupies one
//! address unit. Word layout:
//!
//! ```text
//!  31    27 26  25  22 21  18 17                0
//! +--------+---+------+------+-------------------+
//! | opcode | I |  A   |  B   |        C          |
//! +--------+---+------+------+-------------------+
//! ```
//!
//! `I` marks `C` as an 18-bit signed immediate rather than a register.

use std::fmt;

use thiserror::Error;

/// Register index. `r0`..`r12` are general purpose, 13 is `sp`, 14 is `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R1: Reg = Reg(1);
    pub const R2: Reg = Reg(2);
    pub const R3: Reg = Reg(3);
    pub const R4: Reg = Reg(4);
    pub const R5: Reg = Reg(5);
    /// Holds the PAC tag produced by `PACG`/`PACBTI` and checked by `AUT`.
    pub const R12: Reg = Reg(12);
    pub const SP: Reg = Reg(13);
    pub const LR: Reg = Reg(14);

    pub fn new(index: u8) -> Option<Reg> {
        (index <= 14).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn parse(name: &str) -> Option<Reg> {
        let lower = name.to_ascii_lowercase();
        match lower.as_str() {
            "sp" => Some(Reg::SP),
            "lr" => Some(Reg::LR),
            "ip" => Some(Reg::R12),
            _ => {
                let n: u8 = lower.strip_prefix('r')?.parse().ok()?;
                (n <= 12).then_some(Reg(n))
            }
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => write!(f, "sp"),
            14 => write!(f, "lr"),
            n => write!(f, "r{n}"),
        }
    }
}

/// Register set used by `PUSH`/`POP`. Bit `i` selects register `i`; `sp` is
/// never a member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegList(u16);

impl RegList {
    pub fn new(mask: u16) -> Option<RegList> {
        let sp_bit = 1 << Reg::SP.0;
        (mask != 0 && mask & sp_bit == 0 && mask >> 15 == 0).then_some(RegList(mask))
    }

    pub fn from_regs(regs: &[Reg]) -> Option<RegList> {
        RegList::new(regs.iter().fold(0u16, |m, r| m | (1 << r.0)))
    }

    pub fn mask(self) -> u16 {
        self.0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, reg: Reg) -> bool {
        self.0 & (1 << reg.0) != 0
    }

    /// Members in ascending register order.
    pub fn iter(self) -> impl Iterator<Item = Reg> {
        (0u8..15).filter(move |i| self.0 & (1 << i) != 0).map(Reg)
    }
}

impl fmt::Display for RegList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, r) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
    Gt,
    Le,
    /// Unsigned lower.
    Lo,
    /// Unsigned higher or same.
    Hs,
}

impl Cond {
    const ALL: [Cond; 8] = [
        Cond::Eq,
        Cond::Ne,
        Cond::Lt,
        Cond::Ge,
        Cond::Gt,
        Cond::Le,
        Cond::Lo,
        Cond::Hs,
    ];

    fn code(self) -> u32 {
        Cond::ALL.iter().position(|c| *c == self).unwrap() as u32
    }

    fn from_code(code: u32) -> Option<Cond> {
        Cond::ALL.get(code as usize).copied()
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Cond::Eq => "EQ",
            Cond::Ne => "NE",
            Cond::Lt => "LT",
            Cond::Ge => "GE",
            Cond::Gt => "GT",
            Cond::Le => "LE",
            Cond::Lo => "LO",
            Cond::Hs => "HS",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Cond> {
        Cond::ALL
            .iter()
            .copied()
            .find(|c| c.suffix().eq_ignore_ascii_case(s))
    }
}

/// Special registers reachable through `MSR`/`MRS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SysReg {
    /// nPRIV plus the four PACBTI enable bits.
    Control,
}

impl SysReg {
    fn code(self) -> u32 {
        match self {
            SysReg::Control => 0x14,
        }
    }

    fn from_code(code: u32) -> Option<SysReg> {
        (code == 0x14).then_some(SysReg::Control)
    }

    pub fn parse(name: &str) -> Option<SysReg> {
        name.eq_ignore_ascii_case("control").then_some(SysReg::Control)
    }
}

impl fmt::Display for SysReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CONTROL")
    }
}

/// Second operand of data-processing instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand<V> {
    Reg(Reg),
    Imm(V),
}

impl<V> Operand<V> {
    fn map<W, E>(self, f: &mut impl FnMut(V) -> Result<W, E>) -> Result<Operand<W>, E> {
        Ok(match self {
            Operand::Reg(r) => Operand::Reg(r),
            Operand::Imm(v) => Operand::Imm(f(v)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Mov,
    Ldr,
    Str,
    Add,
    Sub,
    Cmp,
    B,
    BCond,
    Bl,
    Bx,
    Blx,
    Push,
    Pop,
    Pacg,
    Aut,
    Pacbti,
    Bti,
    Ret,
    Msr,
    Mrs,
    Svc,
    Out,
    Halt,
    Nop,
}

impl Opcode {
    const ALL: [Opcode; 24] = [
        Opcode::Mov,
        Opcode::Ldr,
        Opcode::Str,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Cmp,
        Opcode::B,
        Opcode::BCond,
        Opcode::Bl,
        Opcode::Bx,
        Opcode::Blx,
        Opcode::Push,
        Opcode::Pop,
        Opcode::Pacg,
        Opcode::Aut,
        Opcode::Pacbti,
        Opcode::Bti,
        Opcode::Ret,
        Opcode::Msr,
        Opcode::Mrs,
        Opcode::Svc,
        Opcode::Out,
        Opcode::Halt,
        Opcode::Nop,
    ];

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(code: u32) -> Option<Opcode> {
        Opcode::ALL.get(code as usize).copied()
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Mov => "MOV",
            Opcode::Ldr => "LDR",
            Opcode::Str => "STR",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Cmp => "CMP",
            Opcode::B => "B",
            Opcode::BCond => "BCOND",
            Opcode::Bl => "BL",
            Opcode::Bx => "BX",
            Opcode::Blx => "BLX",
            Opcode::Push => "PUSH",
            Opcode::Pop => "POP",
            Opcode::Pacg => "PACG",
            Opcode::Aut => "AUT",
            Opcode::Pacbti => "PACBTI",
            Opcode::Bti => "BTI",
            Opcode::Ret => "RET",
            Opcode::Msr => "MSR",
            Opcode::Mrs => "MRS",
            Opcode::Svc => "SVC",
            Opcode::Out => "OUT",
            Opcode::Halt => "HALT",
            Opcode::Nop => "NOP",
        }
    }
}

/// One toy-ISA instruction. `V` is the immediate/target type: `i32` for
/// executable code, a symbolic expression inside the assembler.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instruction<V = i32> {
    Mov { rd: Reg, src: Operand<V> },
    Ldr { rt: Reg, base: Reg, offset: V },
    Str { rt: Reg, base: Reg, offset: V },
    Add { rd: Reg, rn: Reg, op2: Operand<V> },
    Sub { rd: Reg, rn: Reg, op2: Operand<V> },
    Cmp { rn: Reg, op2: Operand<V> },
    B { target: V },
    BCond { cond: Cond, target: V },
    Bl { target: V },
    Bx { rm: Reg },
    Blx { rm: Reg },
    Push { regs: RegList },
    Pop { regs: RegList },
    /// r12 <- PAC(lr, sp)
    Pacg,
    /// Checks r12 against PAC(lr, sp).
    Aut,
    /// Landing pad plus `PACG`.
    Pacbti,
    /// Landing pad.
    Bti,
    Ret,
    Msr { sysreg: SysReg, rn: Reg },
    Mrs { rd: Reg, sysreg: SysReg },
    Svc { imm: V },
    Out { rs: Reg },
    Halt,
    Nop,
}

impl<V> Instruction<V> {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::Mov { .. } => Opcode::Mov,
            Instruction::Ldr { .. } => Opcode::Ldr,
            Instruction::Str { .. } => Opcode::Str,
            Instruction::Add { .. } => Opcode::Add,
            Instruction::Sub { .. } => Opcode::Sub,
            Instruction::Cmp { .. } => Opcode::Cmp,
            Instruction::B { .. } => Opcode::B,
            Instruction::BCond { .. } => Opcode::BCond,
            Instruction::Bl { .. } => Opcode::Bl,
            Instruction::Bx { .. } => Opcode::Bx,
            Instruction::Blx { .. } => Opcode::Blx,
            Instruction::Push { .. } => Opcode::Push,
            Instruction::Pop { .. } => Opcode::Pop,
            Instruction::Pacg => Opcode::Pacg,
            Instruction::Aut => Opcode::Aut,
            Instruction::Pacbti => Opcode::Pacbti,
            Instruction::Bti => Opcode::Bti,
            Instruction::Ret => Opcode::Ret,
            Instruction::Msr { .. } => Opcode::Msr,
            Instruction::Mrs { .. } => Opcode::Mrs,
            Instruction::Svc { .. } => Opcode::Svc,
            Instruction::Out { .. } => Opcode::Out,
            Instruction::Halt => Opcode::Halt,
            Instruction::Nop => Opcode::Nop,
        }
    }

    /// True for the two instructions a BTI-checked indirect branch may land on.
    pub fn is_landing_pad(&self) -> bool {
        matches!(self, Instruction::Pacbti | Instruction::Bti)
    }

    /// True for direct and indirect calls.
    pub fn is_call(&self) -> bool {
        matches!(self, Instruction::Bl { .. } | Instruction::Blx { .. })
    }

    /// Rewrites every immediate and branch target through `f`.
    pub fn try_map<W, E>(
        self,
        mut f: impl FnMut(V) -> Result<W, E>,
    ) -> Result<Instruction<W>, E> {
        use Instruction as I;
        Ok(match self {
            I::Mov { rd, src } => I::Mov { rd, src: src.map(&mut f)? },
            I::Ldr { rt, base, offset } => I::Ldr { rt, base, offset: f(offset)? },
            I::Str { rt, base, offset } => I::Str { rt, base, offset: f(offset)? },
            I::Add { rd, rn, op2 } => I::Add { rd, rn, op2: op2.map(&mut f)? },
            I::Sub { rd, rn, op2 } => I::Sub { rd, rn, op2: op2.map(&mut f)? },
            I::Cmp { rn, op2 } => I::Cmp { rn, op2: op2.map(&mut f)? },
            I::B { target } => I::B { target: f(target)? },
            I::BCond { cond, target } => I::BCond { cond, target: f(target)? },
            I::Bl { target } => I::Bl { target: f(target)? },
            I::Bx { rm } => I::Bx { rm },
            I::Blx { rm } => I::Blx { rm },
            I::Push { regs } => I::Push { regs },
            I::Pop { regs } => I::Pop { regs },
            I::Pacg => I::Pacg,
            I::Aut => I::Aut,
            I::Pacbti => I::Pacbti,
            I::Bti => I::Bti,
            I::Ret => I::Ret,
            I::Msr { sysreg, rn } => I::Msr { sysreg, rn },
            I::Mrs { rd, sysreg } => I::Mrs { rd, sysreg },
            I::Svc { imm } => I::Svc { imm: f(imm)? },
            I::Out { rs } => I::Out { rs },
            I::Halt => I::Halt,
            I::Nop => I::Nop,
        })
    }
}

impl<V: fmt::Display> fmt::Display for Instruction<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction as I;
        fn op2<V: fmt::Display>(o: &Operand<V>) -> String {
            match o {
                Operand::Reg(r) => r.to_string(),
                Operand::Imm(v) => format!("#{v}"),
            }
        }
        match self {
            I::Mov { rd, src } => write!(f, "MOV {rd}, {}", op2(src)),
            I::Ldr { rt, base, offset } => write!(f, "LDR {rt}, [{base}, #{offset}]"),
            I::Str { rt, base, offset } => write!(f, "STR {rt}, [{base}, #{offset}]"),
            I::Add { rd, rn, op2: o } => write!(f, "ADD {rd}, {rn}, {}", op2(o)),
            I::Sub { rd, rn, op2: o } => write!(f, "SUB {rd}, {rn}, {}", op2(o)),
            I::Cmp { rn, op2: o } => write!(f, "CMP {rn}, {}", op2(o)),
            I::B { target } => write!(f, "B {target}"),
            I::BCond { cond, target } => write!(f, "B{} {target}", cond.suffix()),
            I::Bl { target } => write!(f, "BL {target}"),
            I::Bx { rm } => write!(f, "BX {rm}"),
            I::Blx { rm } => write!(f, "BLX {rm}"),
            I::Push { regs } => write!(f, "PUSH {regs}"),
            I::Pop { regs } => write!(f, "POP {regs}"),
            I::Msr { sysreg, rn } => write!(f, "MSR {sysreg}, {rn}"),
            I::Mrs { rd, sysreg } => write!(f, "MRS {rd}, {sysreg}"),
            I::Svc { imm } => write!(f, "SVC #{imm}"),
            I::Out { rs } => write!(f, "OUT {rs}"),
            other => f.write_str(other.opcode().mnemonic()),
        }
    }
}

pub const IMM_BITS: u32 = 18;
pub const IMM_MIN: i32 = -(1 << (IMM_BITS - 1));
pub const IMM_MAX: i32 = (1 << (IMM_BITS - 1)) - 1;

const IMM_FLAG: u32 = 1 << 26;
const C_MASK: u32 = (1 << IMM_BITS) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("immediate {0} does not fit in {IMM_BITS} signed bits")]
    ImmediateOutOfRange(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("undecodable instruction word {0:#010x}")]
pub struct DecodeError(pub u32);

fn imm_field(v: i32) -> Result<u32, EncodeError> {
    if !(IMM_MIN..=IMM_MAX).contains(&v) {
        return Err(EncodeError::ImmediateOutOfRange(v));
    }
    Ok(v as u32 & C_MASK)
}

fn sign_extend(c: u32) -> i32 {
    ((c << (32 - IMM_BITS)) as i32) >> (32 - IMM_BITS)
}

fn word(op: Opcode, imm: bool, a: u32, b: u32, c: u32) -> u32 {
    (op.code() << 27) | if imm { IMM_FLAG } else { 0 } | (a << 22) | (b << 18) | c
}

impl Instruction<i32> {
    pub fn encode(&self) -> Result<u32, EncodeError> {
        use Instruction as I;
        let op = self.opcode();
        let r = |r: &Reg| r.0 as u32;
        Ok(match self {
            I::Mov { rd, src } => match src {
                Operand::Reg(rm) => word(op, false, r(rd), 0, r(rm)),
                Operand::Imm(v) => word(op, true, r(rd), 0, imm_field(*v)?),
            },
            I::Ldr { rt, base, offset } | I::Str { rt, base, offset } => {
                word(op, true, r(rt), r(base), imm_field(*offset)?)
            }
            I::Add { rd, rn, op2 } | I::Sub { rd, rn, op2 } => match op2 {
                Operand::Reg(rm) => word(op, false, r(rd), r(rn), r(rm)),
                Operand::Imm(v) => word(op, true, r(rd), r(rn), imm_field(*v)?),
            },
            I::Cmp { rn, op2 } => match op2 {
                Operand::Reg(rm) => word(op, false, r(rn), 0, r(rm)),
                Operand::Imm(v) => word(op, true, r(rn), 0, imm_field(*v)?),
            },
            I::B { target } | I::Bl { target } => word(op, true, 0, 0, imm_field(*target)?),
            I::BCond { cond, target } => word(op, true, cond.code(), 0, imm_field(*target)?),
            I::Bx { rm } | I::Blx { rm } => word(op, false, r(rm), 0, 0),
            I::Push { regs } | I::Pop { regs } => word(op, false, 0, 0, regs.0 as u32),
            I::Msr { sysreg, rn } => word(op, false, 0, r(rn), sysreg.code()),
            I::Mrs { rd, sysreg } => word(op, false, r(rd), 0, sysreg.code()),
            I::Svc { imm } => word(op, true, 0, 0, imm_field(*imm)?),
            I::Out { rs } => word(op, false, r(rs), 0, 0),
            I::Pacg | I::Aut | I::Pacbti | I::Bti | I::Ret | I::Halt | I::Nop => {
                word(op, false, 0, 0, 0)
            }
        })
    }

    /// Decodes a word. Only canonical encodings are accepted, so
    /// `decode(w).encode() == w` for every word that decodes.
    pub fn decode(w: u32) -> Result<Instruction, DecodeError> {
        use Instruction as I;
        let err = DecodeError(w);
        let op = Opcode::from_code(w >> 27).ok_or(err)?;
        let imm = w & IMM_FLAG != 0;
        let a = (w >> 22) & 0xF;
        let b = (w >> 18) & 0xF;
        let c = w & C_MASK;
        let reg = |x: u32| Reg::new(x as u8).ok_or(err);
        let op2 = |c: u32| -> Result<Operand<i32>, DecodeError> {
            if imm {
                Ok(Operand::Imm(sign_extend(c)))
            } else if c <= 0xF {
                Ok(Operand::Reg(reg(c)?))
            } else {
                Err(err)
            }
        };
        let insn = match op {
            Opcode::Mov => I::Mov { rd: reg(a)?, src: op2(c)? },
            Opcode::Ldr => I::Ldr { rt: reg(a)?, base: reg(b)?, offset: sign_extend(c) },
            Opcode::Str => I::Str { rt: reg(a)?, base: reg(b)?, offset: sign_extend(c) },
            Opcode::Add => I::Add { rd: reg(a)?, rn: reg(b)?, op2: op2(c)? },
            Opcode::Sub => I::Sub { rd: reg(a)?, rn: reg(b)?, op2: op2(c)? },
            Opcode::Cmp => I::Cmp { rn: reg(a)?, op2: op2(c)? },
            Opcode::B => I::B { target: sign_extend(c) },
            Opcode::BCond => I::BCond {
                cond: Cond::from_code(a).ok_or(err)?,
                target: sign_extend(c),
            },
            Opcode::Bl => I::Bl { target: sign_extend(c) },
            Opcode::Bx => I::Bx { rm: reg(a)? },
            Opcode::Blx => I::Blx { rm: reg(a)? },
            Opcode::Push => I::Push { regs: RegList::new(c as u16).filter(|_| c <= 0xFFFF).ok_or(err)? },
            Opcode::Pop => I::Pop { regs: RegList::new(c as u16).filter(|_| c <= 0xFFFF).ok_or(err)? },
            Opcode::Pacg => I::Pacg,
            Opcode::Aut => I::Aut,
            Opcode::Pacbti => I::Pacbti,
            Opcode::Bti => I::Bti,
            Opcode::Ret => I::Ret,
            Opcode::Msr => I::Msr { sysreg: SysReg::from_code(c).ok_or(err)?, rn: reg(b)? },
            Opcode::Mrs => I::Mrs { rd: reg(a)?, sysreg: SysReg::from_code(c).ok_or(err)? },
            Opcode::Svc => I::Svc { imm: sign_extend(c) },
            Opcode::Out => I::Out { rs: reg(a)? },
            Opcode::Halt => I::Halt,
            Opcode::Nop => I::Nop,
        };
        // Reject stray bits in fields the opcode does not use.
        match insn.encode() {
            Ok(canonical) if canonical == w => Ok(insn),
            _ => Err(err),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn any_reg() -> impl Strategy<Value = Reg> {
        (0u8..=14).prop_map(Reg)
    }

    fn any_imm() -> impl Strategy<Value = i32> {
        IMM_MIN..=IMM_MAX
    }

    fn any_op2() -> impl Strategy<Value = Operand<i32>> {
        prop_oneof![any_reg().prop_map(Operand::Reg), any_imm().prop_map(Operand::Imm)]
    }

    fn any_instruction() -> impl Strategy<Value = Instruction> {
        use Instruction as I;
        let list = (1u16..0x8000)
            .prop_filter("no sp", |m| m & (1 << 13) == 0)
            .prop_map(|m| RegList::new(m).unwrap());
        prop_oneof![
            (any_reg(), any_op2()).prop_map(|(rd, src)| I::Mov { rd, src }),
            (any_reg(), any_reg(), any_imm()).prop_map(|(rt, base, offset)| I::Ldr { rt, base, offset }),
            (any_reg(), any_reg(), any_imm()).prop_map(|(rt, base, offset)| I::Str { rt, base, offset }),
            (any_reg(), any_reg(), any_op2()).prop_map(|(rd, rn, op2)| I::Add { rd, rn, op2 }),
            (any_reg(), any_reg(), any_op2()).prop_map(|(rd, rn, op2)| I::Sub { rd, rn, op2 }),
            (any_reg(), any_op2()).prop_map(|(rn, op2)| I::Cmp { rn, op2 }),
            any_imm().prop_map(|target| I::B { target }),
            (0u32..8, any_imm()).prop_map(|(c, target)| I::BCond { cond: Cond::from_code(c).unwrap(), target }),
            any_imm().prop_map(|target| I::Bl { target }),
            any_reg().prop_map(|rm| I::Bx { rm }),
            any_reg().prop_map(|rm| I::Blx { rm }),
            list.clone().prop_map(|regs| I::Push { regs }),
            list.prop_map(|regs| I::Pop { regs }),
            Just(I::Pacg),
            Just(I::Aut),
            Just(I::Pacbti),
            Just(I::Bti),
            Just(I::Ret),
            any_reg().prop_map(|rn| I::Msr { sysreg: SysReg::Control, rn }),
            any_reg().prop_map(|rd| I::Mrs { rd, sysreg: SysReg::Control }),
            any_imm().prop_map(|imm| I::Svc { imm }),
            any_reg().prop_map(|rs| I::Out { rs }),
            Just(I::Halt),
            Just(I::Nop),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(insn in any_instruction()) {
            let w = insn.encode().unwrap();
            prop_assert_eq!(Instruction::decode(w).unwrap(), insn);
        }

        #[test]
        fn decoded_words_are_canonical(w in any::<u32>()) {
            if let Ok(insn) = Instruction::decode(w) {
                prop_assert_eq!(insn.encode().unwrap(), w);
            }
        }
    }

    #[test]
    fn out_of_range_immediate_is_rejected() {
        let insn = Instruction::Mov { rd: Reg::R0, src: Operand::Imm(IMM_MAX + 1) };
        assert_eq!(insn.encode(), Err(EncodeError::ImmediateOutOfRange(IMM_MAX + 1)));
    }

    #[test]
    fn unknown_opcode_does_not_decode() {
        assert!(Instruction::decode(31 << 27).is_err());
    }

    #[test]
    fn register_names() {
        assert_eq!(Reg::parse("R12"), Some(Reg::R12));
        assert_eq!(Reg::parse("lr"), Some(Reg::LR));
        assert_eq!(Reg::parse("r13"), None);
        assert_eq!(Reg::parse("pc"), None);
        assert_eq!(RegList::from_regs(&[Reg::R4, Reg::LR]).unwrap().to_string(), "{r4, lr}");
    }
}
