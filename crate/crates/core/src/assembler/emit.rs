use std::collections::BTreeMap;

use super::{AsmError, DataWord, Expr, Item, Program, BOOT_SYMBOL, HOLD_STUB_SYMBOL};
use crate::machine::image::{ImageRegion, ProgramImage};
use crate::machine::isa::{Instruction, Operand, Reg, SysReg};
use crate::machine::layout::NS_STACK_HEADROOM;
use crate::machine::memory::{Privilege, RegionFlags, RegionKind, World};
use crate::machine::pac::{control_bits, PacbtiControl};

/// Words of boot stub and hold loop emitted ahead of the program's functions.
pub const PRELUDE_WORDS: u32 = 5;

fn boot_control(p: &Program) -> u32 {
    let cfg = p.instrumented.unwrap_or_default();
    let mut ctrl = PacbtiControl::with_features(cfg.pac, cfg.bti).to_control_bits();
    if p.unprivileged {
        ctrl |= control_bits::NPRIV;
    }
    ctrl
}

/// Lays out and encodes a program.
///
/// Code starts with a boot stub that programs CONTROL for the instrumentation
/// level, calls the entry function and halts, followed by the single-word
/// infinite loop the lockdown path redirects to.
pub fn assemble(p: &Program) -> Result<ProgramImage, AsmError> {
    let plan = p.regions;
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();

    let mut addr = plan.code_base;
    symbols.insert(BOOT_SYMBOL.into(), addr);
    addr += 4;
    symbols.insert(HOLD_STUB_SYMBOL.into(), addr);
    addr = plan.code_base + PRELUDE_WORDS;
    for f in &p.functions {
        symbols.insert(f.name.clone(), addr);
        for item in &f.body {
            match item {
                Item::Label { name, .. } => {
                    symbols.insert(name.clone(), addr);
                }
                Item::Insn { .. } => addr += 1,
            }
        }
    }
    let code_words = addr - plan.code_base;
    if code_words > plan.code_len {
        return Err(AsmError::ImageOverflow { section: "code", needed: code_words, capacity: plan.code_len });
    }

    let mut daddr = plan.data_base;
    for blob in &p.data {
        symbols.insert(blob.label.clone(), daddr);
        daddr += blob.words.len() as u32;
    }
    let data_words = daddr - plan.data_base;
    if data_words > plan.data_len {
        return Err(AsmError::ImageOverflow { section: "data", needed: data_words, capacity: plan.data_len });
    }

    let resolve = |e: Expr| -> Result<i32, AsmError> {
        match e {
            Expr::Num(n) => Ok(n),
            Expr::Label(l) => symbols.get(&l).map(|&a| a as i32).ok_or(AsmError::UnresolvedLabel(l)),
        }
    };
    let encode = |insn: Instruction| {
        insn.encode().map_err(|source| AsmError::Encode { insn: insn.to_string(), source })
    };

    let mut code = Vec::with_capacity(code_words as usize);
    let entry = symbols[&p.entry] as i32;
    let hold = symbols[HOLD_STUB_SYMBOL];
    for insn in [
        Instruction::Mov { rd: Reg::R0, src: Operand::Imm(boot_control(p) as i32) },
        Instruction::Msr { sysreg: SysReg::Control, rn: Reg::R0 },
        Instruction::Bl { target: entry },
        Instruction::Halt,
        Instruction::B { target: hold as i32 },
    ] {
        code.push(encode(insn)?);
    }
    for f in &p.functions {
        for item in &f.body {
            if let Item::Insn { insn, .. } = item {
                code.push(encode(insn.clone().try_map(resolve)?)?);
            }
        }
    }
    debug_assert_eq!(code.len() as u32, code_words);

    let data = p
        .data
        .iter()
        .flat_map(|b| b.words.iter())
        .map(|w| match w {
            DataWord::Word(v) => Ok(*v),
            DataWord::Label(l) => symbols.get(l).copied().ok_or_else(|| AsmError::UnresolvedLabel(l.clone())),
        })
        .collect::<Result<Vec<u32>, _>>()?;

    let stack_top = plan.stack_base + plan.stack_len;
    symbols.insert("__stack_top".into(), stack_top);
    let region = |name: &str, kind, base, len, flags, payload| ImageRegion {
        name: name.to_string(),
        kind,
        base,
        len,
        flags,
        world: World::NonSecure,
        min_privilege: Privilege::Unprivileged,
        payload,
    };
    Ok(ProgramImage {
        entry: symbols[BOOT_SYMBOL],
        initial_sp: stack_top - NS_STACK_HEADROOM,
        hold_stub: hold,
        regions: vec![
            region("ns_code", RegionKind::Code, plan.code_base, plan.code_len, RegionFlags::RX, code),
            region("ns_data", RegionKind::Data, plan.data_base, plan.data_len, RegionFlags::RW, data),
            region("ns_stack", RegionKind::Stack, plan.stack_base, plan.stack_len, RegionFlags::RW, Vec::new()),
        ],
        symbols,
    })
}
