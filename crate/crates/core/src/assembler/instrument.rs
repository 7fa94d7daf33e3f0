use super::{AsmError, Function, InstrumentConfig, Item, Program, SourceInstruction};
use crate::machine::isa::{Instruction, Reg, RegList};

fn synth(insn: SourceInstruction) -> Item {
    Item::Insn { insn, line: 0 }
}

fn r12_list() -> RegList {
    RegList::from_regs(&[Reg::R12]).unwrap()
}

/// Adds PAC/BTI instructions the way a PACBTI-aware compiler would.
///
/// With `pac`, every entry gets `PACBTI` and every `RET` is preceded by `AUT`;
/// non-leaf functions also spill the tag register after `PACBTI` and reload it
/// before each `AUT`. With only `bti`, entries get `BTI`. With `bti`, labels
/// marked `!indirect` inside a body get `BTI` as well.
pub fn instrument(p: &Program, cfg: InstrumentConfig) -> Result<Program, AsmError> {
    if cfg == InstrumentConfig::NONE {
        return Ok(p.clone());
    }
    let starts_with_pad = |f: &Function| f.instructions().next().is_some_and(|i| i.is_landing_pad());
    if p.instrumented.is_some() || p.functions.iter().any(starts_with_pad) {
        return Err(AsmError::InstrumentTwice);
    }
    let functions = p.functions.iter().map(|f| instrument_function(f, cfg)).collect();
    Ok(Program { functions, instrumented: Some(cfg), ..p.clone() })
}

fn instrument_function(f: &Function, cfg: InstrumentConfig) -> Function {
    let spill = cfg.pac && !f.is_leaf();
    let mut body = Vec::with_capacity(f.body.len() + 4);
    if cfg.pac {
        body.push(synth(Instruction::Pacbti));
        if spill {
            body.push(synth(Instruction::Push { regs: r12_list() }));
        }
    } else if cfg.bti {
        body.push(synth(Instruction::Bti));
    }
    for item in &f.body {
        match item {
            Item::Insn { insn: Instruction::Ret, .. } if cfg.pac => {
                if spill {
                    body.push(synth(Instruction::Pop { regs: r12_list() }));
                }
                body.push(synth(Instruction::Aut));
                body.push(item.clone());
            }
            Item::Label { indirect: true, .. } if cfg.bti => {
                body.push(item.clone());
                body.push(synth(Instruction::Bti));
            }
            _ => body.push(item.clone()),
        }
    }
    Function { body, ..f.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembler::parse;

    const THREE_LEAVES: &str = "\
fn main:
    MOV r0, #1
    RET
fn a:
    MOV r0, #2
    RET
fn b!indirect:
    CMP r0, #0
    BEQ done
hop!indirect:
    MOV r0, #3
done:
    RET
";

    #[test]
    fn leaf_formula() {
        let p = parse(THREE_LEAVES).unwrap();
        let q = instrument(&p, InstrumentConfig::FULL).unwrap();
        // 2 per function plus one pad for the one indirect label.
        assert_eq!(q.instruction_count() - p.instruction_count(), 7);
    }

    #[test]
    fn identity_when_disabled() {
        let p = parse(THREE_LEAVES).unwrap();
        assert_eq!(instrument(&p, InstrumentConfig::NONE).unwrap(), p);
    }

    #[test]
    fn bti_only_pads_every_entry() {
        let p = parse("fn main:\n RET\nfn a:\n RET\nfn b:\n RET\nfn c:\n RET\n").unwrap();
        let q = instrument(&p, InstrumentConfig { pac: false, bti: true }).unwrap();
        for f in &q.functions {
            assert_eq!(f.instructions().next(), Some(&Instruction::Bti));
        }
        assert_eq!(q.instruction_count() - p.instruction_count(), 4);
    }

    #[test]
    fn non_leaf_spills_tag() {
        let p = parse("fn main:\n  PUSH {lr}\n  BL f\n  POP {lr}\n  RET\nfn f:\n  RET\n").unwrap();
        let q = instrument(&p, InstrumentConfig::FULL).unwrap();
        let main: Vec<String> = q.functions[0].instructions().map(|i| i.to_string()).collect();
        assert_eq!(main, ["PACBTI", "PUSH {r12}", "PUSH {lr}", "BL f", "POP {lr}", "POP {r12}", "AUT", "RET"]);
        assert_eq!(q.instruction_count() - p.instruction_count(), 2 * 2 + 2);
    }

    #[test]
    fn twice_rejected() {
        let p = parse(THREE_LEAVES).unwrap();
        let q = instrument(&p, InstrumentConfig::FULL).unwrap();
        assert_eq!(instrument(&q, InstrumentConfig::FULL), Err(AsmError::InstrumentTwice));
        let hand = parse("fn main:\n  BTI\n  RET\n").unwrap();
        assert_eq!(instrument(&hand, InstrumentConfig::FULL), Err(AsmError::InstrumentTwice));
    }
}
