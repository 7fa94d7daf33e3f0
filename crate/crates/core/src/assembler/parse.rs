use std::collections::HashSet;

use super::{AsmError, DataBlob, DataWord, Expr, Function, Item, Program, RegionPlan, SourceInstruction, ENTRY_FUNCTION};
use crate::machine::isa::{Cond, Instruction, Operand, Reg, RegList, SysReg};

#[derive(PartialEq)]
enum Section {
    Text,
    Data,
}

/// Parses source text into a program, checking that every label reference
/// resolves and that the entry function exists.
pub fn parse(text: &str) -> Result<Program, AsmError> {
    let mut functions: Vec<Function> = Vec::new();
    let mut data: Vec<DataBlob> = Vec::new();
    let mut section = Section::Text;
    let mut unprivileged = false;
    let mut defined: HashSet<String> = HashSet::new();
    let mut referenced: Vec<String> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let code = raw.split(';').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        match code {
            ".text" => {
                section = Section::Text;
                continue;
            }
            ".data" => {
                section = Section::Data;
                continue;
            }
            ".unprivileged" => {
                unprivileged = true;
                continue;
            }
            _ if code.starts_with('.') => return Err(AsmError::syntax(line, format!("unknown directive `{code}`"))),
            _ => {}
        }

        let mut define = |name: &str| -> Result<(), AsmError> {
            if !is_ident(name) {
                return Err(AsmError::syntax(line, format!("bad label name `{name}`")));
            }
            if !defined.insert(name.to_string()) {
                return Err(AsmError::syntax(line, format!("duplicate label `{name}`")));
            }
            Ok(())
        };

        if section == Section::Data {
            let (label, rest) = code
                .split_once(':')
                .ok_or_else(|| AsmError::syntax(line, "data needs a `label:` prefix"))?;
            let label = label.trim();
            define(label)?;
            let words = parse_data(rest.trim(), line, &mut referenced)?;
            data.push(DataBlob { label: label.to_string(), words });
            continue;
        }

        if let Some(header) = code.strip_prefix("fn ") {
            let header = header
                .trim()
                .strip_suffix(':')
                .ok_or_else(|| AsmError::syntax(line, "function header must end with `:`"))?;
            let (name, indirect) = split_indirect(header, line)?;
            define(name)?;
            functions.push(Function { name: name.to_string(), is_indirect_target: indirect, body: Vec::new() });
            continue;
        }

        let func = functions
            .last_mut()
            .ok_or_else(|| AsmError::syntax(line, "code outside of a function"))?;

        if let Some(label) = code.strip_suffix(':') {
            let (name, indirect) = split_indirect(label.trim(), line)?;
            define(name)?;
            func.body.push(Item::Label { name: name.to_string(), indirect });
            continue;
        }

        let insn = parse_instruction(code, line)?;
        let _ = insn.clone().try_map(|e| -> Result<(), ()> {
            if let Expr::Label(l) = e {
                referenced.push(l);
            }
            Ok(())
        });
        func.body.push(Item::Insn { insn, line });
    }

    if let Some(missing) = referenced.into_iter().find(|l| !defined.contains(l)) {
        return Err(AsmError::UnresolvedLabel(missing));
    }
    if !functions.iter().any(|f| f.name == ENTRY_FUNCTION) {
        return Err(AsmError::UnresolvedLabel(ENTRY_FUNCTION.to_string()));
    }
    Ok(Program {
        functions,
        data,
        entry: ENTRY_FUNCTION.to_string(),
        regions: RegionPlan::default(),
        unprivileged,
        instrumented: None,
    })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn split_indirect(s: &str, line: usize) -> Result<(&str, bool), AsmError> {
    match s.split_once('!') {
        None => Ok((s, false)),
        Some((name, "indirect")) => Ok((name, true)),
        Some((_, attr)) => Err(AsmError::syntax(line, format!("unknown attribute `!{attr}`"))),
    }
}

fn parse_number(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else {
        body.replace('_', "").parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_data(rest: &str, line: usize, referenced: &mut Vec<String>) -> Result<Vec<DataWord>, AsmError> {
    let (directive, args) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    let items: Vec<&str> = args.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(AsmError::syntax(line, "empty data directive"));
    }
    match directive.to_ascii_lowercase().as_str() {
        "db" => {
            let bytes = items
                .iter()
                .map(|s| {
                    parse_number(s)
                        .filter(|v| (0..=255).contains(v))
                        .map(|v| v as u8)
                        .ok_or_else(|| AsmError::syntax(line, format!("bad byte `{s}`")))
                })
                .collect::<Result<Vec<u8>, _>>()?;
            Ok(bytes
                .chunks(4)
                .map(|c| {
                    let mut w = [0u8; 4];
                    w[..c.len()].copy_from_slice(c);
                    DataWord::Word(u32::from_le_bytes(w))
                })
                .collect())
        }
        "dw" => items
            .iter()
            .map(|s| {
                if let Some(v) = parse_number(s) {
                    if v < i64::from(i32::MIN) || v > i64::from(u32::MAX) {
                        return Err(AsmError::syntax(line, format!("word `{s}` out of range")));
                    }
                    Ok(DataWord::Word(v as u32))
                } else if is_ident(s) {
                    referenced.push(s.to_string());
                    Ok(DataWord::Label(s.to_string()))
                } else {
                    Err(AsmError::syntax(line, format!("bad word `{s}`")))
                }
            })
            .collect(),
        other => Err(AsmError::syntax(line, format!("unknown data directive `{other}`"))),
    }
}

/// Splits operands on commas that are not inside `{}` or `[]`.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '{' | '[' => depth += 1,
            '}' | ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

struct Ops<'a> {
    ops: Vec<String>,
    line: usize,
    mnemonic: &'a str,
}

impl Ops<'_> {
    fn err(&self, msg: impl Into<String>) -> AsmError {
        AsmError::syntax(self.line, format!("{}: {}", self.mnemonic, msg.into()))
    }

    fn expect(&self, n: usize) -> Result<(), AsmError> {
        if self.ops.len() != n {
            return Err(self.err(format!("expected {n} operands, found {}", self.ops.len())));
        }
        Ok(())
    }

    fn reg(&self, i: usize) -> Result<Reg, AsmError> {
        Reg::parse(&self.ops[i]).ok_or_else(|| self.err(format!("bad register `{}`", self.ops[i])))
    }

    fn expr(&self, s: &str) -> Result<Expr, AsmError> {
        if let Some(v) = parse_number(s) {
            i32::try_from(v).map(Expr::Num).map_err(|_| self.err(format!("immediate `{s}` out of range")))
        } else if is_ident(s) {
            Ok(Expr::Label(s.to_string()))
        } else {
            Err(self.err(format!("bad expression `{s}`")))
        }
    }

    fn imm(&self, i: usize) -> Result<Expr, AsmError> {
        let s = self.ops[i]
            .strip_prefix('#')
            .ok_or_else(|| self.err(format!("immediate `{}` needs `#`", self.ops[i])))?;
        self.expr(s)
    }

    fn operand(&self, i: usize) -> Result<Operand<Expr>, AsmError> {
        if self.ops[i].starts_with('#') {
            Ok(Operand::Imm(self.imm(i)?))
        } else {
            Ok(Operand::Reg(self.reg(i)?))
        }
    }

    fn target(&self, i: usize) -> Result<Expr, AsmError> {
        let s = &self.ops[i];
        self.expr(s.strip_prefix('#').unwrap_or(s))
    }

    fn mem(&self, i: usize) -> Result<(Reg, Expr), AsmError> {
        let inner = self.ops[i]
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| self.err(format!("bad memory operand `{}`", self.ops[i])))?;
        let parts = split_operands(inner);
        let base = Reg::parse(&parts[0]).ok_or_else(|| self.err(format!("bad base `{}`", parts[0])))?;
        let offset = match parts.len() {
            1 => Expr::Num(0),
            2 => {
                let s = parts[1].strip_prefix('#').ok_or_else(|| self.err("offset needs `#`"))?;
                self.expr(s)?
            }
            _ => return Err(self.err("too many fields in memory operand")),
        };
        Ok((base, offset))
    }

    fn reglist(&self, i: usize) -> Result<RegList, AsmError> {
        let inner = self.ops[i]
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| self.err(format!("bad register list `{}`", self.ops[i])))?;
        let mut regs = Vec::new();
        for part in inner.split(',').map(str::trim) {
            if let Some((a, b)) = part.split_once('-') {
                let (a, b) = (Reg::parse(a.trim()), Reg::parse(b.trim()));
                let (Some(a), Some(b)) = (a, b) else {
                    return Err(self.err(format!("bad range `{part}`")));
                };
                for idx in a.index()..=b.index() {
                    regs.push(Reg::new(idx as u8).unwrap());
                }
            } else {
                regs.push(Reg::parse(part).ok_or_else(|| self.err(format!("bad register `{part}`")))?);
            }
        }
        RegList::from_regs(&regs).ok_or_else(|| self.err("register list may not be empty or contain sp"))
    }

    fn sysreg(&self, i: usize) -> Result<SysReg, AsmError> {
        SysReg::parse(&self.ops[i]).ok_or_else(|| self.err(format!("bad system register `{}`", self.ops[i])))
    }
}

fn parse_instruction(code: &str, line: usize) -> Result<SourceInstruction, AsmError> {
    let (mnemonic, rest) = code.split_once(char::is_whitespace).unwrap_or((code, ""));
    let upper = mnemonic.to_ascii_uppercase();
    let o = Ops { ops: split_operands(rest), line, mnemonic };
    use Instruction as I;
    let insn = match upper.as_str() {
        "MOV" => {
            o.expect(2)?;
            I::Mov { rd: o.reg(0)?, src: o.operand(1)? }
        }
        "LDR" | "STR" => {
            o.expect(2)?;
            let (base, offset) = o.mem(1)?;
            let rt = o.reg(0)?;
            if upper == "LDR" {
                I::Ldr { rt, base, offset }
            } else {
                I::Str { rt, base, offset }
            }
        }
        "ADD" | "SUB" => {
            o.expect(3)?;
            let (rd, rn, op2) = (o.reg(0)?, o.reg(1)?, o.operand(2)?);
            if upper == "ADD" {
                I::Add { rd, rn, op2 }
            } else {
                I::Sub { rd, rn, op2 }
            }
        }
        "CMP" => {
            o.expect(2)?;
            I::Cmp { rn: o.reg(0)?, op2: o.operand(1)? }
        }
        "B" => {
            o.expect(1)?;
            I::B { target: o.target(0)? }
        }
        "BL" => {
            o.expect(1)?;
            I::Bl { target: o.target(0)? }
        }
        "BX" => {
            o.expect(1)?;
            I::Bx { rm: o.reg(0)? }
        }
        "BLX" => {
            o.expect(1)?;
            I::Blx { rm: o.reg(0)? }
        }
        "PUSH" | "POP" => {
            o.expect(1)?;
            let regs = o.reglist(0)?;
            if upper == "PUSH" {
                I::Push { regs }
            } else {
                I::Pop { regs }
            }
        }
        "MSR" => {
            o.expect(2)?;
            I::Msr { sysreg: o.sysreg(0)?, rn: o.reg(1)? }
        }
        "MRS" => {
            o.expect(2)?;
            I::Mrs { rd: o.reg(0)?, sysreg: o.sysreg(1)? }
        }
        "SVC" => {
            o.expect(1)?;
            I::Svc { imm: o.imm(0)? }
        }
        "OUT" => {
            o.expect(1)?;
            I::Out { rs: o.reg(0)? }
        }
        "PACG" | "AUT" | "PACBTI" | "BTI" | "RET" | "HALT" | "NOP" => {
            o.expect(0)?;
            match upper.as_str() {
                "PACG" => I::Pacg,
                "AUT" => I::Aut,
                "PACBTI" => I::Pacbti,
                "BTI" => I::Bti,
                "RET" => I::Ret,
                "HALT" => I::Halt,
                _ => I::Nop,
            }
        }
        _ => match upper.strip_prefix('B').and_then(Cond::from_suffix) {
            Some(cond) => {
                o.expect(1)?;
                I::BCond { cond, target: o.target(0)? }
            }
            None => return Err(AsmError::syntax(line, format!("unknown mnemonic `{mnemonic}`"))),
        },
    };
    Ok(insn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let p = parse("fn main:\n  HALT").unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.instruction_count(), 1);
        assert_eq!(p.entry, "main");
    }

    #[test]
    fn undefined_branch_target() {
        assert_eq!(parse("fn main:\n  B nowhere"), Err(AsmError::UnresolvedLabel("nowhere".into())));
        assert_eq!(parse("fn f:\n  RET"), Err(AsmError::UnresolvedLabel("main".into())));
    }

    #[test]
    fn syntax_errors_carry_line() {
        let err = parse("fn main:\n  MOV r0\n").unwrap_err();
        assert!(matches!(err, AsmError::SyntaxError { line: 2, .. }), "{err}");
        assert!(matches!(parse("fn main:\nfn main:\n"), Err(AsmError::SyntaxError { line: 2, .. })));
        assert!(matches!(parse("  NOP\n"), Err(AsmError::SyntaxError { line: 1, .. })));
        assert!(matches!(parse("fn main:\n  FROB r1\n"), Err(AsmError::SyntaxError { .. })));
        assert!(matches!(parse("fn main:\n  MOV pc, r1\n"), Err(AsmError::SyntaxError { .. })));
    }

    #[test]
    fn operands_and_data() {
        let p = parse(
            ".data\nmsg: db 1, 2, 3, 4, 5\ntbl: dw 0xFFFFFFFF, main\n.text\nfn main:\n  PUSH {r4-r5, lr}\n  LDR r0, [sp]\n  BGE main\n  MSR control, r0\n  SVC #0\n",
        )
        .unwrap();
        assert_eq!(p.data[0].words, vec![DataWord::Word(0x0403_0201), DataWord::Word(5)]);
        assert_eq!(p.data[1].words[1], DataWord::Label("main".into()));
        let body: Vec<_> = p.functions[0].instructions().cloned().collect();
        assert_eq!(body[0], Instruction::Push { regs: RegList::from_regs(&[Reg::R4, Reg::R5, Reg::LR]).unwrap() });
        assert_eq!(body[1], Instruction::Ldr { rt: Reg::R0, base: Reg::SP, offset: Expr::Num(0) });
        assert_eq!(body[2], Instruction::BCond { cond: Cond::Ge, target: Expr::Label("main".into()) });
    }
}
