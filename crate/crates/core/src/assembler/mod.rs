//! Toy assembly: parser, PACBTI instrumentation pass and image emitter.
//!
//! Grammar, one item per line, `;` starts a comment:
//!
//! ```text
//! .unprivileged              ; boot drops to unprivileged thread mode
//! .data
//! secret:  dw 0x5EC2E7
//! msg:     db 1, 2, 3, 4     ; bytes packed little-endian into words
//! table:   dw first, second  ; words or label addresses
//! .text
//! fn main:                   ; function entry
//! fn handler!indirect:       ; function reached through BX/BLX
//! loop:                      ; local label
//! case!indirect:             ; non-entry indirect branch target
//!     MOV r0, #1
//!     LDR r1, [r0, #2]
//!     PUSH {r4, r5, lr}
//!     BNE loop
//! ```

mod emit;
mod instrument;
mod parse;

use std::fmt;

use thiserror::Error;

use crate::machine::isa::{EncodeError, Instruction, Operand};

pub use emit::assemble;
pub use instrument::instrument;
pub use parse::parse;

pub const ENTRY_FUNCTION: &str = "main";
pub const BOOT_SYMBOL: &str = "__start";
pub const HOLD_STUB_SYMBOL: &str = "__runpba_hold";
/// Optional non-secure UsageFault handler, used when escalation is disabled.
pub const NS_USAGEFAULT_SYMBOL: &str = "usage_fault_handler";

/// Immediate or branch target before label resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Num(i32),
    Label(String),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Label(l) => f.write_str(l),
        }
    }
}

pub type SourceInstruction = Instruction<Expr>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Label { name: String, indirect: bool },
    /// `line` is the 1-based source line, 0 for instrumentation output.
    Insn { insn: SourceInstruction, line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub is_indirect_target: bool,
    pub body: Vec<Item>,
}

impl Function {
    pub fn instructions(&self) -> impl Iterator<Item = &SourceInstruction> {
        self.body.iter().filter_map(|i| match i {
            Item::Insn { insn, .. } => Some(insn),
            Item::Label { .. } => None,
        })
    }

    /// Contains a call, so `lr` and the tag register are clobbered in its body.
    pub fn is_leaf(&self) -> bool {
        !self.instructions().any(|i| i.is_call())
    }

    /// Labels in the body that are reached by indirect branches.
    pub fn indirect_labels(&self) -> usize {
        self.body
            .iter()
            .filter(|i| matches!(i, Item::Label { indirect: true, .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataWord {
    Word(u32),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBlob {
    pub label: String,
    pub words: Vec<DataWord>,
}

/// Which memory regions the sections are placed in (word addresses).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionPlan {
    pub code_base: u32,
    pub code_len: u32,
    pub data_base: u32,
    pub data_len: u32,
    pub stack_base: u32,
    pub stack_len: u32,
}

impl Default for RegionPlan {
    fn default() -> Self {
        use crate::machine::layout::*;
        RegionPlan {
            code_base: NS_CODE_BASE,
            code_len: NS_CODE_LEN,
            data_base: NS_DATA_BASE,
            data_len: NS_DATA_LEN,
            stack_base: NS_STACK_BASE,
            stack_len: NS_STACK_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct InstrumentConfig {
    pub pac: bool,
    pub bti: bool,
}

impl InstrumentConfig {
    pub const NONE: InstrumentConfig = InstrumentConfig { pac: false, bti: false };
    pub const FULL: InstrumentConfig = InstrumentConfig { pac: true, bti: true };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub data: Vec<DataBlob>,
    pub entry: String,
    pub regions: RegionPlan,
    /// Boot leaves the non-secure thread unprivileged.
    pub unprivileged: bool,
    /// Set once `instrument` has run.
    pub instrumented: Option<InstrumentConfig>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(|f| f.instructions().count()).sum()
    }
}

impl fmt::Display for Program {
    /// Canonical source text; re-parses to an equal program.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.unprivileged {
            writeln!(f, ".unprivileged")?;
        }
        if !self.data.is_empty() {
            writeln!(f, ".data")?;
            for blob in &self.data {
                let words: Vec<String> = blob
                    .words
                    .iter()
                    .map(|w| match w {
                        DataWord::Word(v) => format!("{v:#x}"),
                        DataWord::Label(l) => l.clone(),
                    })
                    .collect();
                writeln!(f, "{}: dw {}", blob.label, words.join(", "))?;
            }
        }
        writeln!(f, ".text")?;
        for func in &self.functions {
            let bang = if func.is_indirect_target { "!indirect" } else { "" };
            writeln!(f, "fn {}{bang}:", func.name)?;
            for item in &func.body {
                match item {
                    Item::Label { name, indirect } => {
                        writeln!(f, "{name}{}:", if *indirect { "!indirect" } else { "" })?
                    }
                    Item::Insn { insn, .. } => writeln!(f, "    {}", SourceDisplay(insn))?,
                }
            }
        }
        Ok(())
    }
}

/// Prints an instruction in parseable source form (labels bare in branches).
struct SourceDisplay<'a>(&'a SourceInstruction);

impl fmt::Display for SourceDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction as I;
        let op2 = |o: &Operand<Expr>| match o {
            Operand::Reg(r) => r.to_string(),
            Operand::Imm(e) => format!("#{e}"),
        };
        match self.0 {
            I::Mov { rd, src } => write!(f, "MOV {rd}, {}", op2(src)),
            I::Add { rd, rn, op2: o } => write!(f, "ADD {rd}, {rn}, {}", op2(o)),
            I::Sub { rd, rn, op2: o } => write!(f, "SUB {rd}, {rn}, {}", op2(o)),
            I::Cmp { rn, op2: o } => write!(f, "CMP {rn}, {}", op2(o)),
            other => write!(f, "{other}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {message}")]
    SyntaxError { line: usize, message: String },
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("program is already instrumented")]
    InstrumentTwice,
    #[error("{section} section needs {needed} words but its region holds {capacity}")]
    ImageOverflow { section: &'static str, needed: u32, capacity: u32 },
    #[error("cannot encode `{insn}`: {source}")]
    Encode { insn: String, source: EncodeError },
}

impl AsmError {
    fn syntax(line: usize, message: impl Into<String>) -> AsmError {
        AsmError::SyntaxError { line, message: message.into() }
    }
}
