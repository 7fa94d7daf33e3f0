//! Instruction-level execution core.

pub mod cpu;
pub mod image;
pub mod isa;
pub mod layout;
pub mod memory;
pub mod pac;

pub use cpu::{Fault, FaultKind, Flags, MachineError, MachineState, RegisterFile, StepResult, UsageCause};
pub use image::{ImageError, ImageRegion, ProgramImage};
pub use isa::{Cond, Instruction, Opcode, Operand, Reg, RegList, SysReg};
pub use memory::{AccessKind, AccessViolation, Accessor, Memory, MemoryRegion, Privilege, RegionFlags, RegionKind, World};
pub use pac::{pac_compute, PacKeySet, PacbtiControl};
