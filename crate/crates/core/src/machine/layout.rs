//! Fixed address map of the simulated microcontroller (word addresses).

/// Secure code: reset vector and native handler entry points.
pub const SECURE_CODE_BASE: u32 = 0x0000;
pub const SECURE_CODE_LEN: u32 = 0x0100;
/// Secure RAM: partition buffers and other secure-only state.
pub const SECURE_DATA_BASE: u32 = 0x0100;
pub const SECURE_DATA_LEN: u32 = 0x0100;
pub const SECURE_STACK_BASE: u32 = 0x0200;
pub const SECURE_STACK_LEN: u32 = 0x0100;

pub const SECURE_RESET_VECTOR: u32 = SECURE_CODE_BASE;
pub const SECURE_HARDFAULT_HANDLER: u32 = SECURE_CODE_BASE + 0x04;
pub const SECURE_MEMMANAGE_HANDLER: u32 = SECURE_CODE_BASE + 0x08;
pub const SECURE_USAGEFAULT_HANDLER: u32 = SECURE_CODE_BASE + 0x0C;
/// Secure interrupt `id` is served from `SECURE_IRQ_BASE + id`.
pub const SECURE_IRQ_BASE: u32 = SECURE_CODE_BASE + 0x40;

/// Word offset of the fault-context buffer owned by the RunPBA partition.
pub const PARTITION_BUFFER: u32 = SECURE_DATA_BASE;

pub const NS_CODE_BASE: u32 = 0x1000;
pub const NS_CODE_LEN: u32 = 0x1000;
pub const NS_DATA_BASE: u32 = 0x4000;
pub const NS_DATA_LEN: u32 = 0x1000;
pub const NS_STACK_BASE: u32 = 0x6000;
pub const NS_STACK_LEN: u32 = 0x0400;
/// Words left unused above the initial non-secure stack pointer.
pub const NS_STACK_HEADROOM: u32 = 16;

/// Link-register values at or above this mark an exception return.
pub const EXC_RETURN_MIN: u32 = 0xFFFF_FF00;
pub const EXC_RETURN_THREAD_NS: u32 = 0xFFFF_FFBC;
pub const EXC_RETURN_HANDLER_NS: u32 = 0xFFFF_FFB0;

pub fn is_exc_return(value: u32) -> bool {
    value >= EXC_RETURN_MIN
}
