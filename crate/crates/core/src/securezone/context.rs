use serde::{Deserialize, Serialize};

use crate::machine::memory::World;

/// Configurable Fault Status Register bits that the simulator models.
pub mod cfsr {
    pub const IACCVIOL: u32 = 1 << 0;
    pub const DACCVIOL: u32 = 1 << 1;
    pub const UNDEFINSTR: u32 = 1 << 16;
    pub const INVSTATE: u32 = 1 << 17;
}

/// Exception frame plus status captured when a fault is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultContext {
    pub stacked_pc: u32,
    pub stacked_sp: u32,
    pub stacked_lr: u32,
    pub stacked_r0_r3: [u32; 4],
    pub stacked_r12: u32,
    pub epsr_b: bool,
    pub world: World,
    pub privileged: bool,
    pub cfsr: u32,
}

impl FaultContext {
    pub const WORDS: usize = 10;
    pub const BYTES: usize = Self::WORDS * 4;

    pub fn cfsr_invalid_state(&self) -> bool {
        self.cfsr & cfsr::INVSTATE != 0
    }

    fn flag_word(&self) -> u32 {
        self.epsr_b as u32 | ((self.world == World::Secure) as u32) << 1 | (self.privileged as u32) << 2
    }

    /// Fixed layout: pc, sp, lr, r0..r3, r12, cfsr, flags.
    pub fn to_words(&self) -> [u32; Self::WORDS] {
        let r = self.stacked_r0_r3;
        [
            self.stacked_pc,
            self.stacked_sp,
            self.stacked_lr,
            r[0],
            r[1],
            r[2],
            r[3],
            self.stacked_r12,
            self.cfsr,
            self.flag_word(),
        ]
    }

    pub fn from_words(w: &[u32; Self::WORDS]) -> Option<FaultContext> {
        if w[9] & !0b111 != 0 {
            return None;
        }
        Some(FaultContext {
            stacked_pc: w[0],
            stacked_sp: w[1],
            stacked_lr: w[2],
            stacked_r0_r3: [w[3], w[4], w[5], w[6]],
            stacked_r12: w[7],
            cfsr: w[8],
            epsr_b: w[9] & 1 != 0,
            world: if w[9] & 2 != 0 { World::Secure } else { World::NonSecure },
            privileged: w[9] & 4 != 0,
        })
    }

    pub fn to_bytes(&self) -> [u8; Self::BYTES] {
        let mut out = [0u8; Self::BYTES];
        for (chunk, w) in out.chunks_exact_mut(4).zip(self.to_words()) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<FaultContext> {
        if bytes.len() != Self::BYTES {
            return None;
        }
        let mut w = [0u32; Self::WORDS];
        for (dst, chunk) in w.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = u32::from_le_bytes(chunk.try_into().unwrap());
        }
        FaultContext::from_words(&w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn byte_exact_copy(pc: u32, sp: u32, lr: u32, r: [u32; 4], r12: u32, b: bool, s: bool, p: bool, c: u32) {
            let ctx = FaultContext {
                stacked_pc: pc, stacked_sp: sp, stacked_lr: lr, stacked_r0_r3: r, stacked_r12: r12,
                epsr_b: b, world: if s { World::Secure } else { World::NonSecure }, privileged: p, cfsr: c,
            };
            prop_assert_eq!(FaultContext::from_bytes(&ctx.to_bytes()), Some(ctx));
        }
    }
}
