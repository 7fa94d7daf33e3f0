//! Pointer authentication primitives and the PACBTI control bits.

use std::hash::Hasher;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher24;

use super::memory::Privilege;

pub const DEFAULT_TAG_WIDTH: u32 = 32;

/// PAC key material of one device boot.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PacKeySet {
    pub key: u128,
    /// Tag width in bits, 4..=32. Anything below 32 is a statistics affordance.
    pub tag_width: u32,
}

impl std::fmt::Debug for PacKeySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PacKeySet")
            .field("key", &"<redacted>")
            .field("tag_width", &self.tag_width)
            .finish()
    }
}

impl PacKeySet {
    pub fn new(key: u128, tag_width: u32) -> PacKeySet {
        assert!((4..=32).contains(&tag_width), "tag width {tag_width} outside 4..=32");
        PacKeySet { key, tag_width }
    }

    pub fn random(rng: &mut impl RngCore, tag_width: u32) -> PacKeySet {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        PacKeySet::new(u128::from_le_bytes(bytes), tag_width)
    }

    pub fn tag_mask(&self) -> u32 {
        if self.tag_width == 32 {
            u32::MAX
        } else {
            (1u32 << self.tag_width) - 1
        }
    }
}

/// Keyed PRF over `pointer || modifier`, truncated to the configured tag width.
///
/// SipHash-2-4 stands in for QARMA: both are 128-bit-keyed PRFs over a
/// 64-bit block.
pub fn pac_compute(pointer: u32, modifier: u32, keys: &PacKeySet) -> u32 {
    let k = keys.key.to_le_bytes();
    let k0 = u64::from_le_bytes(k[..8].try_into().unwrap());
    let k1 = u64::from_le_bytes(k[8..].try_into().unwrap());
    let mut h = SipHasher24::new_with_keys(k0, k1);
    h.write_u64(u64::from(pointer) | u64::from(modifier) << 32);
    let out = h.finish();
    ((out ^ (out >> 32)) as u32) & keys.tag_mask()
}

/// Per-privilege enables for pointer authentication and branch target
/// identification, as held in the non-secure CONTROL register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PacbtiControl {
    pub pac_priv: bool,
    pub pac_unpriv: bool,
    pub bti_priv: bool,
    pub bti_unpriv: bool,
}

/// CONTROL bit positions.
pub mod control_bits {
    pub const NPRIV: u32 = 1 << 0;
    pub const BTI_EN: u32 = 1 << 4;
    pub const UBTI_EN: u32 = 1 << 5;
    pub const PAC_EN: u32 = 1 << 6;
    pub const UPAC_EN: u32 = 1 << 7;
    pub const PACBTI_MASK: u32 = BTI_EN | UBTI_EN | PAC_EN | UPAC_EN;
}

impl PacbtiControl {
    pub const ALL: PacbtiControl = PacbtiControl {
        pac_priv: true,
        pac_unpriv: true,
        bti_priv: true,
        bti_unpriv: true,
    };
    pub const NONE: PacbtiControl = PacbtiControl {
        pac_priv: false,
        pac_unpriv: false,
        bti_priv: false,
        bti_unpriv: false,
    };

    pub fn with_features(pac: bool, bti: bool) -> PacbtiControl {
        PacbtiControl { pac_priv: pac, pac_unpriv: pac, bti_priv: bti, bti_unpriv: bti }
    }

    pub fn pac_enabled(&self, p: Privilege) -> bool {
        match p {
            Privilege::Privileged => self.pac_priv,
            Privilege::Unprivileged => self.pac_unpriv,
        }
    }

    pub fn bti_enabled(&self, p: Privilege) -> bool {
        match p {
            Privilege::Privileged => self.bti_priv,
            Privilege::Unprivileged => self.bti_unpriv,
        }
    }

    pub fn to_control_bits(self) -> u32 {
        use control_bits::*;
        let mut v = 0;
        if self.bti_priv {
            v |= BTI_EN;
        }
        if self.bti_unpriv {
            v |= UBTI_EN;
        }
        if self.pac_priv {
            v |= PAC_EN;
        }
        if self.pac_unpriv {
            v |= UPAC_EN;
        }
        v
    }

    pub fn from_control_bits(v: u32) -> PacbtiControl {
        use control_bits::*;
        PacbtiControl {
            pac_priv: v & PAC_EN != 0,
            pac_unpriv: v & UPAC_EN != 0,
            bti_priv: v & BTI_EN != 0,
            bti_unpriv: v & UBTI_EN != 0,
        }
    }
}
