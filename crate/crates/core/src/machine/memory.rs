//! Word-addressed, permissioned memory.
//!
//! One address unit holds one 32-bit word. Code regions hold encoded
//! instructions, data and stack regions hold plain words.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum World {
    Secure,
    NonSecure,
}

impl fmt::Display for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            World::Secure => "secure",
            World::NonSecure => "non-secure",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Privilege {
    Unprivileged,
    Privileged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RegionFlags {
    pub readable: bool,
    pub writable: bool,
    pub executable: bool,
}

impl RegionFlags {
    pub const RX: RegionFlags = RegionFlags { readable: true, writable: false, executable: true };
    pub const RW: RegionFlags = RegionFlags { readable: true, writable: true, executable: false };
    pub const RO: RegionFlags = RegionFlags { readable: true, writable: false, executable: false };

    pub fn bits(self) -> u8 {
        self.readable as u8 | (self.writable as u8) << 1 | (self.executable as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Option<RegionFlags> {
        (bits & !0b111 == 0).then_some(RegionFlags {
            readable: bits & 1 != 0,
            writable: bits & 2 != 0,
            executable: bits & 4 != 0,
        })
    }
}

impl fmt::Display for RegionFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |set: bool, ch: char| if set { ch } else { '-' };
        write!(
            f,
            "{}{}{}",
            c(self.readable, 'r'),
            c(self.writable, 'w'),
            c(self.executable, 'x')
        )
    }
}

/// What a region is used for. Stack regions may never be executable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Code,
    Data,
    Stack,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    pub name: String,
    pub kind: RegionKind,
    pub base: u32,
    pub flags: RegionFlags,
    pub world: World,
    pub min_privilege: Privilege,
    pub contents: Vec<u32>,
}

impl MemoryRegion {
    pub fn len(&self) -> u32 {
        self.contents.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    pub fn end(&self) -> u32 {
        self.base + self.len()
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
}

/// Identity of the code (or debugger-like agent) performing an access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accessor {
    pub world: World,
    pub privilege: Privilege,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AccessViolation {
    #[error("address {0:#06x} is not mapped")]
    Unmapped(u32),
    #[error("{kind:?} of {addr:#06x} denied by region permissions")]
    Permission { addr: u32, kind: AccessKind },
    #[error("non-secure access to secure address {0:#06x}")]
    SecureOnly(u32),
    #[error("unprivileged access to privileged address {0:#06x}")]
    PrivilegeRequired(u32),
}

impl AccessViolation {
    pub fn addr(&self) -> u32 {
        match *self {
            AccessViolation::Unmapped(a)
            | AccessViolation::SecureOnly(a)
            | AccessViolation::PrivilegeRequired(a) => a,
            AccessViolation::Permission { addr, .. } => addr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("region {0} overlaps region {1}")]
    Overlap(String, String),
    #[error("stack region {0} is executable")]
    ExecutableStack(String),
    #[error("region {0} wraps the address space")]
    Wraps(String),
}

/// The full address map of one device.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    regions: Vec<MemoryRegion>,
}

impl Memory {
    pub fn new(mut regions: Vec<MemoryRegion>) -> Result<Memory, LayoutError> {
        regions.sort_by_key(|r| r.base);
        for r in &regions {
            if r.base.checked_add(r.len()).is_none() {
                return Err(LayoutError::Wraps(r.name.clone()));
            }
            if r.kind == RegionKind::Stack && r.flags.executable {
                return Err(LayoutError::ExecutableStack(r.name.clone()));
            }
        }
        for pair in regions.windows(2) {
            if pair[0].end() > pair[1].base {
                return Err(LayoutError::Overlap(pair[0].name.clone(), pair[1].name.clone()));
            }
        }
        Ok(Memory { regions })
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    pub fn region_at(&self, addr: u32) -> Option<&MemoryRegion> {
        let idx = self.regions.partition_point(|r| r.base <= addr);
        idx.checked_sub(1)
            .map(|i| &self.regions[i])
            .filter(|r| r.contains(addr))
    }

    fn region_index(&self, addr: u32) -> Option<usize> {
        let idx = self.regions.partition_point(|r| r.base <= addr);
        idx.checked_sub(1).filter(|&i| self.regions[i].contains(addr))
    }

    pub fn region_named(&self, name: &str) -> Option<&MemoryRegion> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn region_named_mut(&mut self, name: &str) -> Option<&mut MemoryRegion> {
        self.regions.iter_mut().find(|r| r.name == name)
    }

    /// Checks an access without performing it.
    pub fn check(&self, addr: u32, kind: AccessKind, who: Accessor) -> Result<usize, AccessViolation> {
        let idx = self.region_index(addr).ok_or(AccessViolation::Unmapped(addr))?;
        let r = &self.regions[idx];
        if r.world == World::Secure && who.world == World::NonSecure {
            return Err(AccessViolation::SecureOnly(addr));
        }
        if who.privilege < r.min_privilege {
            return Err(AccessViolation::PrivilegeRequired(addr));
        }
        let allowed = match kind {
            AccessKind::Read => r.flags.readable,
            AccessKind::Write => r.flags.writable,
            AccessKind::Fetch => r.flags.executable,
        };
        if !allowed {
            return Err(AccessViolation::Permission { addr, kind });
        }
        Ok(idx)
    }

    pub fn read(&self, addr: u32, kind: AccessKind, who: Accessor) -> Result<u32, AccessViolation> {
        let idx = self.check(addr, kind, who)?;
        let r = &self.regions[idx];
        Ok(r.contents[(addr - r.base) as usize])
    }

    pub fn write(&mut self, addr: u32, value: u32, who: Accessor) -> Result<(), AccessViolation> {
        let idx = self.check(addr, AccessKind::Write, who)?;
        let r = &mut self.regions[idx];
        r.contents[(addr - r.base) as usize] = value;
        Ok(())
    }

    /// Unchecked read used by tooling and tests. `None` if unmapped.
    pub fn peek(&self, addr: u32) -> Option<u32> {
        self.region_at(addr).map(|r| r.contents[(addr - r.base) as usize])
    }

    /// Unchecked write used by the secure side when it edits non-secure state.
    pub fn poke(&mut self, addr: u32, value: u32) -> Option<()> {
        let idx = self.region_index(addr)?;
        let r = &mut self.regions[idx];
        r.contents[(addr - r.base) as usize] = value;
        Some(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(name: &str, kind: RegionKind, base: u32, len: usize, flags: RegionFlags, world: World) -> MemoryRegion {
        MemoryRegion {
            name: name.into(),
            kind,
            base,
            flags,
            world,
            min_privilege: Privilege::Unprivileged,
            contents: vec![0; len],
        }
    }

    fn ns(privilege: Privilege) -> Accessor {
        Accessor { world: World::NonSecure, privilege }
    }

    #[test]
    fn overlapping_regions_rejected() {
        let err = Memory::new(vec![
            region("a", RegionKind::Data, 0x100, 0x10, RegionFlags::RW, World::NonSecure),
            region("b", RegionKind::Data, 0x108, 0x10, RegionFlags::RW, World::NonSecure),
        ])
        .unwrap_err();
        assert_eq!(err, LayoutError::Overlap("a".into(), "b".into()));
    }

    #[test]
    fn executable_stack_rejected() {
        let mut s = region("stack", RegionKind::Stack, 0, 4, RegionFlags::RW, World::NonSecure);
        s.flags.executable = true;
        assert!(matches!(Memory::new(vec![s]), Err(LayoutError::ExecutableStack(_))));
    }

    #[test]
    fn permissions_world_and_privilege_enforced() {
        let mut secure = region("s", RegionKind::Data, 0x0, 0x10, RegionFlags::RW, World::Secure);
        secure.min_privilege = Privilege::Privileged;
        let mut mem = Memory::new(vec![
            secure,
            region("code", RegionKind::Code, 0x100, 0x10, RegionFlags::RX, World::NonSecure),
            region("data", RegionKind::Data, 0x200, 0x10, RegionFlags::RW, World::NonSecure),
        ])
        .unwrap();
        let p = ns(Privilege::Privileged);
        assert_eq!(mem.write(0x105, 1, p), Err(AccessViolation::Permission { addr: 0x105, kind: AccessKind::Write }));
        assert_eq!(mem.read(0x3, AccessKind::Read, p), Err(AccessViolation::SecureOnly(0x3)));
        assert_eq!(mem.read(0x300, AccessKind::Read, p), Err(AccessViolation::Unmapped(0x300)));
        assert_eq!(mem.read(0x200, AccessKind::Fetch, p), Err(AccessViolation::Permission { addr: 0x200, kind: AccessKind::Fetch }));
        mem.write(0x20F, 7, ns(Privilege::Unprivileged)).unwrap();
        assert_eq!(mem.peek(0x20F), Some(7));
        let secure_priv = Accessor { world: World::Secure, privilege: Privilege::Privileged };
        let secure_unpriv = Accessor { world: World::Secure, privilege: Privilege::Unprivileged };
        assert!(mem.write(0x1, 9, secure_priv).is_ok());
        assert_eq!(mem.read(0x1, AccessKind::Read, secure_unpriv), Err(AccessViolation::PrivilegeRequired(0x1)));
    }

    #[test]
    fn flag_bits_round_trip() {
        for bits in 0..8u8 {
            assert_eq!(RegionFlags::from_bits(bits).unwrap().bits(), bits);
        }
        assert_eq!(RegionFlags::from_bits(8), None);
        assert_eq!(RegionFlags::RX.to_string(), "r-x");
    }
}
