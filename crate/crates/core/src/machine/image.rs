//! Binary program image: a flat list of (region descriptor, payload) records
//! plus a symbol table. All integers are little-endian; every variable-length
//! field carries a 4-byte length.

use std::collections::BTreeMap;

use thiserror::Error;

use super::memory::{MemoryRegion, Privilege, RegionFlags, RegionKind, World};

pub const IMAGE_MAGIC: &[u8; 4] = b"PBIM";
pub const IMAGE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRegion {
    pub name: String,
    pub kind: RegionKind,
    pub base: u32,
    /// Region size in words; `payload` may be shorter and is zero-extended on load.
    pub len: u32,
    pub flags: RegionFlags,
    pub world: World,
    pub min_privilege: Privilege,
    pub payload: Vec<u32>,
}

impl ImageRegion {
    /// Expands the record into a loadable memory region.
    pub fn to_memory_region(&self) -> MemoryRegion {
        let mut contents = self.payload.clone();
        contents.resize(self.len as usize, 0);
        MemoryRegion {
            name: self.name.clone(),
            kind: self.kind,
            base: self.base,
            flags: self.flags,
            world: self.world,
            min_privilege: self.min_privilege,
            contents,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramImage {
    /// Non-secure entry point.
    pub entry: u32,
    /// Initial non-secure stack pointer.
    pub initial_sp: u32,
    /// Address of the infinite-loop stub used by the lockdown path.
    pub hold_stub: u32,
    pub regions: Vec<ImageRegion>,
    pub symbols: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("bad image magic")]
    BadMagic,
    #[error("unsupported image version {0}")]
    UnsupportedVersion(u32),
    #[error("image truncated")]
    Truncated,
    #[error("invalid field in image: {0}")]
    Invalid(&'static str),
}

impl ProgramImage {
    pub fn region(&self, name: &str) -> Option<&ImageRegion> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Number of emitted words in executable regions.
    pub fn code_size(&self) -> u32 {
        self.regions
            .iter()
            .filter(|r| r.flags.executable)
            .map(|r| r.payload.len() as u32)
            .sum()
    }

    /// Emitted word at `addr`, if any region payload covers it.
    pub fn word_at(&self, addr: u32) -> Option<u32> {
        self.regions.iter().find_map(|r| {
            let off = addr.checked_sub(r.base)?;
            r.payload.get(off as usize).copied()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(IMAGE_MAGIC);
        for v in [IMAGE_VERSION, self.entry, self.initial_sp, self.hold_stub, self.regions.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.regions {
            put_str(&mut out, &r.name);
            out.push(match r.kind {
                RegionKind::Code => 0,
                RegionKind::Data => 1,
                RegionKind::Stack => 2,
            });
            out.push(r.flags.bits());
            out.push((r.world == World::Secure) as u8);
            out.push((r.min_privilege == Privilege::Privileged) as u8);
            out.extend_from_slice(&r.base.to_le_bytes());
            out.extend_from_slice(&r.len.to_le_bytes());
            out.extend_from_slice(&(r.payload.len() as u32 * 4).to_le_bytes());
            for w in &r.payload {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.symbols.len() as u32).to_le_bytes());
        for (name, addr) in &self.symbols {
            put_str(&mut out, name);
            out.extend_from_slice(&addr.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ProgramImage, ImageError> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != IMAGE_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let version = rd.u32()?;
        if version != IMAGE_VERSION {
            return Err(ImageError::UnsupportedVersion(version));
        }
        let entry = rd.u32()?;
        let initial_sp = rd.u32()?;
        let hold_stub = rd.u32()?;
        let n = rd.u32()?;
        let mut regions = Vec::new();
        for _ in 0..n {
            let name = rd.string()?;
            let kind = match rd.u8()? {
                0 => RegionKind::Code,
                1 => RegionKind::Data,
                2 => RegionKind::Stack,
                _ => return Err(ImageError::Invalid("region kind")),
            };
            let flags = RegionFlags::from_bits(rd.u8()?).ok_or(ImageError::Invalid("region flags"))?;
            let world = match rd.u8()? {
                0 => World::NonSecure,
                1 => World::Secure,
                _ => return Err(ImageError::Invalid("world")),
            };
            let min_privilege = match rd.u8()? {
                0 => Privilege::Unprivileged,
                1 => Privilege::Privileged,
                _ => return Err(ImageError::Invalid("privilege")),
            };
            let base = rd.u32()?;
            let len = rd.u32()?;
            let nbytes = rd.u32()?;
            if nbytes % 4 != 0 || nbytes / 4 > len {
                return Err(ImageError::Invalid("payload length"));
            }
            let payload = rd
                .take(nbytes as usize)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            regions.push(ImageRegion { name, kind, base, len, flags, world, min_privilege, payload });
        }
        let nsym = rd.u32()?;
        let mut symbols = BTreeMap::new();
        for _ in 0..nsym {
            let name = rd.string()?;
            symbols.insert(name, rd.u32()?);
        }
        if rd.pos != bytes.len() {
            return Err(ImageError::Invalid("trailing bytes"));
        }
        Ok(ProgramImage { entry, initial_sp, hold_stub, regions, symbols })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        let end = self.pos.checked_add(n).ok_or(ImageError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(ImageError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ImageError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ImageError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ImageError::Invalid("utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ProgramImage {
        ProgramImage {
            entry: 0x1000,
            initial_sp: 0x63F0,
            hold_stub: 0x1004,
            regions: vec![ImageRegion {
                name: "code".into(),
                kind: RegionKind::Code,
                base: 0x1000,
                len: 0x10,
                flags: RegionFlags::RX,
                world: World::NonSecure,
                min_privilege: Privilege::Unprivileged,
                payload: vec![1, 2, 3],
            }],
            symbols: [("main".to_string(), 0x1000)].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip() {
        let img = sample();
        assert_eq!(ProgramImage::from_bytes(&img.to_bytes()).unwrap(), img);
    }

    #[test]
    fn every_truncation_rejected() {
        let bytes = sample().to_bytes();
        for n in 0..bytes.len() {
            assert!(ProgramImage::from_bytes(&bytes[..n]).is_err(), "prefix {n} accepted");
        }
    }

    #[test]
    fn load_zero_extends() {
        let r = sample().regions[0].to_memory_region();
        assert_eq!(r.contents.len(), 0x10);
        assert_eq!(&r.contents[..4], &[1, 2, 3, 0]);
    }
}
