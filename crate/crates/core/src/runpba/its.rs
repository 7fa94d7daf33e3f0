//! Internal trusted storage: an append-only uid → blob store that survives
//! device resets.
//!
//! File layout: `"ITS1"`, entry count (u32 LE), then per entry uid (u64 LE),
//! blob length (u32 LE) and the blob.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const ITS_MAGIC: &[u8; 4] = b"ITS1";

#[derive(Debug, Error)]
pub enum ItsError {
    #[error("storage is read-only")]
    ReadOnly,
    #[error("storage is unavailable")]
    Unavailable,
    #[error("uid {0} already written")]
    UidExists(u64),
    #[error("corrupt storage file: {0}")]
    Corrupt(&'static str),
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Failure mode injected by tests and scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StorageFault {
    #[default]
    None,
    ReadOnly,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backing {
    Memory,
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ItsStore {
    entries: BTreeMap<u64, Vec<u8>>,
    backing: Backing,
    fault: StorageFault,
}

impl ItsStore {
    pub fn in_memory() -> ItsStore {
        ItsStore { entries: BTreeMap::new(), backing: Backing::Memory, fault: StorageFault::None }
    }

    /// Opens or creates a file-backed store.
    pub fn open(path: impl AsRef<Path>) -> Result<ItsStore, ItsError> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            decode(&bytes)?
        } else {
            let mut f = File::create(&path)?;
            f.write_all(ITS_MAGIC)?;
            f.write_all(&0u32.to_le_bytes())?;
            f.sync_all()?;
            BTreeMap::new()
        };
        Ok(ItsStore { entries, backing: Backing::File(path), fault: StorageFault::None })
    }

    pub fn backing(&self) -> &Backing {
        &self.backing
    }

    pub fn set_fault(&mut self, fault: StorageFault) {
        self.fault = fault;
    }

    pub fn fault(&self) -> StorageFault {
        self.fault
    }

    pub fn get(&self, uid: u64) -> Result<Option<&[u8]>, ItsError> {
        if self.fault == StorageFault::Unavailable {
            return Err(ItsError::Unavailable);
        }
        Ok(self.entries.get(&uid).map(Vec::as_slice))
    }

    pub fn entries(&self) -> Result<impl Iterator<Item = (u64, &[u8])>, ItsError> {
        if self.fault == StorageFault::Unavailable {
            return Err(ItsError::Unavailable);
        }
        Ok(self.entries.iter().map(|(k, v)| (*k, v.as_slice())))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes a new entry. Entries are never overwritten.
    pub fn set(&mut self, uid: u64, blob: &[u8]) -> Result<(), ItsError> {
        match self.fault {
            StorageFault::ReadOnly => return Err(ItsError::ReadOnly),
            StorageFault::Unavailable => return Err(ItsError::Unavailable),
            StorageFault::None => {}
        }
        if self.entries.contains_key(&uid) {
            return Err(ItsError::UidExists(uid));
        }
        if let Backing::File(path) = &self.backing {
            let mut f = OpenOptions::new().read(true).write(true).open(path)?;
            f.seek(SeekFrom::End(0))?;
            let mut rec = Vec::with_capacity(12 + blob.len());
            rec.extend_from_slice(&uid.to_le_bytes());
            rec.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            rec.extend_from_slice(blob);
            f.write_all(&rec)?;
            f.seek(SeekFrom::Start(4))?;
            f.write_all(&(self.entries.len() as u32 + 1).to_le_bytes())?;
            f.sync_all()?;
        }
        self.entries.insert(uid, blob.to_vec());
        Ok(())
    }

    /// Serialized form, identical to the backing file contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ITS_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (uid, blob) in &self.entries {
            out.extend_from_slice(&uid.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(blob);
        }
        out
    }
}

fn decode(bytes: &[u8]) -> Result<BTreeMap<u64, Vec<u8>>, ItsError> {
    if bytes.len() < 8 || &bytes[..4] != ITS_MAGIC {
        return Err(ItsError::Corrupt("header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let mut pos = 8;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let hdr = bytes.get(pos..pos + 12).ok_or(ItsError::Corrupt("truncated entry"))?;
        let uid = u64::from_le_bytes(hdr[..8].try_into().unwrap());
        let len = u32::from_le_bytes(hdr[8..].try_into().unwrap()) as usize;
        pos += 12;
        let blob = bytes.get(pos..pos + len).ok_or(ItsError::Corrupt("truncated blob"))?;
        pos += len;
        if entries.insert(uid, blob.to_vec()).is_some() {
            return Err(ItsError::Corrupt("duplicate uid"));
        }
    }
    if pos != bytes.len() {
        return Err(ItsError::Corrupt("trailing bytes"));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("its.bin");
        {
            let mut s = ItsStore::open(&path).unwrap();
            s.set(1, b"abc").unwrap();
            s.set(2, b"").unwrap();
            assert!(matches!(s.set(1, b"x"), Err(ItsError::UidExists(1))));
        }
        let s = ItsStore::open(&path).unwrap();
        assert_eq!(s.get(1).unwrap(), Some(&b"abc"[..]));
        assert_eq!(s.len(), 2);
        assert_eq!(std::fs::read(&path).unwrap(), s.to_bytes());
    }

    #[test]
    fn injected_faults() {
        let mut s = ItsStore::in_memory();
        s.set_fault(StorageFault::ReadOnly);
        assert!(matches!(s.set(1, b"a"), Err(ItsError::ReadOnly)));
        assert!(s.get(1).unwrap().is_none());
        s.set_fault(StorageFault::Unavailable);
        assert!(matches!(s.get(1), Err(ItsError::Unavailable)));
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("its.bin");
        std::fs::write(&path, b"ITS1\x01\x00\x00\x00\x01").unwrap();
        assert!(matches!(ItsStore::open(&path), Err(ItsError::Corrupt(_))));
    }
}
