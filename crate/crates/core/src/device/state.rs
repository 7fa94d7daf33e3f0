//! On-disk device: image, trusted storage, identity and attestation key in
//! one directory, so CLI invocations can share a device across processes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Device, DeviceConfig, DeviceError};
use crate::attestation::{AttestationKey, INSTANCE_ID_LEN};
use crate::machine::image::{ImageError, ProgramImage};
use crate::runpba::{ItsError, ItsStore, LifecycleState};

const IMAGE_FILE: &str = "image.bin";
const ITS_FILE: &str = "its.bin";
const STATE_FILE: &str = "device.json";
const KEY_FILE: &str = "attest.key";

#[derive(Debug, Error)]
pub enum DeviceDirError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Its(#[from] ItsError),
    #[error("device.json: {0}")]
    State(#[from] serde_json::Error),
    #[error("attest.key is not a 32-byte hex key")]
    BadKey,
    #[error("{0} is already provisioned")]
    Exists(PathBuf),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedState {
    pub seed: u64,
    pub config: DeviceConfig,
    pub lifecycle: LifecycleState,
    pub boot_epoch: u32,
    #[serde(with = "hex::serde")]
    pub instance_id: [u8; INSTANCE_ID_LEN],
    pub malfunction: bool,
}

/// A device directory on disk.
#[derive(Debug, Clone)]
pub struct DeviceDir {
    root: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DeviceDirError + '_ {
    move |source| DeviceDirError::Io { path: path.to_path_buf(), source }
}

impl DeviceDir {
    pub fn new(root: impl Into<PathBuf>) -> DeviceDir {
        DeviceDir { root: root.into() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Provisions a fresh device into an empty or missing directory.
    pub fn provision(&self, image: ProgramImage, config: DeviceConfig, seed: u64) -> Result<Device, DeviceDirError> {
        if self.file(STATE_FILE).exists() {
            return Err(DeviceDirError::Exists(self.root.clone()));
        }
        fs::create_dir_all(&self.root).map_err(io(&self.root))?;
        let path = self.file(IMAGE_FILE);
        fs::write(&path, image.to_bytes()).map_err(io(&path))?;
        let its = ItsStore::open(self.file(ITS_FILE))?;
        let dev = Device::provision(image, config, seed, its)?;
        self.save(&dev, seed)?;
        Ok(dev)
    }

    pub fn state(&self) -> Result<PersistedState, DeviceDirError> {
        let path = self.file(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the device as it was last saved. The RNG continues on a stream
    /// selected by the boot epoch, so each boot draws a different PAC key.
    pub fn load(&self) -> Result<Device, DeviceDirError> {
        let st = self.state()?;
        let path = self.file(IMAGE_FILE);
        let image = ProgramImage::from_bytes(&fs::read(&path).map_err(io(&path))?)?;
        let its = ItsStore::open(self.file(ITS_FILE))?;
        let key_path = self.file(KEY_FILE);
        let key = if key_path.exists() {
            let text = fs::read_to_string(&key_path).map_err(io(&key_path))?;
            Some(AttestationKey::from_hex(text.trim()).ok_or(DeviceDirError::BadKey)?)
        } else {
            None
        };
        let mut rng = ChaCha20Rng::seed_from_u64(st.seed);
        rng.set_stream(u64::from(st.boot_epoch) + 1);
        let mut dev =
            Device::assemble_parts(image, st.config, rng, its, st.lifecycle, st.boot_epoch, st.instance_id, key)?;
        dev.partition.malfunction = st.malfunction;
        Ok(dev)
    }

    /// Writes lifecycle, epoch and key state. Storage records are already
    /// on disk; a missing key means it was erased.
    pub fn save(&self, dev: &Device, seed: u64) -> Result<(), DeviceDirError> {
        let st = PersistedState {
            seed,
            config: dev.config,
            lifecycle: dev.lifecycle,
            boot_epoch: dev.boot_epoch,
            instance_id: dev.instance_id(),
            malfunction: dev.partition.malfunction,
        };
        let path = self.file(STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&st)? + "\n").map_err(io(&path))?;
        let key_path = self.file(KEY_FILE);
        match dev.attestation_key() {
            Some(k) => fs::write(&key_path, k.to_hex() + "\n").map_err(io(&key_path))?,
            None if key_path.exists() => fs::remove_file(&key_path).map_err(io(&key_path))?,
            None => {}
        }
        Ok(())
    }

    pub fn key_path(&self) -> PathBuf {
        self.file(KEY_FILE)
    }
}
