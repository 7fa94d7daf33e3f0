//! Lifecycle claim codec, attestation tokens and the nonce challenge-response
//! exchange.
//!
//! Token wire format (94 bytes, big-endian integers):
//!
//! ```text
//! "RPB1" | nonce[32] | instance_id[16] | lifecycle u16 | boot_epoch u32 | fault_count u32 | tag[32]
//! ```

pub mod transport;

use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::machine::pac::PacbtiControl;
use crate::runpba::{LifecycleState, RunPbaStatus};
pub use transport::{challenge_response, read_frame, serve_challenge, write_frame, MAX_FRAME};

pub const TOKEN_MAGIC: &[u8; 4] = b"RPB1";
pub const NONCE_LEN: usize = 32;
pub const INSTANCE_ID_LEN: usize = 16;
pub const TAG_LEN: usize = 32;
pub const CLAIMS_LEN: usize = 4 + NONCE_LEN + INSTANCE_ID_LEN + 2 + 4 + 4;
pub const TOKEN_LEN: usize = CLAIMS_LEN + TAG_LEN;

pub type Nonce = [u8; NONCE_LEN];

/// 16-bit security lifecycle claim: PSA state in the low byte, RunPBA status
/// bits from bit 15 downwards, bits 9..8 reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SecurityLifecycleClaim {
    pub psa_state: u8,
    pub runtime_failure: bool,
    pub runpba_malfunction: bool,
    pub pac_priv: bool,
    pub pac_unpriv: bool,
    pub bti_priv: bool,
    pub bti_unpriv: bool,
}

pub mod claim_bits {
    pub const RUNTIME_FAILURE: u16 = 1 << 15;
    pub const MALFUNCTION: u16 = 1 << 14;
    pub const PAC_PRIV: u16 = 1 << 13;
    pub const PAC_UNPRIV: u16 = 1 << 12;
    pub const BTI_PRIV: u16 = 1 << 11;
    pub const BTI_UNPRIV: u16 = 1 << 10;
    pub const RESERVED: u16 = 0b11 << 8;
}

impl SecurityLifecycleClaim {
    pub fn from_status(state: LifecycleState, status: &RunPbaStatus) -> SecurityLifecycleClaim {
        SecurityLifecycleClaim {
            psa_state: state.code(),
            runtime_failure: status.runtime_failure || state == LifecycleState::NspeCompromised,
            runpba_malfunction: status.malfunction,
            pac_priv: status.control.pac_priv,
            pac_unpriv: status.control.pac_unpriv,
            bti_priv: status.control.bti_priv,
            bti_unpriv: status.control.bti_unpriv,
        }
    }

    pub fn encode(&self) -> u16 {
        use claim_bits::*;
        let bit = |set: bool, b: u16| if set { b } else { 0 };
        u16::from(self.psa_state)
            | bit(self.runtime_failure, RUNTIME_FAILURE)
            | bit(self.runpba_malfunction, MALFUNCTION)
            | bit(self.pac_priv, PAC_PRIV)
            | bit(self.pac_unpriv, PAC_UNPRIV)
            | bit(self.bti_priv, BTI_PRIV)
            | bit(self.bti_unpriv, BTI_UNPRIV)
    }

    /// `None` if a reserved bit is set.
    pub fn decode(v: u16) -> Option<SecurityLifecycleClaim> {
        use claim_bits::*;
        if v & RESERVED != 0 {
            return None;
        }
        Some(SecurityLifecycleClaim {
            psa_state: v as u8,
            runtime_failure: v & RUNTIME_FAILURE != 0,
            runpba_malfunction: v & MALFUNCTION != 0,
            pac_priv: v & PAC_PRIV != 0,
            pac_unpriv: v & PAC_UNPRIV != 0,
            bti_priv: v & BTI_PRIV != 0,
            bti_unpriv: v & BTI_UNPRIV != 0,
        })
    }

    pub fn control(&self) -> PacbtiControl {
        PacbtiControl {
            pac_priv: self.pac_priv,
            pac_unpriv: self.pac_unpriv,
            bti_priv: self.bti_priv,
            bti_unpriv: self.bti_unpriv,
        }
    }

    pub fn lifecycle(&self) -> Option<LifecycleState> {
        LifecycleState::from_code(self.psa_state)
    }
}

/// Claim set of one token, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    #[serde(with = "hex_bytes")]
    pub nonce: Nonce,
    #[serde(with = "hex_bytes")]
    pub instance_id: [u8; INSTANCE_ID_LEN],
    pub lifecycle: SecurityLifecycleClaim,
    pub boot_epoch: u32,
    pub fault_count: u32,
}

/// Claims that passed authenticator and nonce checks.
pub type VerifiedClaims = Claims;

impl Claims {
    pub fn encode(&self) -> [u8; CLAIMS_LEN] {
        let mut out = [0u8; CLAIMS_LEN];
        let mut pos = 0;
        for part in [
            &TOKEN_MAGIC[..],
            &self.nonce,
            &self.instance_id,
            &self.lifecycle.encode().to_be_bytes(),
            &self.boot_epoch.to_be_bytes(),
            &self.fault_count.to_be_bytes(),
        ] {
            out[pos..pos + part.len()].copy_from_slice(part);
            pos += part.len();
        }
        out
    }

    pub fn decode(b: &[u8; CLAIMS_LEN]) -> Result<Claims, AttestError> {
        if &b[..4] != TOKEN_MAGIC {
            return Err(AttestError::MalformedToken("magic"));
        }
        let lc = u16::from_be_bytes([b[52], b[53]]);
        Ok(Claims {
            nonce: b[4..36].try_into().unwrap(),
            instance_id: b[36..52].try_into().unwrap(),
            lifecycle: SecurityLifecycleClaim::decode(lc).ok_or(AttestError::MalformedToken("reserved claim bits"))?,
            boot_epoch: u32::from_be_bytes(b[54..58].try_into().unwrap()),
            fault_count: u32::from_be_bytes(b[58..62].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Error)]
pub enum AttestError {
    #[error("device is decommissioned")]
    Decommissioned,
    #[error("attestation key is missing")]
    KeyMissing,
    #[error("authenticator does not match")]
    BadAuthenticator,
    #[error("nonce does not match the challenge")]
    NonceMismatch,
    #[error("malformed token: {0}")]
    MalformedToken(&'static str),
    #[error("transport closed")]
    TransportClosed,
    #[error("transport error: {0}")]
    Io(#[from] std::io::Error),
}

/// Produces and checks token authenticators. Kept abstract so a signature
/// scheme can replace the MAC.
pub trait Authenticator {
    fn tag(&self, msg: &[u8]) -> [u8; TAG_LEN];
    fn check(&self, msg: &[u8], tag: &[u8; TAG_LEN]) -> bool;
}

/// Symmetric device attestation key (HMAC-SHA256).
#[derive(Clone, PartialEq, Eq)]
pub struct AttestationKey(pub [u8; 32]);

impl fmt::Debug for AttestationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AttestationKey(<redacted>)")
    }
}

impl AttestationKey {
    pub fn random(rng: &mut impl RngCore) -> AttestationKey {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        AttestationKey(k)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<AttestationKey> {
        hex::decode(s.trim()).ok()?.try_into().ok().map(AttestationKey)
    }

    fn mac(&self) -> Hmac<Sha256> {
        <Hmac<Sha256> as KeyInit>::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl Authenticator for AttestationKey {
    fn tag(&self, msg: &[u8]) -> [u8; TAG_LEN] {
        let mut m = self.mac();
        m.update(msg);
        m.finalize().into_bytes().into()
    }

    fn check(&self, msg: &[u8], tag: &[u8; TAG_LEN]) -> bool {
        let mut m = self.mac();
        m.update(msg);
        m.verify_slice(tag).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttestationToken {
    pub claims: Claims,
    pub authenticator: [u8; TAG_LEN],
}

impl AttestationToken {
    pub fn to_bytes(&self) -> [u8; TOKEN_LEN] {
        let mut out = [0u8; TOKEN_LEN];
        out[..CLAIMS_LEN].copy_from_slice(&self.claims.encode());
        out[CLAIMS_LEN..].copy_from_slice(&self.authenticator);
        out
    }
}

/// Device-side inputs sampled at token time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evidence {
    pub lifecycle: LifecycleState,
    pub status: RunPbaStatus,
    pub instance_id: [u8; INSTANCE_ID_LEN],
    pub boot_epoch: u32,
    pub fault_count: u32,
}

pub fn build_token(ev: &Evidence, nonce: &Nonce, key: Option<&dyn Authenticator>) -> Result<AttestationToken, AttestError> {
    if ev.lifecycle == LifecycleState::Decommissioned {
        return Err(AttestError::Decommissioned);
    }
    let key = key.ok_or(AttestError::KeyMissing)?;
    let claims = Claims {
        nonce: *nonce,
        instance_id: ev.instance_id,
        lifecycle: SecurityLifecycleClaim::from_status(ev.lifecycle, &ev.status),
        boot_epoch: ev.boot_epoch,
        fault_count: ev.fault_count,
    };
    let authenticator = key.tag(&claims.encode());
    Ok(AttestationToken { claims, authenticator })
}

/// Checks the authenticator first, then decodes, then compares the nonce.
pub fn verify_token(bytes: &[u8], expected_nonce: &Nonce, key: &dyn Authenticator) -> Result<VerifiedClaims, AttestError> {
    if bytes.len() != TOKEN_LEN {
        return Err(AttestError::MalformedToken("length"));
    }
    let body: &[u8; CLAIMS_LEN] = bytes[..CLAIMS_LEN].try_into().unwrap();
    let tag: &[u8; TAG_LEN] = bytes[CLAIMS_LEN..].try_into().unwrap();
    if !key.check(body, tag) {
        return Err(AttestError::BadAuthenticator);
    }
    let claims = Claims::decode(body)?;
    if &claims.nonce != expected_nonce {
        return Err(AttestError::NonceMismatch);
    }
    Ok(claims)
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s)
            .map_err(D::Error::custom)?
            .try_into()
            .map_err(|_| D::Error::custom("wrong length"))
    }
}
