//! Length-prefixed framing and the two sides of the challenge-response
//! exchange. Every message is a 4-byte big-endian length followed by the
//! payload. Message 1 carries the nonce, message 2 the token.

use std::io::{self, Read, Write};

use rand::RngCore;

use super::{verify_token, AttestError, AttestationToken, Authenticator, Nonce, VerifiedClaims, NONCE_LEN};

/// Largest frame either side accepts.
pub const MAX_FRAME: usize = 4096;

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<(), AttestError> {
    let len = u32::try_from(payload.len()).map_err(|_| AttestError::MalformedToken("frame too large"))?;
    w.write_all(&len.to_be_bytes()).map_err(closed)?;
    w.write_all(payload).map_err(closed)?;
    w.flush().map_err(closed)?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, AttestError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(closed)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(AttestError::MalformedToken("frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(closed)?;
    Ok(buf)
}

fn closed(e: io::Error) -> AttestError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted => AttestError::TransportClosed,
        _ => AttestError::Io(e),
    }
}

/// Verifier side: sends a fresh nonce, reads the token and verifies it.
pub fn challenge_response<T: Read + Write>(
    transport: &mut T,
    key: &dyn Authenticator,
    rng: &mut impl RngCore,
) -> Result<VerifiedClaims, AttestError> {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    write_frame(transport, &nonce)?;
    let token = read_frame(transport)?;
    verify_token(&token, &nonce, key)
}

/// Device side: answers one challenge with the token `build` produces.
/// A build error is reported to the verifier by closing without a reply.
pub fn serve_challenge<T: Read + Write>(
    transport: &mut T,
    build: impl FnOnce(&Nonce) -> Result<AttestationToken, AttestError>,
) -> Result<AttestationToken, AttestError> {
    let msg = read_frame(transport)?;
    let nonce: Nonce = msg.as_slice().try_into().map_err(|_| AttestError::MalformedToken("nonce length"))?;
    let token = build(&nonce)?;
    write_frame(transport, &token.to_bytes())?;
    Ok(token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{build_token, AttestationKey, Evidence};
    use crate::machine::pac::PacbtiControl;
    use crate::runpba::{LifecycleState, RunPbaStatus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::os::unix::net::UnixStream;

    fn evidence(lifecycle: LifecycleState) -> Evidence {
        Evidence {
            lifecycle,
            status: RunPbaStatus { runtime_failure: false, malfunction: false, control: PacbtiControl::ALL },
            instance_id: [1; 16],
            boot_epoch: 0,
            fault_count: 0,
        }
    }

    #[test]
    fn loopback_exchange() {
        let key = AttestationKey([5; 32]);
        let (mut a, mut b) = UnixStream::pair().unwrap();
        let claims = std::thread::scope(|s| {
            let k = key.clone();
            s.spawn(move || {
                serve_challenge(&mut b, |n| build_token(&evidence(LifecycleState::NspeCompromised), n, Some(&k)))
            });
            challenge_response(&mut a, &key, &mut ChaCha20Rng::seed_from_u64(1)).unwrap()
        });
        assert!(claims.lifecycle.runtime_failure);
    }

    #[test]
    fn truncated_token_is_malformed() {
        let key = AttestationKey([5; 32]);
        let (mut a, mut b) = UnixStream::pair().unwrap();
        let res = std::thread::scope(|s| {
            s.spawn(move || {
                let nonce = read_frame(&mut b).unwrap();
                let mut t = build_token(&evidence(LifecycleState::Secured), &nonce.try_into().unwrap(), Some(&AttestationKey([5; 32])))
                    .unwrap()
                    .to_bytes()
                    .to_vec();
                t.truncate(60);
                write_frame(&mut b, &t).unwrap();
            });
            challenge_response(&mut a, &key, &mut ChaCha20Rng::seed_from_u64(2))
        });
        assert!(matches!(res, Err(AttestError::MalformedToken(_))));
    }

    #[test]
    fn closed_mid_frame() {
        let key = AttestationKey([5; 32]);
        let (mut a, mut b) = UnixStream::pair().unwrap();
        let res = std::thread::scope(|s| {
            s.spawn(move || {
                read_frame(&mut b).unwrap();
                b.write_all(&[0, 0, 0, 94, 1, 2, 3]).unwrap();
                drop(b);
            });
            challenge_response(&mut a, &key, &mut ChaCha20Rng::seed_from_u64(3))
        });
        assert!(matches!(res, Err(AttestError::TransportClosed)));
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut cur = io::Cursor::new(vec![0xFF, 0xFF, 0xFF, 0xFF]);
        assert!(matches!(read_frame(&mut cur), Err(AttestError::MalformedToken(_))));
    }
}
