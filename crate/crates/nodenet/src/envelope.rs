//! Sealed segment envelopes.
//!
//! ```text
//! "ACSEG" | version u8 | node_id (u16 len + utf8) | seq u64
//! | wrapped_key (u16 len + bytes) | nonce [12] | ciphertext (u32 len + bytes)
//! ```
//!
//! The content key is a fresh AES-128 key wrapped with RSA-OAEP (SHA-256).
//! The GCM plaintext is `sha256(payload) || payload` and the serialized
//! header is the associated data, so header fields cannot be altered either.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use rand::{CryptoRng, RngCore};
use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPublicKey};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENVELOPE_MAGIC: &[u8; 5] = b"ACSEG";
pub const ENVELOPE_VERSION: u8 = 1;
pub const RSA_BITS: usize = 2048;
const KEY_LEN: usize = 16;
const NONCE_LEN: usize = 12;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeHeader {
    pub version: u8,
    pub node_id: String,
    pub seq: u64,
    pub wrapped_key: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
}

impl EnvelopeHeader {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.node_id.len() + self.wrapped_key.len());
        out.extend_from_slice(ENVELOPE_MAGIC);
        out.push(self.version);
        out.extend_from_slice(&(self.node_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.node_id.as_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&(self.wrapped_key.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.wrapped_key);
        out.extend_from_slice(&self.nonce);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedEnvelope {
    pub header: EnvelopeHeader,
    /// AES-GCM output, tag included.
    pub ciphertext: Vec<u8>,
}

pub fn generate_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> Result<RsaPrivateKey> {
    Ok(RsaPrivateKey::new(rng, RSA_BITS)?)
}

pub fn public_key_der(key: &RsaPublicKey) -> Result<Vec<u8>> {
    Ok(key
        .to_pkcs1_der()
        .map_err(|e| Error::Crypto(e.to_string()))?
        .as_bytes()
        .to_vec())
}

pub fn public_key_from_der(der: &[u8]) -> Result<RsaPublicKey> {
    RsaPublicKey::from_pkcs1_der(der).map_err(|e| Error::Crypto(e.to_string()))
}

pub fn seal_envelope<R: RngCore + CryptoRng>(
    payload: &[u8],
    node_id: &str,
    seq: u64,
    server_key: &RsaPublicKey,
    rng: &mut R,
) -> Result<EncryptedEnvelope> {
    if node_id.len() > u16::MAX as usize {
        return Err(Error::MalformedEnvelope("node id too long".into()));
    }
    let mut key = [0u8; KEY_LEN];
    rng.fill_bytes(&mut key);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let wrapped_key = server_key.encrypt(rng, Oaep::new::<Sha256>(), &key)?;
    let header = EnvelopeHeader {
        version: ENVELOPE_VERSION,
        node_id: node_id.to_string(),
        seq,
        wrapped_key,
        nonce,
    };
    let mut plain = Vec::with_capacity(HASH_LEN + payload.len());
    plain.extend_from_slice(&Sha256::digest(payload));
    plain.extend_from_slice(payload);
    let cipher = Aes128Gcm::new_from_slice(&key).expect("16-byte key");
    let ciphertext = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &plain,
                aad: &header.to_bytes(),
            },
        )
        .map_err(|_| Error::Crypto("encryption failed".into()))?;
    key.fill(0);
    Ok(EncryptedEnvelope { header, ciphertext })
}

/// Returns the payload only when the key unwraps, the tag verifies and the
/// embedded hash matches. Nothing is returned on any failure.
pub fn open_envelope(env: &EncryptedEnvelope, key: &RsaPrivateKey) -> Result<Vec<u8>> {
    let mut content_key = key
        .decrypt(Oaep::new::<Sha256>(), &env.header.wrapped_key)
        .map_err(|_| Error::Authentication)?;
    if content_key.len() != KEY_LEN {
        return Err(Error::Authentication);
    }
    let cipher = Aes128Gcm::new_from_slice(&content_key).expect("16-byte key");
    content_key.fill(0);
    let plain = cipher
        .decrypt(
            Nonce::from_slice(&env.header.nonce),
            Payload {
                msg: &env.ciphertext,
                aad: &env.header.to_bytes(),
            },
        )
        .map_err(|_| Error::Authentication)?;
    if plain.len() < HASH_LEN {
        return Err(Error::HashMismatch);
    }
    let (hash, payload) = plain.split_at(HASH_LEN);
    if Sha256::digest(payload).as_slice() != hash {
        return Err(Error::HashMismatch);
    }
    Ok(payload.to_vec())
}

impl EncryptedEnvelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes();
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedEnvelope(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= b.len()).ok_or_else(|| bad("truncated"))?;
            let s = &b[pos..end];
            pos = end;
            Ok(s)
        };
        if take(5)? != ENVELOPE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = take(1)?[0];
        if version != ENVELOPE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let id_len = u16::from_le_bytes(take(2)?.try_into().expect("2")) as usize;
        let node_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("node id is not utf-8"))?;
        let seq = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let key_len = u16::from_le_bytes(take(2)?.try_into().expect("2")) as usize;
        let wrapped_key = take(key_len)?.to_vec();
        let nonce: [u8; NONCE_LEN] = take(NONCE_LEN)?.try_into().expect("12");
        let ct_len = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let ciphertext = take(ct_len)?.to_vec();
        if pos != b.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            header: EnvelopeHeader {
                version,
                node_id,
                seq,
                wrapped_key,
                nonce,
            },
            ciphertext,
        })
    }

    /// Serialized size in bytes.
    pub fn size(&self) -> usize {
        5 + 1 + 2 + self.header.node_id.len() + 8 + 2 + self.header.wrapped_key.len() + NONCE_LEN + 4
            + self.ciphertext.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    fn keys() -> &'static (RsaPrivateKey, RsaPrivateKey) {
        static K: OnceLock<(RsaPrivateKey, RsaPrivateKey)> = OnceLock::new();
        K.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            (generate_keypair(&mut rng).unwrap(), generate_keypair(&mut rng).unwrap())
        })
    }

    #[test]
    fn round_trip_megabyte() {
        let (k, _) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let payload: Vec<u8> = (0..1_000_000u32).map(|i| (i * 31 % 251) as u8).collect();
        let env = seal_envelope(&payload, "n1", 3, &k.to_public_key(), &mut rng).unwrap();
        assert_eq!(env.header.wrapped_key.len(), 256);
        let bytes = env.to_bytes();
        assert_eq!(bytes.len(), env.size());
        let back = EncryptedEnvelope::from_bytes(&bytes).unwrap();
        assert_eq!(back, env);
        assert_eq!(open_envelope(&back, k).unwrap(), payload);
    }

    #[test]
    fn wrong_key_and_tampering_fail() {
        let (k, other) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let env = seal_envelope(b"secret audio", "n1", 0, &k.to_public_key(), &mut rng).unwrap();
        assert!(matches!(open_envelope(&env, other), Err(Error::Authentication)));
        let mut tag = env.clone();
        let last = tag.ciphertext.len() - 1;
        tag.ciphertext[last] ^= 1;
        assert!(open_envelope(&tag, k).is_err());
        let mut hdr = env.clone();
        hdr.header.seq = 99;
        assert!(open_envelope(&hdr, k).is_err());
    }

    #[test]
    fn seals_are_unique() {
        let (k, _) = keys();
        let pk = k.to_public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let env = seal_envelope(b"same payload", "n1", 0, &pk, &mut rng).unwrap();
            assert!(seen.insert(env.ciphertext));
        }
    }

    #[test]
    fn public_key_der_round_trip() {
        let (k, _) = keys();
        let pk = k.to_public_key();
        assert_eq!(public_key_from_der(&public_key_der(&pk).unwrap()).unwrap(), pk);
    }

    #[test]
    fn truncated_bytes_are_rejected() {
        let (k, _) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let b = seal_envelope(b"x", "n1", 0, &k.to_public_key(), &mut rng).unwrap().to_bytes();
        for cut in [0, 4, 10, b.len() - 1] {
            assert!(EncryptedEnvelope::from_bytes(&b[..cut]).is_err());
        }
    }
}
