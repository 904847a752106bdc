//! Cryptographic contracts: SHA-256 digests, 256-bit random strings, Ed25519
//! signatures and sealed-box envelope encryption (X25519 + XSalsa20-Poly1305).

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const RANDOM_STRING_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const PUBLIC_KEY_LEN: usize = 1 + 32 + 32;
pub const SECRET_KEY_LEN: usize = 1 + 32 + 32;
/// Bytes added by [`seal_to_enclave`]: ephemeral public key plus tag.
pub const ENVELOPE_OVERHEAD: usize = 32 + 16;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("xor operands differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("envelope failed authentication")]
    Authentication,
    #[error("entropy source failure: {0}")]
    Entropy(String),
    #[error("private key of role {0:?} may not leave the trusted boundary")]
    NotExportable(KeyRole),
    #[error("invalid hex: {0}")]
    Hex(#[from] hex::FromHexError),
}

/// A SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// A 256-bit random string drawn inside the trusted boundary.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomString(pub [u8; RANDOM_STRING_LEN]);

impl RandomString {
    pub fn as_bytes(&self) -> &[u8; RANDOM_STRING_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let mut out = [0u8; RANDOM_STRING_LEN];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }
}

impl fmt::Debug for RandomString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RandomString({})", self.to_hex())
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 over the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Bytewise XOR of two 32-byte strings.
pub fn xor(a: &[u8], b: &[u8]) -> Result<[u8; 32], CryptoError> {
    if a.len() != 32 || b.len() != 32 {
        return Err(CryptoError::LengthMismatch(a.len(), b.len()));
    }
    let mut out = [0u8; 32];
    for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(b)) {
        *o = x ^ y;
    }
    Ok(out)
}

pub fn xor32(a: &[u8; 32], b: &[u8; 32]) -> [u8; 32] {
    let mut out = *a;
    xor_into(&mut out, b);
    out
}

pub fn xor_into(acc: &mut [u8; 32], b: &[u8; 32]) {
    for (o, y) in acc.iter_mut().zip(b) {
        *o ^= y;
    }
}

/// 32 bytes from the operating-system CSPRNG.
pub fn fresh_random_string() -> Result<RandomString, CryptoError> {
    let mut out = [0u8; RANDOM_STRING_LEN];
    OsRng
        .try_fill_bytes(&mut out)
        .map_err(|e| CryptoError::Entropy(e.to_string()))?;
    Ok(RandomString(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum KeyRole {
    Enclave = 1,
    Notifier = 2,
    Device = 3,
}

impl KeyRole {
    fn from_byte(b: u8) -> Result<Self, CryptoError> {
        match b {
            1 => Ok(Self::Enclave),
            2 => Ok(Self::Notifier),
            3 => Ok(Self::Device),
            other => Err(CryptoError::MalformedKey(format!("unknown role {other}"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

/// Public half of a [`KeyPair`]: a signature verification key and an
/// envelope encryption key.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    role: KeyRole,
    verifying: VerifyingKey,
    encrypt: crypto_box::PublicKey,
}

impl PublicKey {
    pub fn role(&self) -> KeyRole {
        self.role
    }

    /// `role || ed25519 verifying key || x25519 public key`.
    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        let mut out = [0u8; PUBLIC_KEY_LEN];
        out[0] = self.role as u8;
        out[1..33].copy_from_slice(self.verifying.as_bytes());
        out[33..].copy_from_slice(self.encrypt.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != PUBLIC_KEY_LEN {
            return Err(CryptoError::MalformedKey(format!(
                "public key is {} bytes, expected {PUBLIC_KEY_LEN}",
                bytes.len()
            )));
        }
        let role = KeyRole::from_byte(bytes[0])?;
        let mut vk = [0u8; 32];
        vk.copy_from_slice(&bytes[1..33]);
        let verifying =
            VerifyingKey::from_bytes(&vk).map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
        let mut ek = [0u8; 32];
        ek.copy_from_slice(&bytes[33..]);
        Ok(Self {
            role,
            verifying,
            encrypt: crypto_box::PublicKey::from_bytes(ek),
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Self::from_bytes(&hex::decode(s.trim())?)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PublicKey({:?}, {})",
            self.role,
            hex::encode(&self.verifying.as_bytes()[..8])
        )
    }
}

/// Signing and decryption keys for one principal.
pub struct KeyPair {
    role: KeyRole,
    signing: SigningKey,
    decrypt: crypto_box::SecretKey,
}

impl KeyPair {
    pub fn generate(role: KeyRole) -> Self {
        Self {
            role,
            signing: SigningKey::generate(&mut OsRng),
            decrypt: crypto_box::SecretKey::generate(&mut OsRng),
        }
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }

    pub fn public(&self) -> PublicKey {
        PublicKey {
            role: self.role,
            verifying: self.signing.verifying_key(),
            encrypt: self.decrypt.public_key(),
        }
    }

    pub fn sign(&self, payload: &[u8]) -> Signature {
        Signature(self.signing.sign(payload).to_bytes())
    }

    /// Open an envelope produced by [`seal_to_enclave`] for this key.
    pub fn open(&self, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        self.decrypt
            .unseal(ciphertext)
            .map_err(|_| CryptoError::Authentication)
    }

    /// Secret key material for roles that may persist it outside the
    /// trusted boundary (notifier and device keys).
    pub fn export_secret(&self) -> Result<[u8; SECRET_KEY_LEN], CryptoError> {
        if self.role == KeyRole::Enclave {
            return Err(CryptoError::NotExportable(self.role));
        }
        Ok(self.secret_bytes())
    }

    pub(crate) fn secret_bytes(&self) -> [u8; SECRET_KEY_LEN] {
        let mut out = [0u8; SECRET_KEY_LEN];
        out[0] = self.role as u8;
        out[1..33].copy_from_slice(&self.signing.to_bytes());
        out[33..].copy_from_slice(&self.decrypt.to_bytes());
        out
    }

    pub fn from_secret(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != SECRET_KEY_LEN {
            return Err(CryptoError::MalformedKey(format!(
                "secret key is {} bytes, expected {SECRET_KEY_LEN}",
                bytes.len()
            )));
        }
        let role = KeyRole::from_byte(bytes[0])?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[1..33]);
        let mut dk = [0u8; 32];
        dk.copy_from_slice(&bytes[33..]);
        Ok(Self {
            role,
            signing: SigningKey::from_bytes(&seed),
            decrypt: crypto_box::SecretKey::from_bytes(dk),
        })
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("role", &self.role)
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

pub fn verify(key: &PublicKey, payload: &[u8], sig: &Signature) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verifying.verify_strict(payload, &sig).is_ok()
}

/// Randomized authenticated envelope encryption to `pk`.
pub fn seal_to_enclave(pk: &PublicKey, plaintext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    pk.encrypt
        .seal(&mut OsRng, plaintext)
        .map_err(|e| CryptoError::Entropy(e.to_string()))
}

/// Inverse of [`seal_to_enclave`].
pub fn open_in_enclave(sk: &KeyPair, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    sk.open(ciphertext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn sha256_vectors() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            hash(b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq").to_hex(),
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1"
        );
        assert_ne!(hash(&[0]), hash(&[0, 0]));
        assert_eq!(hash_parts(&[b"ab", b"c"]), hash(b"abc"));
    }

    #[test]
    fn xor_rejects_length_mismatch() {
        assert!(matches!(
            xor(&[0u8; 32], &[0u8; 31]),
            Err(CryptoError::LengthMismatch(32, 31))
        ));
    }

    #[test]
    fn sign_verify_and_tamper() {
        let kp = KeyPair::generate(KeyRole::Enclave);
        let pk = kp.public();
        let payload = [0x5au8; 32];
        let sig = kp.sign(&payload);
        assert!(verify(&pk, &payload, &sig));

        let mut p2 = payload;
        p2[31] ^= 1;
        assert!(!verify(&pk, &p2, &sig));

        let mut s2 = sig;
        s2.0[10] ^= 0x80;
        assert!(!verify(&pk, &payload, &s2));

        let other = KeyPair::generate(KeyRole::Enclave).public();
        assert!(!verify(&other, &payload, &sig));
    }

    #[test]
    fn public_key_round_trip_and_malformed() {
        let kp = KeyPair::generate(KeyRole::Notifier);
        let pk = kp.public();
        assert_eq!(PublicKey::from_bytes(&pk.to_bytes()).unwrap(), pk);
        assert!(PublicKey::from_bytes(&[1u8; 10]).is_err());
        let mut bad = pk.to_bytes();
        bad[0] = 9;
        assert!(PublicKey::from_bytes(&bad).is_err());
    }

    #[test]
    fn enclave_secret_is_not_exportable() {
        let kp = KeyPair::generate(KeyRole::Enclave);
        assert!(matches!(
            kp.export_secret(),
            Err(CryptoError::NotExportable(KeyRole::Enclave))
        ));
        let dev = KeyPair::generate(KeyRole::Device);
        let restored = KeyPair::from_secret(&dev.export_secret().unwrap()).unwrap();
        assert_eq!(restored.public(), dev.public());
    }

    #[test]
    fn envelope_round_trip_and_rejection() {
        let kp = KeyPair::generate(KeyRole::Enclave);
        let pk = kp.public();
        let m = b"reading bytes".to_vec();
        let c1 = seal_to_enclave(&pk, &m).unwrap();
        let c2 = seal_to_enclave(&pk, &m).unwrap();
        assert_ne!(c1, c2);
        assert_eq!(c1.len(), m.len() + ENVELOPE_OVERHEAD);
        assert_eq!(open_in_enclave(&kp, &c1).unwrap(), m);

        assert!(matches!(
            open_in_enclave(&kp, &c1[..c1.len() - 1]),
            Err(CryptoError::Authentication)
        ));
        let mut flipped = c1.clone();
        flipped[40] ^= 1;
        assert!(open_in_enclave(&kp, &flipped).is_err());
        let stranger = KeyPair::generate(KeyRole::Enclave);
        assert!(open_in_enclave(&stranger, &c1).is_err());
    }

    #[test]
    fn random_strings_are_unique() {
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let g = fresh_random_string().unwrap();
            assert_eq!(g.as_bytes().len(), 32);
            assert!(seen.insert(g.0));
        }
    }

    #[test]
    fn random_string_bit_balance() {
        // 1M draws of 256 bits: mean 1.28e8 ones, sigma = sqrt(2.56e8 * 0.25) = 8000.
        let draws = 1_000_000u64;
        let mut ones = 0u64;
        for _ in 0..draws {
            let g = fresh_random_string().unwrap();
            ones += g.0.iter().map(|b| b.count_ones() as u64).sum::<u64>();
        }
        let n = (draws * 256) as f64;
        let sigma = (n * 0.25).sqrt();
        let dev = (ones as f64 - n / 2.0).abs();
        assert!(dev <= 3.0 * sigma, "ones={ones} dev={dev} sigma={sigma}");
    }

    proptest! {
        #[test]
        fn xor_algebra(a in any::<[u8; 32]>(), b in any::<[u8; 32]>(), c in any::<[u8; 32]>()) {
            prop_assert_eq!(xor32(&a, &a), [0u8; 32]);
            prop_assert_eq!(xor32(&xor32(&a, &b), &b), a);
            prop_assert_eq!(xor32(&a, &b), xor32(&b, &a));
            prop_assert_eq!(xor32(&a, &xor32(&b, &c)), xor32(&xor32(&a, &b), &c));
            prop_assert_eq!(xor(&a, &b).unwrap(), xor32(&a, &b));
        }

        #[test]
        fn signatures_bind_payload(p in proptest::collection::vec(any::<u8>(), 0..64),
                                   q in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assume!(p != q);
            let kp = KeyPair::generate(KeyRole::Enclave);
            let sig = kp.sign(&p);
            prop_assert!(verify(&kp.public(), &p, &sig));
            prop_assert!(!verify(&kp.public(), &q, &sig));
        }
    }
}
