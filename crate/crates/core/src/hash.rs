use core::fmt;

use sha2::{Digest, Sha256};

use crate::codec::{self, Decode, DecodeError, Encode, Reader, Writer};

/// Identifier of the digest algorithm, written into every block header.
pub const HASH_ALG_SHA256: u8 = 1;

/// 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash(pub [u8; 32]);

impl Hash {
    /// All-zero hash. Used as the genesis `prev_hash` and as the
    /// "no previous transaction" sentinel.
    pub const ZERO: Hash = Hash([0u8; 32]);

    pub fn digest(bytes: &[u8]) -> Hash {
        Hash(Sha256::digest(bytes).into())
    }

    pub fn of<T: Encode + ?Sized>(value: &T) -> Hash {
        let mut w = Writer::new();
        value.encode(&mut w);
        Hash::digest(w.as_slice())
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 32]
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> alloc::string::String {
        codec::hex(&self.0)
    }

    /// First `n` hex characters, for log lines.
    pub fn short(&self) -> alloc::string::String {
        let mut s = self.to_hex();
        s.truncate(8);
        s
    }
}

impl fmt::Debug for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash({})", self.short())
    }
}

impl fmt::Display for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Encode for Hash {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for Hash {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Hash(r.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            Hash::digest(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn identical_bytes_identical_hash() {
        assert_eq!(Hash::digest(b"iome"), Hash::digest(b"iome"));
        assert_ne!(Hash::digest(b"iome"), Hash::digest(b"iomf"));
    }

    #[test]
    fn zero_sentinel() {
        assert!(Hash::ZERO.is_zero());
        assert!(!Hash::digest(b"").is_zero());
    }
}
