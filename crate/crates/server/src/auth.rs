//! Constant-time shared-secret checks.
//!
//! Keys are stored as SHA-256 digests. A presented key is hashed and compared
//! against every stored digest with `ct_eq`, so the work done does not depend
//! on the presented key's length, on where it first differs, or on which
//! stored key (if any) it matches.

use sha2::{Digest, Sha256};
use subtle::{Choice, ConstantTimeEq};

#[derive(Clone)]
pub struct KeySet {
    digests: Vec<[u8; 32]>,
}

impl std::fmt::Debug for KeySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeySet").field("keys", &self.digests.len()).finish()
    }
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl KeySet {
    pub fn new<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        Self {
            digests: keys.into_iter().map(|k| digest(k.as_ref())).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    /// True when `presented` equals one of the stored keys. A missing key is
    /// hashed as empty input and fails after the same comparisons.
    pub fn verify(&self, presented: Option<&[u8]>) -> bool {
        let candidate = digest(presented.unwrap_or_default());
        let mut matched = Choice::from(0);
        for d in &self.digests {
            matched |= d.ct_eq(&candidate);
        }
        bool::from(matched & Choice::from(u8::from(presented.is_some())))
    }
}
