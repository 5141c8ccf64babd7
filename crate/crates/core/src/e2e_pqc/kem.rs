//! KEM plug-in interface and a deterministic, non-cryptographic stub.

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::simcore::RngStream;

pub const TAG_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KemError {
    #[error("suite `{ours}` cannot process material from another suite")]
    IncompatibleSuite { ours: String },
    #[error("malformed {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey(pub Vec<u8>);

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub Vec<u8>);

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext(pub Vec<u8>);

pub trait Kem: Send + Sync {
    fn suite_id(&self) -> &str;
    fn keygen(&self, rng: &mut RngStream) -> (PublicKey, SecretKey);
    fn encaps(&self, pk: &PublicKey, rng: &mut RngStream) -> Result<(Ciphertext, [u8; 32]), KemError>;
    fn decaps(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<[u8; 32], KemError>;
}

/// Hash-based stand-in for a real KEM. Offers no secrecy whatsoever (the shared
/// secret is computable from public data); it only models correctness and suite
/// incompatibility.
#[derive(Debug, Clone)]
pub struct StubKem {
    suite: String,
    tag: [u8; TAG_LEN],
}

impl StubKem {
    pub fn new(suite: impl Into<String>) -> Self {
        let suite = suite.into();
        let digest = Sha256::new().chain_update(b"stub-kem-tag").chain_update(suite.as_bytes()).finalize();
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&digest[..TAG_LEN]);
        StubKem { suite, tag }
    }

    fn public_from_secret(&self, sk: &[u8]) -> Vec<u8> {
        let mut pk = self.tag.to_vec();
        pk.extend(Sha256::new().chain_update(b"stub-kem-pk").chain_update(self.suite.as_bytes()).chain_update(sk).finalize());
        pk
    }

    fn shared(&self, pk: &[u8], r: &[u8]) -> [u8; 32] {
        Sha256::new().chain_update(self.suite.as_bytes()).chain_update(pk).chain_update(r).finalize().into()
    }

    fn check_tag(&self, bytes: &[u8], what: &'static str) -> Result<(), KemError> {
        if bytes.len() != TAG_LEN + 32 {
            return Err(KemError::Malformed(what));
        }
        if bytes[..TAG_LEN] != self.tag {
            return Err(KemError::IncompatibleSuite { ours: self.suite.clone() });
        }
        Ok(())
    }
}

impl Kem for StubKem {
    fn suite_id(&self) -> &str {
        &self.suite
    }

    fn keygen(&self, rng: &mut RngStream) -> (PublicKey, SecretKey) {
        let sk = rng.bytes32().to_vec();
        (PublicKey(self.public_from_secret(&sk)), SecretKey(sk))
    }

    fn encaps(&self, pk: &PublicKey, rng: &mut RngStream) -> Result<(Ciphertext, [u8; 32]), KemError> {
        self.check_tag(&pk.0, "public key")?;
        let r = rng.bytes32();
        let mut ct = self.tag.to_vec();
        ct.extend_from_slice(&r);
        Ok((Ciphertext(ct), self.shared(&pk.0, &r)))
    }

    fn decaps(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<[u8; 32], KemError> {
        self.check_tag(&ct.0, "ciphertext")?;
        if sk.0.len() != 32 {
            return Err(KemError::Malformed("secret key"));
        }
        let pk = self.public_from_secret(&sk.0);
        Ok(self.shared(&pk, &ct.0[TAG_LEN..]))
    }
}

/// KEM implementations keyed by suite id.
#[derive(Clone)]
pub struct KemRegistry {
    suites: BTreeMap<String, Arc<dyn Kem>>,
}

impl Default for KemRegistry {
    fn default() -> Self {
        let mut r = KemRegistry::empty();
        r.register(Arc::new(StubKem::new("stub-v1")));
        r.register(Arc::new(StubKem::new("stub-v2")));
        r
    }
}

impl KemRegistry {
    pub fn empty() -> Self {
        KemRegistry { suites: BTreeMap::new() }
    }

    pub fn register(&mut self, kem: Arc<dyn Kem>) {
        self.suites.insert(kem.suite_id().to_owned(), kem);
    }

    pub fn get(&self, suite: &str) -> Option<Arc<dyn Kem>> {
        self.suites.get(suite).cloned()
    }

    pub fn contains(&self, suite: &str) -> bool {
        self.suites.contains_key(suite)
    }

    pub fn suite_ids(&self) -> impl Iterator<Item = &str> {
        self.suites.keys().map(String::as_str)
    }
}
