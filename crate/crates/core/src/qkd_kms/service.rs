//! Thread-safe KMS front-end with ETSI GS QKD 014 request/response bodies.
//!
//! The HTTP layer lives in the CLI crate; everything it needs to answer a request
//! (JSON shapes, error mapping, serialized access to the key buffers) is here.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use super::{KeyRecord, KmsError, QkdLinkConfig, QkdLinkState, KEY_SIZE_BITS};
use crate::netmodel::{LinkId, NodeId};
use crate::simcore::{ComponentId, RngStream};

/// `kms-serve --link-config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    /// SAE identity assumed when a request carries none.
    pub local: NodeId,
    #[serde(default)]
    pub seed: u64,
    /// Keys generated per link at start-up.
    #[serde(default)]
    pub prefill: usize,
    pub links: Vec<QkdLinkConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub stored_key_count: usize,
    pub key_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    #[serde(rename = "key_ID")]
    pub key_id: String,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyContainer {
    pub keys: Vec<KeyEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncKeysRequest {
    #[serde(default)]
    pub number: Option<usize>,
    #[serde(default)]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyIdEntry {
    #[serde(rename = "key_ID")]
    pub key_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecKeysRequest {
    #[serde(rename = "key_IDs")]
    pub key_ids: Vec<KeyIdEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("no QKD link between {local} and {peer}")]
    UnknownPeer { local: NodeId, peer: NodeId },
    #[error("unsupported key size {0}; only {KEY_SIZE_BITS} bits are served")]
    BadKeySize(usize),
    #[error("malformed key id `{0}`")]
    MalformedKeyId(String),
    #[error(transparent)]
    Kms(#[from] KmsError),
}

impl ServiceError {
    /// HTTP status code for this error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::UnknownPeer { .. } => 404,
            ServiceError::BadKeySize(_) | ServiceError::MalformedKeyId(_) => 400,
            ServiceError::Kms(KmsError::UnknownKeyId(_)) => 400,
            ServiceError::Kms(KmsError::NotAnEndpoint { .. }) => 401,
            ServiceError::Kms(KmsError::NoKeyAvailable(_)) => 503,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { message: self.to_string() }
    }
}

struct Inner {
    links: BTreeMap<LinkId, (QkdLinkState, RngStream)>,
    last_tick: Instant,
}

/// KMS store shared across request handlers. All mutation goes through one mutex,
/// so a key id can be redeemed at most once even under concurrent requests.
pub struct SharedKms {
    local: NodeId,
    inner: Mutex<Inner>,
}

impl SharedKms {
    pub fn new(cfg: &ServeConfig) -> Self {
        let mut links = BTreeMap::new();
        for lc in &cfg.links {
            let mut state = QkdLinkState::from_config(lc);
            let mut rng = RngStream::for_component(cfg.seed, &ComponentId::new(format!("kms:{}", lc.id())));
            for _ in 0..cfg.prefill.min(lc.cap) {
                let mut id = [0u8; 16];
                rng.fill(&mut id);
                let key_id = uuid::Builder::from_random_bytes(id).into_uuid();
                state.push_record(KeyRecord { key_id, key: rng.bytes32() });
            }
            links.insert(lc.id(), (state, rng));
        }
        SharedKms {
            local: cfg.local.clone(),
            inner: Mutex::new(Inner { links, last_tick: Instant::now() }),
        }
    }

    pub fn local(&self) -> &NodeId {
        &self.local
    }

    fn with_link<T>(
        &self,
        caller: Option<&NodeId>,
        peer: &NodeId,
        f: impl FnOnce(&NodeId, &mut QkdLinkState) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let caller = caller.unwrap_or(&self.local);
        let mut inner = self.inner.lock().expect("kms mutex poisoned");
        let now = Instant::now();
        let dt = now.duration_since(inner.last_tick).as_millis() as u64;
        if dt > 0 {
            inner.last_tick = now;
            for (state, rng) in inner.links.values_mut() {
                state.tick_generate(dt, rng);
            }
        }
        let id = LinkId::new(caller, peer);
        let (state, _) = inner
            .links
            .get_mut(&id)
            .ok_or_else(|| ServiceError::UnknownPeer { local: caller.clone(), peer: peer.clone() })?;
        f(caller, state)
    }

    pub fn status(&self, caller: Option<&NodeId>, peer: &NodeId) -> Result<StatusResponse, ServiceError> {
        self.with_link(caller, peer, |me, st| {
            Ok(StatusResponse { stored_key_count: st.available_for(me)?, key_size: KEY_SIZE_BITS })
        })
    }

    pub fn enc_keys(
        &self,
        caller: Option<&NodeId>,
        peer: &NodeId,
        req: &EncKeysRequest,
    ) -> Result<KeyContainer, ServiceError> {
        if let Some(size) = req.size {
            if size != KEY_SIZE_BITS {
                return Err(ServiceError::BadKeySize(size));
            }
        }
        let number = req.number.unwrap_or(1).max(1);
        self.with_link(caller, peer, |me, st| {
            if st.available_for(me)? < number {
                return Err(KmsError::NoKeyAvailable(st.link().clone()).into());
            }
            let keys = (0..number)
                .map(|_| st.get_enc_key(me).map(|r| encode_entry(&r)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(KeyContainer { keys })
        })
    }

    pub fn dec_keys(
        &self,
        caller: Option<&NodeId>,
        peer: &NodeId,
        req: &DecKeysRequest,
    ) -> Result<KeyContainer, ServiceError> {
        let ids = req
            .key_ids
            .iter()
            .map(|e| Uuid::parse_str(&e.key_id).map_err(|_| ServiceError::MalformedKeyId(e.key_id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        self.with_link(caller, peer, |me, st| {
            let mut keys = Vec::with_capacity(ids.len());
            for id in &ids {
                let key = st.get_dec_key(me, id)?;
                keys.push(encode_entry(&KeyRecord { key_id: *id, key }));
            }
            Ok(KeyContainer { keys })
        })
    }
}

fn encode_entry(r: &KeyRecord) -> KeyEntry {
    KeyEntry { key_id: r.key_id.to_string(), key: BASE64.encode(r.key) }
}

/// Decode the base64 key of an ETSI key entry.
pub fn decode_key(entry: &KeyEntry) -> Option<[u8; 32]> {
    let bytes = BASE64.decode(&entry.key).ok()?;
    bytes.try_into().ok()
}
