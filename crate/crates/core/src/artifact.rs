//! Versioned JSON artifacts.
//!
//! Every file written by the toolkit is a single JSON object carrying a
//! `version` field. Readers reject versions they do not understand and report
//! malformed or truncated content as [`Error::Corrupt`].
//!
//! A front end may register the hash of the configuration that drives the
//! process; [`write_json`] then stamps it into every object it writes as
//! `configHash`. Readers ignore the field.

use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Format version shared by all artifact kinds.
pub const FORMAT_VERSION: u32 = 1;

static CONFIG_HASH: RwLock<Option<String>> = RwLock::new(None);

/// Registers (or clears) the configuration hash stamped into written artifacts.
pub fn set_config_hash(hash: Option<String>) {
    *CONFIG_HASH.write().unwrap_or_else(|e| e.into_inner()) = hash;
}

pub fn config_hash() -> Option<String> {
    CONFIG_HASH.read().unwrap_or_else(|e| e.into_inner()).clone()
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = match config_hash() {
        Some(hash) => {
            let mut v = serde_json::to_value(value).map_err(|e| Error::corrupt(path, e))?;
            if let serde_json::Value::Object(map) = &mut v {
                map.insert("configHash".into(), serde_json::Value::String(hash));
            }
            serde_json::to_vec(&v)
        }
        None => serde_json::to_vec(value),
    }
    .map_err(|e| Error::corrupt(path, e))?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e))
}

pub fn check_version(what: &str, found: u32) -> Result<()> {
    if found == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::Version {
            what: what.to_string(),
            found,
            expected: FORMAT_VERSION,
        })
    }
}

/// Hex prefix (16 chars) of the SHA-256 digest of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON encoding of `value`.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    content_hash(&serde_json::to_vec(value).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Sample {
        version: u32,
        values: Vec<f64>,
    }

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/sample.json");
        let s = Sample {
            version: FORMAT_VERSION,
            values: vec![0.1, 1.0 / 3.0, -2.5e-17, f64::MIN_POSITIVE],
        };
        write_json(&path, &s).unwrap();
        let back: Sample = read_json(&path).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, b"{\"version\":1,\"values\":[1.0,2").unwrap();
        let err = read_json::<Sample>(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        assert!(check_version("mesh", FORMAT_VERSION).is_ok());
        assert!(matches!(
            check_version("mesh", FORMAT_VERSION + 1),
            Err(Error::Version { .. })
        ));
    }
}
