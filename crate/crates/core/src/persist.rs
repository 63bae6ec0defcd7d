//! Versioned, checksummed artifact files.
//!
//! A file is two lines: a JSON header naming the artifact kind, its format
//! version, the payload length in bytes and the payload's SHA-256, then the
//! JSON payload itself.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiment::{ExperimentSpec, Report, REPORT_FORMAT_VERSION};
use crate::policy::{MudsPolicy, POLICY_FORMAT_VERSION};
use crate::teaching::{Demonstration, TrainingSession, SESSION_FORMAT_VERSION};

pub const DEMO_FORMAT_VERSION: u32 = 1;
pub const SPEC_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("expected a {expected} artifact, found {found}")]
    Kind { expected: String, found: String },
    #[error("{kind} format version {found} is not supported (expected {expected})")]
    Version {
        kind: String,
        expected: u32,
        found: u32,
    },
    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("payload length {actual} does not match header length {expected}")]
    Length { expected: usize, actual: usize },
}

/// Something that can be written to and read from an artifact file.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
    const VERSION: u32;
}

impl Artifact for Demonstration {
    const KIND: &'static str = "demonstration";
    const VERSION: u32 = DEMO_FORMAT_VERSION;
}

impl Artifact for MudsPolicy {
    const KIND: &'static str = "policy";
    const VERSION: u32 = POLICY_FORMAT_VERSION;
}

impl Artifact for TrainingSession {
    const KIND: &'static str = "session_archive";
    const VERSION: u32 = SESSION_FORMAT_VERSION;
}

impl Artifact for ExperimentSpec {
    const KIND: &'static str = "experiment_spec";
    const VERSION: u32 = SPEC_FORMAT_VERSION;
}

impl Artifact for Report {
    const KIND: &'static str = "experiment_report";
    const VERSION: u32 = REPORT_FORMAT_VERSION;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub format_version: u32,
    pub length: usize,
    pub sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_bytes<A: Artifact>(artifact: &A) -> Vec<u8> {
    let payload = serde_json::to_string(artifact).expect("artifacts serialize");
    let header = Header {
        kind: A::KIND.into(),
        format_version: A::VERSION,
        length: payload.len(),
        sha256: digest(payload.as_bytes()),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    out.push_str(&payload);
    out.push('\n');
    out.into_bytes()
}

/// Reads just the header, for listing files without parsing payloads.
pub fn read_header(bytes: &[u8]) -> Result<Header, PersistError> {
    let text = std::str::from_utf8(bytes).map_err(|e| PersistError::Malformed(e.to_string()))?;
    let line = text
        .split_once('\n')
        .map(|(h, _)| h)
        .ok_or_else(|| PersistError::Malformed("missing header line".into()))?;
    serde_json::from_str(line).map_err(|e| PersistError::Malformed(format!("header: {e}")))
}

/// Checks kind, then version, then length and checksum, then parses.
pub fn from_bytes<A: Artifact>(bytes: &[u8]) -> Result<A, PersistError> {
    let header = read_header(bytes)?;
    if header.kind != A::KIND {
        return Err(PersistError::Kind {
            expected: A::KIND.into(),
            found: header.kind,
        });
    }
    if header.format_version != A::VERSION {
        return Err(PersistError::Version {
            kind: header.kind,
            expected: A::VERSION,
            found: header.format_version,
        });
    }
    let text = std::str::from_utf8(bytes).expect("validated by read_header");
    let (_, rest) = text.split_once('\n').expect("validated by read_header");
    let payload = rest.strip_suffix('\n').unwrap_or(rest);
    if payload.len() != header.length {
        return Err(PersistError::Length {
            expected: header.length,
            actual: payload.len(),
        });
    }
    let actual = digest(payload.as_bytes());
    if actual != header.sha256 {
        return Err(PersistError::Checksum {
            expected: header.sha256,
            actual,
        });
    }
    serde_json::from_str(payload).map_err(|e| PersistError::Malformed(format!("payload: {e}")))
}

pub fn save<A: Artifact>(artifact: &A, path: impl AsRef<Path>) -> Result<(), PersistError> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(artifact)).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load<A: Artifact>(path: impl AsRef<Path>) -> Result<A, PersistError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::curved_pick_place;

    fn demo() -> Demonstration {
        curved_pick_place().1.record(10.0).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let d = demo();
        let bytes = to_bytes(&d);
        let back: Demonstration = from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn wrong_kind_is_named() {
        let bytes = to_bytes(&demo());
        match from_bytes::<MudsPolicy>(&bytes) {
            Err(PersistError::Kind { expected, found }) => {
                assert_eq!(expected, "policy");
                assert_eq!(found, "demonstration");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_is_checked_before_checksum() {
        let text = String::from_utf8(to_bytes(&demo())).unwrap();
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(
            from_bytes::<Demonstration>(bumped.as_bytes()),
            Err(PersistError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = to_bytes(&demo());
        let at = bytes.len() - 10;
        bytes[at] = if bytes[at] == b'1' { b'2' } else { b'1' };
        assert!(matches!(
            from_bytes::<Demonstration>(&bytes),
            Err(PersistError::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = to_bytes(&demo());
        let cut = &bytes[..bytes.len() - 40];
        assert!(matches!(
            from_bytes::<Demonstration>(cut),
            Err(PersistError::Length { .. })
        ));
        assert!(matches!(
            from_bytes::<Demonstration>(b"no header"),
            Err(PersistError::Malformed(_))
        ));
    }
}
