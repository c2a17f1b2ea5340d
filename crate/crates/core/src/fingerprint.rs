//! SHA-256 fingerprints of configurations and input files.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn of_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON encoding; struct fields serialize in
/// declaration order, so equal values give equal fingerprints.
pub fn of_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::json("<fingerprint>", e))?;
    Ok(of_bytes(&bytes))
}

pub fn of_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(of_bytes(&bytes))
}
