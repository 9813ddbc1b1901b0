//! Content digests for provenance manifests.

use std::path::Path;

use anyhow::Context;
use sha2::{Digest, Sha256};

/// `sha256:<hex>` digest of a file's bytes.
pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot digest {}", path.display()))?;
    Ok(bytes_digest(&bytes))
}

/// `sha256:<hex>` digest of a byte string.
pub fn bytes_digest(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}
