//! Content-addressed disk cache for completions.
//!
//! The key is the SHA-256 of the canonical JSON of
//! (model_id, prompt, temperature, max_tokens); entries are one JSON file per
//! key, written via a temp file and rename so concurrent writers of the same
//! key serialize at the filesystem level and readers never see partial files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::LlmRequest;

#[derive(Serialize)]
struct KeyFields<'a> {
    model_id: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

/// SHA-256 hex digest identifying a completion request.
pub fn cache_key(request: &LlmRequest) -> String {
    let fields = KeyFields {
        model_id: &request.model_id,
        prompt: &request.prompt,
        temperature: request.temperature,
        max_tokens: request.max_tokens,
    };
    let canonical = serde_json::to_vec(&fields).expect("key fields serialize");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model_id: String,
    temperature: f64,
    max_tokens: u32,
    prompt: String,
    text: String,
}

pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(DiskCache { dir })
    }

    pub fn dir(&self) -> &std::path::Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>> {
        let path = self.entry_path(key);
        let bytes = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("corrupt cache entry {}: {e}", path.display())))?;
        Ok(Some(entry.text))
    }

    pub fn put(&self, key: &str, request: &LlmRequest, text: &str) -> Result<()> {
        let entry = CacheEntry {
            model_id: request.model_id.clone(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            prompt: request.prompt.clone(),
            text: text.to_string(),
        };
        let body = serde_json::to_vec_pretty(&entry)
            .map_err(|e| Error::Data(format!("serialize cache entry: {e}")))?;
        let final_path = self.entry_path(key);
        let tmp_path = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp_path, &body).map_err(|e| Error::io(&tmp_path, e))?;
        std::fs::rename(&tmp_path, &final_path).map_err(|e| Error::io(&final_path, e))?;
        Ok(())
    }
}
