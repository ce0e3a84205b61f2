//! Versioned JSON container shared by model and checkpoint files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize)]
struct Envelope<'a, T> {
    format: &'a str,
    version: u32,
    payload: &'a T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn to_string<T: Serialize>(format: &str, version: u32, payload: &T) -> Result<String> {
    Ok(serde_json::to_string(&Envelope {
        format,
        version,
        payload,
    })?)
}

pub fn save<T: Serialize>(path: &Path, format: &str, version: u32, payload: &T) -> Result<()> {
    std::fs::write(path, to_string(format, version, payload)?).map_err(|e| Error::io(path, e))
}

/// Reads a container, checking `format` and `version` before decoding the
/// payload. `kind` names the file type in errors.
pub fn load<T: DeserializeOwned>(
    path: &Path,
    format: &str,
    version: u32,
    kind: &'static str,
) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let header: Header =
        serde_json::from_value(value.clone()).map_err(|_| corrupt(format!("not a {kind} file")))?;
    if header.format != format {
        return Err(corrupt(format!(
            "expected a {kind} file, found format {:?}",
            header.format
        )));
    }
    if header.version != version {
        return Err(Error::Version {
            kind,
            found: header.version,
            expected: version,
        });
    }
    let payload = value
        .get_mut("payload")
        .map(serde_json::Value::take)
        .ok_or_else(|| corrupt("missing payload".into()))?;
    serde_json::from_value(payload).map_err(|e| corrupt(e.to_string()))
}
