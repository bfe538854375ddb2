//! JSON helpers shared by every file format.
//!
//! Floats are written in shortest round-trip form and parsed with
//! `float_roundtrip`, so `parse(serialize(x)) == x` bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parse `text` as `T`; `path` only labels diagnostics.
pub fn parse_str<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::from_json(path, e))?;
    de.end().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        field: ".".into(),
        message: e.to_string(),
    })?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_str(&read_text(path)?, path)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::invariant)?;
    s.push('\n');
    Ok(s)
}

/// Write to `path`, or to stdout when `path` is `None`.
pub fn write_output(path: Option<&Path>, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents)
                .and_then(|_| out.flush())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}
