//! Append-only JSON-lines files with a schema header line.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::CatalogError;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Header {
    schema: String,
    version: u32,
}

pub(crate) struct AppendLog {
    file: File,
}

impl AppendLog {
    /// Opens (creating if needed) and returns every complete record. A
    /// trailing partial line left by an interrupted append is cut off.
    pub(crate) fn open<T: DeserializeOwned>(
        path: &Path,
        schema: &str,
        version: u32,
    ) -> Result<(Self, Vec<T>), CatalogError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.is_empty() {
            let mut line = serde_json::to_vec(&Header {
                schema: schema.to_string(),
                version,
            })?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
            return Ok((Self { file }, Vec::new()));
        }

        let name = path.display().to_string();
        let mut records = Vec::new();
        let mut good_len = 0usize;
        let mut first = true;
        let mut pos = 0usize;
        while pos < bytes.len() {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                break; // unterminated tail
            };
            let line = &bytes[pos..pos + nl];
            let next = pos + nl + 1;
            if first {
                let h: Header = serde_json::from_slice(line)
                    .map_err(|e| CatalogError::Corrupt(format!("{name}: bad header: {e}")))?;
                if h.schema != schema || h.version != version {
                    return Err(CatalogError::Corrupt(format!(
                        "{name}: expected {schema} v{version}, found {} v{}",
                        h.schema, h.version
                    )));
                }
                first = false;
            } else if !line.is_empty() {
                match serde_json::from_slice(line) {
                    Ok(r) => records.push(r),
                    Err(e) if next >= bytes.len() => {
                        log::warn!("{name}: dropping unreadable final record: {e}");
                        break;
                    }
                    Err(e) => {
                        return Err(CatalogError::Corrupt(format!(
                            "{name}: record at byte {pos}: {e}"
                        )))
                    }
                }
            }
            good_len = next;
            pos = next;
        }
        if first {
            return Err(CatalogError::Corrupt(format!("{name}: missing header")));
        }
        if good_len < bytes.len() {
            log::warn!(
                "{name}: truncating {} bytes of incomplete append",
                bytes.len() - good_len
            );
            file.set_len(good_len as u64)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((Self { file }, records))
    }

    pub(crate) fn append<T: Serialize>(&mut self, record: &T) -> Result<(), CatalogError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}
