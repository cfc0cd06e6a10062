use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Candidate, CandidateError};

pub const CANDIDATE_SCHEMA_VERSION: u32 = 1;
const SCHEMA_NAME: &str = "impactscan.candidates";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// Writes a JSON-lines candidate file (header line, then one candidate per
/// line) via a temporary file and rename.
pub fn write_candidates(path: &Path, cands: &[Candidate]) -> Result<(), CandidateError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        serde_json::to_writer(
            &mut f,
            &Header {
                schema: SCHEMA_NAME.into(),
                version: CANDIDATE_SCHEMA_VERSION,
            },
        )?;
        f.write_all(b"\n")?;
        for c in cands {
            serde_json::to_writer(&mut f, c)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        f.get_ref().sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<Candidate>, CandidateError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => {
            return Err(CandidateError::Store(format!(
                "{}: empty file",
                path.display()
            )))
        }
    };
    if header.schema != SCHEMA_NAME || header.version != CANDIDATE_SCHEMA_VERSION {
        return Err(CandidateError::Store(format!(
            "{}: unsupported schema {} v{}",
            path.display(),
            header.schema,
            header.version
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
