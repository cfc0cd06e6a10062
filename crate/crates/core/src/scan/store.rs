use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GridIndexEntry, ScanError, ScanFailure, ScoreGrid};
use crate::raster::WindowParams;

pub const SCAN_INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanCheckpoint {
    pub fingerprint: String,
    pub completed_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanIndex {
    pub schema_version: u32,
    pub fingerprint: String,
    pub window: WindowParams,
    pub grids: Vec<GridIndexEntry>,
    pub failures: Vec<ScanFailure>,
}

/// Directory holding `grids/<id>.grid`, `checkpoint.json` and `index.json`.
#[derive(Debug, Clone)]
pub struct ScanStore {
    dir: PathBuf,
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

impl ScanStore {
    pub fn open(dir: &Path) -> Result<Self, ScanError> {
        fs::create_dir_all(dir.join("grids"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn grid_path(&self, id: &str) -> Result<PathBuf, ScanError> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(ScanError::Format(format!(
                "observation id `{id}` is not usable as a file name"
            )));
        }
        Ok(self.dir.join("grids").join(format!("{id}.grid")))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join("index.json")
    }

    /// Removes grids, checkpoint and index from a previous run.
    pub fn reset(&self) -> Result<(), ScanError> {
        let grids = self.dir.join("grids");
        if grids.exists() {
            fs::remove_dir_all(&grids)?;
        }
        fs::create_dir_all(&grids)?;
        for p in [self.checkpoint_path(), self.index_path()] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        Ok(())
    }

    pub fn write_grid(&self, grid: &ScoreGrid) -> Result<(), ScanError> {
        write_atomic(&self.grid_path(grid.observation_id())?, &grid.to_bytes())?;
        Ok(())
    }

    pub fn read_grid(&self, id: &str) -> Result<ScoreGrid, ScanError> {
        ScoreGrid::from_bytes(&fs::read(self.grid_path(id)?)?)
    }

    pub fn save_checkpoint(&self, c: &ScanCheckpoint) -> Result<(), ScanError> {
        write_atomic(&self.checkpoint_path(), &serde_json::to_vec_pretty(c)?)?;
        Ok(())
    }

    pub fn load_checkpoint(&self) -> Result<Option<ScanCheckpoint>, ScanError> {
        let p = self.checkpoint_path();
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
    }

    pub fn write_index(
        &self,
        fingerprint: &str,
        params: WindowParams,
        grids: &[ScoreGrid],
        failures: &[ScanFailure],
    ) -> Result<(), ScanError> {
        let index = ScanIndex {
            schema_version: SCAN_INDEX_VERSION,
            fingerprint: fingerprint.to_string(),
            window: params,
            grids: grids
                .iter()
                .map(|g| GridIndexEntry {
                    observation_id: g.observation_id().to_string(),
                    file: format!("grids/{}.grid", g.observation_id()),
                    rows: g.rows(),
                    cols: g.cols(),
                    sha256: g.checksum(),
                })
                .collect(),
            failures: failures.to_vec(),
        };
        write_atomic(&self.index_path(), &serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn read_index(&self) -> Result<ScanIndex, ScanError> {
        let index: ScanIndex = serde_json::from_slice(&fs::read(self.index_path())?)?;
        if index.schema_version != SCAN_INDEX_VERSION {
            return Err(ScanError::Format(format!(
                "index schema v{}",
                index.schema_version
            )));
        }
        Ok(index)
    }

    /// Every grid listed in the index, verifying checksums.
    pub fn load_grids(&self) -> Result<Vec<ScoreGrid>, ScanError> {
        let index = self.read_index()?;
        index
            .grids
            .iter()
            .map(|e| {
                let g = ScoreGrid::from_bytes(&fs::read(self.dir.join(&e.file))?)?;
                if g.checksum() != e.sha256 {
                    return Err(ScanError::Format(format!(
                        "checksum mismatch for {}",
                        e.file
                    )));
                }
                Ok(g)
            })
            .collect()
    }
}
