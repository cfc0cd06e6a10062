use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{import_observation, read_sidecar, Observation, ObservationMeta, RasterError};

/// A set of observations that can be listed cheaply and loaded one at a time.
///
/// Implementations must be shareable across scan workers.
pub trait ArchiveSource: Sync {
    /// Metadata of every observation, sorted by id.
    fn metas(&self) -> &[ObservationMeta];

    fn load(&self, id: &str) -> Result<Observation, RasterError>;

    fn meta(&self, id: &str) -> Option<&ObservationMeta> {
        let metas = self.metas();
        metas
            .binary_search_by(|m| m.id.as_str().cmp(id))
            .ok()
            .map(|i| &metas[i])
    }
}

fn check_unique(metas: &[ObservationMeta]) -> Result<(), RasterError> {
    for pair in metas.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(RasterError::Observation {
                id: pair[0].id.clone(),
                reason: "duplicate id in archive".into(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryArchive {
    observations: Vec<Observation>,
    metas: Vec<ObservationMeta>,
}

impl InMemoryArchive {
    pub fn new(mut observations: Vec<Observation>) -> Result<Self, RasterError> {
        observations.sort_by(|a, b| a.id().cmp(b.id()));
        let metas: Vec<_> = observations.iter().map(|o| o.meta().clone()).collect();
        check_unique(&metas)?;
        Ok(Self {
            observations,
            metas,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }
}

impl ArchiveSource for InMemoryArchive {
    fn metas(&self) -> &[ObservationMeta] {
        &self.metas
    }

    fn load(&self, id: &str) -> Result<Observation, RasterError> {
        self.observations
            .binary_search_by(|o| o.id().cmp(id))
            .map(|i| self.observations[i].clone())
            .map_err(|_| RasterError::UnknownObservation(id.to_string()))
    }
}

/// Observations stored as `<id>.png|<id>.pgm` + `<id>.json` pairs in a directory.
#[derive(Debug, Clone)]
pub struct DirectoryArchive {
    dir: PathBuf,
    metas: Vec<ObservationMeta>,
    images: HashMap<String, (PathBuf, PathBuf)>,
}

impl DirectoryArchive {
    pub fn open(dir: &Path) -> Result<Self, RasterError> {
        let mut metas = Vec::new();
        let mut images = HashMap::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        entries.sort();
        for sidecar_path in entries {
            let image_path = ["png", "pgm"]
                .iter()
                .map(|ext| sidecar_path.with_extension(ext))
                .find(|p| p.exists());
            let Some(image_path) = image_path else {
                continue;
            };
            let sidecar = read_sidecar(&sidecar_path)?;
            let (w, h) = match (sidecar.width, sidecar.height) {
                (Some(w), Some(h)) => (w, h),
                _ => {
                    let (w, h) = image::image_dimensions(&image_path)?;
                    (w as usize, h as usize)
                }
            };
            let meta = sidecar.to_meta(w, h)?;
            images.insert(meta.id.clone(), (image_path, sidecar_path));
            metas.push(meta);
        }
        metas.sort_by(|a, b| a.id.cmp(&b.id));
        check_unique(&metas)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metas,
            images,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ArchiveSource for DirectoryArchive {
    fn metas(&self) -> &[ObservationMeta] {
        &self.metas
    }

    fn load(&self, id: &str) -> Result<Observation, RasterError> {
        let (img, meta) = self
            .images
            .get(id)
            .ok_or_else(|| RasterError::UnknownObservation(id.to_string()))?;
        import_observation(img, meta)
    }
}
