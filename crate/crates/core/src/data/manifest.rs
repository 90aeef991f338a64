use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pnm::io_error;
use super::{generate_scene, load_scene, save_scene, Domain, RoadScene};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub domain: Domain,
    pub seed: u64,
}

/// Entries plus the directory relative paths resolve against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<RoadScene> {
        let e = &self.entries[index];
        load_scene(&self.resolve(&e.image), &self.resolve(&e.mask), e.domain, e.seed)
    }

    pub fn load_all(&self) -> Result<Vec<RoadScene>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    /// Fails on the first entry whose files are missing.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.image, &e.mask] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Invalid(format!("manifest entry missing on disk: {}", full.display())));
                }
            }
        }
        Ok(())
    }
}

/// Reads a manifest file; a directory is taken to hold `manifest.json`.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| io_error(&file, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { root, entries })
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Seed of the `index`-th scene of a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

/// Generates `count` scenes of `domain` into `dir` (created if needed) and
/// writes `manifest.json` with paths relative to `dir`.
pub fn write_dataset(dir: &Path, count: usize, domain: Domain, seed: u64, size: usize) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let style = domain.style(size);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = scene_seed(seed, i as u64);
        let scene = generate_scene(s, domain, &style, size)?;
        let stem = format!("{domain}_{i:05}");
        let (image, mask) = save_scene(dir, &stem, &scene)?;
        let rel = |p: PathBuf| p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(p);
        entries.push(ManifestEntry { image: rel(image), mask: rel(mask), domain, seed: s });
    }
    save_manifest(&dir.join("manifest.json"), &entries)?;
    Ok(entries)
}

/// Index batches for one epoch; shuffled deterministically from
/// `(seed, epoch)`, with the final short batch kept.
pub fn epoch_batches(len: usize, batch: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// Streams loaded scene batches for one epoch after checking every entry
/// exists.
pub fn dataset_iter(
    manifest: &Manifest,
    batch: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = Result<Vec<RoadScene>>> + '_> {
    manifest.check_files()?;
    let batches = epoch_batches(manifest.len(), batch, seed, epoch, shuffle)?;
    Ok(batches
        .into_iter()
        .map(move |idx| idx.into_iter().map(|i| manifest.load(i)).collect()))
}
