//! Synthetic two-domain road scenes, augmentation and file IO.

mod augment;
mod manifest;
mod pnm;
mod scene;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use manifest::{dataset_iter, epoch_batches, load_manifest, save_manifest, scene_seed, write_dataset, Manifest, ManifestEntry};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_scene, read_pgm, read_ppm, save_scene, write_pgm, write_ppm};
pub use scene::{generate_scene, rasterize, DomainStyle, Road, RoadScene};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn style(self, size: usize) -> DomainStyle {
        match self {
            Domain::Source => DomainStyle::source(size),
            Domain::Target => DomainStyle::target(size),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(crate::Error::Invalid(format!(
                "unknown domain {other:?} (expected source or target)"
            ))),
        }
    }
}
