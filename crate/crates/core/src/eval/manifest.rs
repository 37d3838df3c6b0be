use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::oracle::PERSON;
use crate::patch::MaskBox;

pub const DEFAULT_MIN_HEIGHT: u32 = 120;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub bbox: MaskBox,
    #[serde(rename = "class", default = "person")]
    pub class_label: String,
}

fn person() -> String {
    PERSON.to_owned()
}

impl GroundTruth {
    pub fn person(bbox: MaskBox) -> Self {
        Self { bbox, class_label: person() }
    }

    pub fn is_person(&self) -> bool {
        self.class_label == PERSON
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path, relative to the manifest file unless absolute.
    pub image: PathBuf,
    #[serde(default)]
    pub boxes: Vec<GroundTruth>,
}

impl ManifestRecord {
    pub fn person_boxes(&self) -> Vec<MaskBox> {
        self.boxes.iter().filter(|b| b.is_person()).map(|b| b.bbox).collect()
    }

    /// `(index among person boxes, box)` of persons strictly taller than `min_height`.
    pub fn eligible_targets(&self, min_height: u32) -> Vec<(usize, MaskBox)> {
        self.person_boxes().into_iter().enumerate().filter(|(_, b)| b.h > min_height).collect()
    }
}

/// Images with ground-truth boxes. Serialized as
///
/// ```json
/// {"min_height": 120, "images": [{"image": "a.png", "boxes": [{"x": 1, "y": 2, "w": 30, "h": 140, "class": "person"}]}]}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_min_height")]
    pub min_height: u32,
    pub images: Vec<ManifestRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_min_height() -> u32 {
    DEFAULT_MIN_HEIGHT
}

impl DatasetManifest {
    pub fn new(images: Vec<ManifestRecord>) -> Self {
        Self { min_height: DEFAULT_MIN_HEIGHT, images, base_dir: PathBuf::new() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.image.is_absolute() {
            record.image.clone()
        } else {
            self.base_dir.join(&record.image)
        }
    }
}

/// File stem shared by the trace and adversarial image of one attacked target.
pub fn artifact_stem(record_index: usize, record: &ManifestRecord, target_index: usize) -> String {
    let stem = record.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{record_index:04}_{stem}_t{target_index}")
}
