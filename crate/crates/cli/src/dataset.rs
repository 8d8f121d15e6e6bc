//! Volume directories: `<id>.json/.raw` HU volumes with optional
//! `<id>_mask.json/.raw` label maps next to them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use voxelfm_core::trainer::LabeledVolume;
use voxelfm_core::volume::{load_mask, load_volume, save_mask, save_volume, Sidecar, VolumeKind};
use voxelfm_core::{SegmentationMask, Volume};

#[derive(Clone, Debug)]
pub struct Entry {
    pub id: String,
    pub volume: Volume,
    pub mask: Option<SegmentationMask>,
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_mask"))
}

/// HU volumes in `dir`, sorted by id.
pub fn load_dir(dir: &Path) -> Result<Vec<Entry>> {
    let mut ids = Vec::new();
    for item in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = item?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Ok(sidecar) = serde_json::from_slice::<Sidecar>(&fs::read(&path)?) else { continue };
        if sidecar.kind == VolumeKind::Hu {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let volume = load_volume(&dir.join(&id)).with_context(|| format!("loading volume {id}"))?;
            let mp = mask_path(dir, &id);
            let mask = if mp.with_extension("json").exists() {
                Some(load_mask(&mp).with_context(|| format!("loading mask of {id}"))?)
            } else {
                None
            };
            Ok(Entry { id, volume, mask })
        })
        .collect()
}

pub fn labeled(entries: &[Entry]) -> Result<Vec<LabeledVolume>> {
    entries
        .iter()
        .map(|e| {
            let mask = e.mask.clone().with_context(|| format!("volume {} has no mask", e.id))?;
            Ok(LabeledVolume { volume: e.volume.clone(), mask })
        })
        .collect()
}

pub fn save_entry(dir: &Path, id: &str, volume: &Volume, mask: Option<&SegmentationMask>) -> Result<()> {
    save_volume(volume, &dir.join(id))?;
    if let Some(m) = mask {
        save_mask(m, volume, &mask_path(dir, id))?;
    }
    Ok(())
}

pub fn find<'a>(entries: &'a [Entry], id: &str) -> Result<&'a Entry> {
    entries.iter().find(|e| e.id == id).with_context(|| format!("no volume with id {id:?}"))
}
