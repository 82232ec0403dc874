//! Per-pixel land-cover class rasters and their class-name manifest.
//!
//! Raster layout: width u32 LE | height u32 LE | u16 LE class id per pixel,
//! row-major. The manifest is UTF-8 `id,name` lines, LF-terminated.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Integer-coded land-cover map for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<u16>,
}

impl LabelRaster {
    pub fn new(width: u32, height: u32, ids: Vec<u16>) -> Result<LabelRaster> {
        if ids.len() != (width as usize) * (height as usize) {
            return Err(Error::Dimension(format!(
                "raster {width}x{height} needs {} ids, got {}",
                (width as usize) * (height as usize),
                ids.len()
            )));
        }
        Ok(LabelRaster { width, height, ids })
    }

    #[inline]
    pub fn class_at(&self, y: usize, x: usize) -> u16 {
        self.ids[y * self.width as usize + x]
    }

    /// Check that every class id present in the raster has a manifest name.
    pub fn validate_against_manifest(&self, manifest: &BTreeMap<u16, String>) -> Result<()> {
        for &id in &self.ids {
            if !manifest.contains_key(&id) {
                return Err(Error::Input(format!(
                    "raster uses class id {id} missing from the manifest"
                )));
            }
        }
        Ok(())
    }
}

pub fn write_raster(path: &Path, raster: &LabelRaster) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + raster.ids.len() * 2);
    buf.extend_from_slice(&raster.width.to_le_bytes());
    buf.extend_from_slice(&raster.height.to_le_bytes());
    for &id in &raster.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<LabelRaster> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Corruption("raster shorter than its header".into()));
    }
    let width = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let height = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let n = (width as usize) * (height as usize);
    if bytes.len() != 8 + 2 * n {
        return Err(Error::Corruption(format!(
            "raster {width}x{height} should carry {} payload bytes, found {}",
            2 * n,
            bytes.len() - 8
        )));
    }
    let ids: Vec<u16> = bytes[8..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelRaster::new(width, height, ids)
}

/// Write the `id,name` class manifest, ascending by id, LF line endings.
pub fn write_manifest(path: &Path, manifest: &BTreeMap<u16, String>) -> Result<()> {
    let mut text = String::new();
    for (id, name) in manifest {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::Input(format!("class name {name:?} contains a delimiter")));
        }
        text.push_str(&format!("{id},{name}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<u16, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut manifest = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id_str, name) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("manifest line {} lacks a comma: {line:?}", lineno + 1))
        })?;
        let id: u16 = id_str.trim().parse().map_err(|_| {
            Error::Format(format!("manifest line {}: bad class id {id_str:?}", lineno + 1))
        })?;
        if manifest.insert(id, name.to_string()).is_some() {
            return Err(Error::Format(format!("manifest repeats class id {id}")));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("cfr-raster-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn raster_round_trip() {
        let raster = LabelRaster::new(3, 2, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let path = tmp("rt.lcr");
        write_raster(&path, &raster).unwrap();
        assert_eq!(read_raster(&path).unwrap(), raster);
    }

    #[test]
    fn truncated_raster_is_corrupt() {
        let raster = LabelRaster::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let path = tmp("trunc.lcr");
        write_raster(&path, &raster).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_raster(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let mut manifest = BTreeMap::new();
        manifest.insert(0u16, "forest".to_string());
        manifest.insert(1u16, "wetland".to_string());
        let path = tmp("classes.txt");
        write_manifest(&path, &manifest).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, manifest);

        let ok = LabelRaster::new(2, 1, vec![0, 1]).unwrap();
        ok.validate_against_manifest(&back).unwrap();
        let bad = LabelRaster::new(2, 1, vec![0, 9]).unwrap();
        assert!(bad.validate_against_manifest(&back).is_err());
    }

    #[test]
    fn manifest_is_lf_terminated_ascending() {
        let mut manifest = BTreeMap::new();
        manifest.insert(1u16, "b".to_string());
        manifest.insert(0u16, "a".to_string());
        let path = tmp("order.txt");
        write_manifest(&path, &manifest).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0,a\n1,b\n");
    }
}
