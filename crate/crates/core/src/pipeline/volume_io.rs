//! On-disk volumes: a JSON header next to a raw little-endian int16 voxel
//! file and an optional one-byte-per-voxel label file.
//!
//! ```json
//! {"dims": [D, H, W], "spacing": [x, y, z], "dtype": "int16le",
//!  "data": "case.raw", "mask": "case.mask"}
//! ```
//!
//! `data` defaults to the header's stem with a `.raw` extension; relative
//! paths resolve against the header's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::preprocess::CtVolume;

pub const VOXEL_DTYPE: &str = "int16le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// A volume with its optional per-slice label masks.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeCase {
    pub volume: CtVolume,
    pub masks: Option<Vec<LabelMask>>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile { path: path.display().to_string(), reason: reason.into() }
}

fn sibling(header: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        header.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn stem(header: &Path) -> String {
    header.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
}

pub fn load_volume(header_path: &Path) -> Result<VolumeCase> {
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(header_path)?)
        .map_err(|e| corrupt(header_path, format!("header: {e}")))?;
    if header.dtype != VOXEL_DTYPE {
        return Err(Error::Format(format!("unsupported voxel dtype `{}`", header.dtype)));
    }
    let [d, h, w] = header.dims;
    let n = d * h * w;
    let data_path = sibling(header_path, header.data.as_deref().unwrap_or(&format!("{}.raw", stem(header_path))));
    let bytes = fs::read(&data_path)?;
    if bytes.len() != n * 2 {
        return Err(corrupt(&data_path, format!("expected {} bytes for {:?}, found {}", n * 2, header.dims, bytes.len())));
    }
    let voxels = bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    let id = header.id.clone().unwrap_or_else(|| stem(header_path));
    let volume = CtVolume::new(id, header.dims, header.spacing, voxels)?;

    let masks = match &header.mask {
        None => None,
        Some(name) => {
            let mask_path = sibling(header_path, name);
            let labels = fs::read(&mask_path)?;
            if labels.len() != n {
                return Err(corrupt(&mask_path, format!("expected {n} label bytes, found {}", labels.len())));
            }
            Some(labels.chunks_exact(h * w).map(|c| LabelMask::new(h, w, c.to_vec())).collect::<Result<Vec<_>>>()?)
        }
    };
    Ok(VolumeCase { volume, masks })
}

/// Writes `<stem>.json`, `<stem>.raw` and, with masks, `<stem>.mask` next to
/// `header_path`.
pub fn save_volume(header_path: &Path, volume: &CtVolume, masks: Option<&[LabelMask]>) -> Result<()> {
    let [d, h, w] = volume.dims();
    let s = stem(header_path);
    let data_name = format!("{s}.raw");
    let mut raw = Vec::with_capacity(volume.voxels().len() * 2);
    for v in volume.voxels() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(sibling(header_path, &data_name), raw)?;

    let mask_name = match masks {
        None => None,
        Some(masks) => {
            if masks.len() != d || masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
                return Err(Error::dim(format!("mask stack does not match volume {:?}", volume.dims())));
            }
            let name = format!("{s}.mask");
            let bytes: Vec<u8> = masks.iter().flat_map(|m| m.labels().iter().copied()).collect();
            fs::write(sibling(header_path, &name), bytes)?;
            Some(name)
        }
    };
    let header = VolumeHeader {
        dims: volume.dims(),
        spacing: volume.spacing(),
        dtype: VOXEL_DTYPE.into(),
        id: Some(volume.id.clone()),
        data: Some(data_name),
        mask: mask_name,
    };
    fs::write(header_path, serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

/// Writes a label stack as raw bytes, one per voxel.
pub fn save_mask_stack(path: &Path, masks: &[LabelMask]) -> Result<()> {
    fs::write(path, masks.iter().flat_map(|m| m.labels().iter().copied()).collect::<Vec<u8>>())?;
    Ok(())
}

/// Every `*.json` volume header in a directory, sorted by file name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") && fs::read_to_string(&path)?.contains("\"dtype\"") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("a.json");
        fs::write(&header, r#"{"dims":[2,4,4],"spacing":[1,1,1],"dtype":"int16le"}"#).unwrap();
        fs::write(dir.path().join("a.raw"), vec![0u8; 64]).unwrap();
        assert_eq!(load_volume(&header).unwrap().volume.dims(), [2, 4, 4]);
        fs::write(dir.path().join("a.raw"), vec![0u8; 63]).unwrap();
        assert!(matches!(load_volume(&header), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn bad_labels_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("b.json");
        fs::write(&header, r#"{"dims":[1,2,2],"spacing":[1,1,1],"dtype":"int16le","mask":"b.mask"}"#).unwrap();
        fs::write(dir.path().join("b.raw"), vec![0u8; 8]).unwrap();
        fs::write(dir.path().join("b.mask"), vec![0, 1, 2, 7]).unwrap();
        assert!(matches!(load_volume(&header), Err(Error::Format(_))));
    }
}
