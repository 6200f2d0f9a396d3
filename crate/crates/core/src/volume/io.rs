use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{num_voxels, Dims, LabelVolume, Sample, Volume};
use crate::error::{Error, Result};

/// JSON sidecar describing a raw voxel file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f32; 3]>,
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path, header: &VolumeHeader, elem: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = num_voxels(header.dims) * elem;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "{}: expected {want} bytes for dims {:?}, found {}",
            path.display(),
            header.dims,
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Writes raw little-endian `f32` voxels plus the JSON header.
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>, header_path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = volume.voxels().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_json(
        header_path.as_ref(),
        &VolumeHeader {
            dims: volume.dims(),
            dtype: "f32le".into(),
            num_classes: None,
            spacing: volume.spacing,
        },
    )
}

pub fn load_volume(path: impl AsRef<Path>, header_path: impl AsRef<Path>) -> Result<Volume> {
    let header = read_header(header_path.as_ref())?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported intensity dtype {:?}", header.dtype)));
    }
    let bytes = read_raw(path.as_ref(), &header, 4)?;
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut v = Volume::new(header.dims, voxels)?;
    v.spacing = header.spacing;
    Ok(v)
}

pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>, header_path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels.labels()).map_err(|e| Error::io(path, e))?;
    write_json(
        header_path.as_ref(),
        &VolumeHeader {
            dims: labels.dims(),
            dtype: "u8".into(),
            num_classes: Some(labels.num_classes()),
            spacing: None,
        },
    )
}

pub fn load_labels(path: impl AsRef<Path>, header_path: impl AsRef<Path>) -> Result<LabelVolume> {
    let header = read_header(header_path.as_ref())?;
    if header.dtype != "u8" {
        return Err(Error::Format(format!("unsupported label dtype {:?}", header.dtype)));
    }
    let num_classes = header
        .num_classes
        .ok_or_else(|| Error::Format("label header lacks num_classes".into()))?;
    let bytes = read_raw(path.as_ref(), &header, 1)?;
    LabelVolume::new(header.dims, bytes, num_classes).map_err(|e| Error::Format(e.to_string()))
}

/// One manifest row: paths relative to the manifest's directory. Each data
/// file's header lives next to it with a `.json` extension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub volume: String,
    #[serde(default)]
    pub label: Option<String>,
}

pub fn save_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), &entries)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn header_for(p: &Path) -> PathBuf {
    p.with_extension("json")
}

/// Loads every scan listed in a manifest, in manifest order.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    load_manifest(manifest_path)?
        .iter()
        .map(|e| {
            let vp = root.join(&e.volume);
            let volume = load_volume(&vp, header_for(&vp))?;
            let labels = match &e.label {
                Some(l) => {
                    let lp = root.join(l);
                    let lab = load_labels(&lp, header_for(&lp))?;
                    if lab.dims() != volume.dims() {
                        return Err(Error::Format(format!("{l}: label dims differ from volume")));
                    }
                    Some(lab)
                }
                None => None,
            };
            Ok(Sample { volume, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = crate::rng::stream(3, &[]);
        let vox: Vec<f32> = (0..512).map(|_| r.random::<f32>() * 7.0 - 3.0).collect();
        let v = Volume::new([8, 8, 8], vox).unwrap();
        let (p, h) = (dir.path().join("a.vol"), dir.path().join("a.json"));
        save_volume(&v, &p, &h).unwrap();
        let back = load_volume(&p, &h).unwrap();
        assert!(back.voxels().iter().zip(v.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_dims_define_voxel_count() {
        let dir = tempfile::tempdir().unwrap();
        let (p, h) = (dir.path().join("b.vol"), dir.path().join("b.json"));
        fs::write(&h, r#"{"dims":[2,2,2],"dtype":"f32le"}"#).unwrap();
        fs::write(&p, [0u8; 32]).unwrap();
        assert_eq!(load_volume(&p, &h).unwrap().voxels().len(), 8);
        fs::write(&p, [0u8; 31]).unwrap();
        assert!(matches!(load_volume(&p, &h), Err(Error::Format(_))));
        fs::write(&h, r#"{"dims":[2,2,2],"dtype":"f16"}"#).unwrap();
        assert!(matches!(load_volume(&p, &h), Err(Error::Format(_))));
    }

    #[test]
    fn labels_round_trip_with_class_count() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelVolume::new([1, 2, 2], vec![0, 1, 2, 1], 3).unwrap();
        let (p, h) = (dir.path().join("c.lbl"), dir.path().join("c.json"));
        save_labels(&l, &p, &h).unwrap();
        assert_eq!(load_labels(&p, &h).unwrap(), l);
        fs::write(&p, [0u8, 1, 5, 1]).unwrap();
        assert!(matches!(load_labels(&p, &h), Err(Error::Format(_))));
    }
}
