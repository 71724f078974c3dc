//! File formats: the flat binary tensor container plus JSON sidecars.
//!
//! Tensor layout: ASCII magic `RPSF1`, u32-LE slice count d, u32-LE side N,
//! then d ζ values and d·N·N slice entries as f64-LE, row-major.

use crate::error::{Error, Result};
use crate::forward::{Snapshot, VolumeEstimate};
use crate::psf::PsfDictionary;
use crate::scene::Scene;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 5] = b"RPSF1";

/// Write a depth-major tensor with its ζ axis.
pub fn write_tensor(path: &Path, zetas: &[f64], data: &Array3<f64>) -> Result<()> {
    let shape = data.shape();
    if shape[0] != zetas.len() {
        return Err(Error::shape(
            format!("{} zetas", shape[0]),
            format!("{}", zetas.len()),
        ));
    }
    if shape[1] != shape[2] {
        return Err(Error::domain("tensor slices must be square"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(shape[0] as u32)?;
    w.write_u32::<LittleEndian>(shape[1] as u32)?;
    for &z in zetas {
        w.write_f64::<LittleEndian>(z)?;
    }
    for &v in data.as_slice().expect("contiguous tensor") {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a tensor written by [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<(Vec<f64>, Array3<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let d = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    if d == 0 || n == 0 || d.saturating_mul(n).saturating_mul(n) > (1 << 31) {
        return Err(Error::Format(format!(
            "{}: implausible dimensions d={d}, n={n}",
            path.display()
        )));
    }
    let mut zetas = vec![0.0; d];
    r.read_f64_into::<LittleEndian>(&mut zetas)?;
    let mut flat = vec![0.0; d * n * n];
    r.read_f64_into::<LittleEndian>(&mut flat)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after tensor payload",
            path.display()
        )));
    }
    let data = Array3::from_shape_vec((d, n, n), flat).expect("shape matches length");
    Ok((zetas, data))
}

pub fn save_dictionary(path: &Path, dict: &PsfDictionary) -> Result<()> {
    write_tensor(path, &dict.zetas, &dict.slices)
}

/// Load a dictionary; slice norms are recomputed from the payload.
pub fn load_dictionary(path: &Path) -> Result<PsfDictionary> {
    let (zetas, slices) = read_tensor(path)?;
    let slice_norms = slices
        .outer_iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(PsfDictionary {
        slices,
        zetas,
        slice_norms,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    background: f64,
    sigma: f64,
    seed: u64,
}

/// Sidecar path `<file>.json` next to a tensor file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Persist a snapshot as a single-slice tensor plus a JSON sidecar carrying
/// (background, sigma, seed).
pub fn save_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    let n = snap.side();
    let mut data = Array3::zeros((1, n, n));
    data.index_axis_mut(ndarray::Axis(0), 0).assign(&snap.pixels);
    write_tensor(path, &[0.0], &data)?;
    let meta = SnapshotMeta {
        background: snap.background,
        sigma: snap.sigma,
        seed: snap.seed,
    };
    let f = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &meta)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot> {
    let (_, data) = read_tensor(path)?;
    if data.shape()[0] != 1 {
        return Err(Error::Format(format!(
            "{}: snapshot tensor must have a single slice",
            path.display()
        )));
    }
    let meta_file = File::open(sidecar_path(path))?;
    let meta: SnapshotMeta = serde_json::from_reader(BufReader::new(meta_file))?;
    Ok(Snapshot {
        pixels: data.index_axis(ndarray::Axis(0), 0).to_owned(),
        background: meta.background,
        sigma: meta.sigma,
        seed: meta.seed,
    })
}

pub fn save_volume(path: &Path, vol: &VolumeEstimate) -> Result<()> {
    write_tensor(path, &vol.zetas, &vol.values)
}

pub fn load_volume(path: &Path) -> Result<VolumeEstimate> {
    let (zetas, values) = read_tensor(path)?;
    Ok(VolumeEstimate { values, zetas })
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), scene)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf::{build_dictionary, PsfConfig};
    use tempfile::tempdir;

    #[test]
    fn tensor_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rpsf");
        let zetas = vec![-1.0, 0.0, 2.5];
        let data = Array3::from_shape_fn((3, 4, 4), |(w, i, j)| (w * 100 + i * 10 + j) as f64 * 0.5);
        write_tensor(&path, &zetas, &data).unwrap();
        let (z2, d2) = read_tensor(&path).unwrap();
        assert_eq!(z2, zetas);
        assert_eq!(d2, data);
    }

    #[test]
    fn header_layout_is_stable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rpsf");
        let data = Array3::from_elem((1, 2, 2), 1.5);
        write_tensor(&path, &[0.25], &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..5], b"RPSF1");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &0.25f64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 5 + 8 + 8 + 4 * 8);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.rpsf");
        std::fs::write(&path, b"NOTRPSF000").unwrap();
        assert!(read_tensor(&path).is_err());
        let data = Array3::from_elem((1, 2, 2), 1.0);
        write_tensor(&path, &[0.0], &data).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn dictionary_roundtrip_preserves_norms() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("psf.rpsf");
        let cfg = PsfConfig {
            grid_size: 24,
            depth_slices: 3,
            zeta_range: (-6.0, 6.0),
            ..Default::default()
        };
        let dict = build_dictionary(&cfg).unwrap();
        save_dictionary(&path, &dict).unwrap();
        let loaded = load_dictionary(&path).unwrap();
        assert_eq!(loaded.slices, dict.slices);
        assert_eq!(loaded.zetas, dict.zetas);
        for (a, b) in loaded.slice_norms.iter().zip(dict.slice_norms.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn snapshot_roundtrip_with_sidecar() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("obs.rpsf");
        let pixels = ndarray::Array2::from_shape_fn((8, 8), |(i, j)| (i + j) as f64);
        let snap = Snapshot {
            pixels,
            background: 5.0,
            sigma: 1.25,
            seed: 42,
        };
        save_snapshot(&path, &snap).unwrap();
        assert!(sidecar_path(&path).exists());
        let loaded = load_snapshot(&path).unwrap();
        assert_eq!(loaded.pixels, snap.pixels);
        assert_eq!(loaded.background, 5.0);
        assert_eq!(loaded.sigma, 1.25);
        assert_eq!(loaded.seed, 42);
    }

    #[test]
    fn scene_json_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let scene = crate::scene::generate_scene(5, &PsfConfig::default(), 7).unwrap();
        save_scene(&path, &scene).unwrap();
        let loaded = load_scene(&path).unwrap();
        assert_eq!(loaded, scene);
        // the on-disk field names form the interchange contract
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["\"seed\"", "\"N\"", "\"zeta_range\"", "\"sources\"", "\"zeta\"", "\"flux\""] {
            assert!(text.contains(key), "missing {key}");
        }
    }
}
