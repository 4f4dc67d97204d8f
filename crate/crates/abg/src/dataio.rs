//! On-disk formats: the binary video dataset container and trained
//! parameter snapshots.
//!
//! Dataset layout (all little-endian): magic `ABGD`, u16 version, u32
//! video count, u16 frames per video, u32 feature width, u16 class
//! count, u8 domain tag; then per video a u32 label followed by
//! `k * d` f32 features (widened to f64 on load).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{AbgError, Result};
use crate::mat::Mat;
use crate::nn::{Group, ParameterStore};

const DATA_MAGIC: &[u8; 4] = b"ABGD";
const SNAP_MAGIC: &[u8; 4] = b"ABGS";
const VERSION: u16 = 1;

struct Src<'a, R: Read> {
    inner: R,
    path: &'a str,
}

impl<'a, R: Read> Src<'a, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                AbgError::TruncatedFile(self.path.to_string())
            } else {
                AbgError::io(self.path, e)
            }
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_block(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn f64_block(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let p = path.display().to_string();
    let f = File::create(path).map_err(|e| AbgError::io(&p, e))?;
    let mut w = BufWriter::new(f);
    let mut out = |b: &[u8]| w.write_all(b).map_err(|e| AbgError::io(&p, e));
    out(DATA_MAGIC)?;
    out(&VERSION.to_le_bytes())?;
    out(&(ds.len() as u32).to_le_bytes())?;
    out(&(ds.k as u16).to_le_bytes())?;
    out(&(ds.d as u32).to_le_bytes())?;
    out(&(ds.classes as u16).to_le_bytes())?;
    out(&[ds.domain])?;
    for v in 0..ds.len() {
        out(&(ds.labels[v] as u32).to_le_bytes())?;
        for f in 0..ds.k {
            for &x in ds.features.row(v * ds.k + f) {
                out(&(x as f32).to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| AbgError::io(&p, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|e| AbgError::io(&p, e))?;
    let mut src = Src { inner: BufReader::new(f), path: &p };
    if src.bytes(4)? != DATA_MAGIC {
        return Err(AbgError::BadMagic(p.clone()));
    }
    let version = src.u16()?;
    if version != VERSION {
        return Err(AbgError::VersionMismatch(version));
    }
    let n = src.u32()? as usize;
    let k = src.u16()? as usize;
    let d = src.u32()? as usize;
    let classes = src.u16()? as usize;
    let domain = src.u8()?;
    if n == 0 {
        return Err(AbgError::EmptyDataset);
    }
    if k == 0 || d == 0 || classes == 0 {
        return Err(AbgError::DimMismatch(format!("{p}: zero k, d or class count")));
    }
    let mut features = Mat::zeros(n * k, d);
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let l = src.u32()? as usize;
        if l >= classes {
            return Err(AbgError::LabelOutOfRange { label: l, classes });
        }
        labels.push(l);
        let block = src.f32_block(k * d)?;
        features.data[v * k * d..(v + 1) * k * d].copy_from_slice(&block);
    }
    // anything after the last video is a malformed writer
    if src.inner.read(&mut [0u8]).map_err(|e| AbgError::io(&p, e))? != 0 {
        return Err(AbgError::DimMismatch(format!("{p}: trailing bytes after final video")));
    }
    let ds = Dataset { k, d, classes, domain, features, labels };
    ds.validate()?;
    Ok(ds)
}

fn write_mat_table(
    out: &mut impl FnMut(&[u8]) -> Result<()>,
    table: &std::collections::BTreeMap<(Group, String), Mat>,
) -> Result<()> {
    out(&(table.len() as u32).to_le_bytes())?;
    for ((g, name), m) in table {
        let gs = g.as_str().as_bytes();
        out(&[gs.len() as u8])?;
        out(gs)?;
        out(&(name.len() as u16).to_le_bytes())?;
        out(name.as_bytes())?;
        out(&(m.rows as u32).to_le_bytes())?;
        out(&(m.cols as u32).to_le_bytes())?;
        for &x in &m.data {
            out(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_mat_table<R: Read>(
    src: &mut Src<'_, R>,
) -> Result<std::collections::BTreeMap<(Group, String), Mat>> {
    let count = src.u32()? as usize;
    let mut table = std::collections::BTreeMap::new();
    for _ in 0..count {
        let glen = src.u8()? as usize;
        let gname = String::from_utf8(src.bytes(glen)?)
            .map_err(|_| AbgError::TruncatedFile(src.path.to_string()))?;
        let group = Group::from_str(&gname)
            .ok_or_else(|| AbgError::DimMismatch(format!("unknown parameter group `{gname}`")))?;
        let nlen = src.u16()? as usize;
        let name = String::from_utf8(src.bytes(nlen)?)
            .map_err(|_| AbgError::TruncatedFile(src.path.to_string()))?;
        let rows = src.u32()? as usize;
        let cols = src.u32()? as usize;
        let data = src.f64_block(rows * cols)?;
        table.insert((group, name), Mat::from_vec(rows, cols, data));
    }
    Ok(table)
}

/// Persist trained parameters (and running stats) with the resolved
/// configuration that produced them.
pub fn write_snapshot(path: &Path, cfg: &TrainConfig, store: &ParameterStore) -> Result<()> {
    let p = path.display().to_string();
    let f = File::create(path).map_err(|e| AbgError::io(&p, e))?;
    let mut w = BufWriter::new(f);
    let mut out = |b: &[u8]| w.write_all(b).map_err(|e| AbgError::io(&p, e));
    out(SNAP_MAGIC)?;
    out(&VERSION.to_le_bytes())?;
    let cfg_json =
        serde_json::to_vec(cfg).map_err(|e| AbgError::ConfigError(e.to_string()))?;
    out(&(cfg_json.len() as u32).to_le_bytes())?;
    out(&cfg_json)?;
    write_mat_table(&mut out, &store.params)?;
    write_mat_table(&mut out, &store.stats)?;
    w.flush().map_err(|e| AbgError::io(&p, e))
}

pub fn read_snapshot(path: &Path) -> Result<(TrainConfig, ParameterStore)> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|e| AbgError::io(&p, e))?;
    let mut src = Src { inner: BufReader::new(f), path: &p };
    if src.bytes(4)? != SNAP_MAGIC {
        return Err(AbgError::BadMagic(p.clone()));
    }
    let version = src.u16()?;
    if version != VERSION {
        return Err(AbgError::VersionMismatch(version));
    }
    let jlen = src.u32()? as usize;
    let cfg: TrainConfig = serde_json::from_slice(&src.bytes(jlen)?)
        .map_err(|e| AbgError::ConfigError(format!("{p}: {e}")))?;
    let params = read_mat_table(&mut src)?;
    let stats = read_mat_table(&mut src)?;
    let store = ParameterStore { params, momentum: Default::default(), stats };
    Ok((cfg, store))
}

/// Reject a snapshot whose configuration cannot consume a dataset.
pub fn check_snapshot_compat(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    if cfg.d_feat != ds.d || cfg.k != ds.k || cfg.classes != ds.classes {
        return Err(AbgError::SnapshotMismatch(format!(
            "snapshot trained for d={}, k={}, classes={}; dataset has d={}, k={}, classes={}",
            cfg.d_feat, cfg.k, cfg.classes, ds.d, ds.k, ds.classes
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ShiftSpec;
    use crate::data::generate;

    #[test]
    fn dataset_roundtrip_within_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.abgd");
        let (ds, _) = generate(3, 6, 4, 5, &ShiftSpec::default(), 11).unwrap();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!((back.k, back.d, back.classes, back.domain), (ds.k, ds.d, ds.classes, 0));
        for (a, b) in back.features.data.iter().zip(&ds.features.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.abgd");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(read_dataset(&path), Err(AbgError::BadMagic(_))));
        let (ds, _) = generate(2, 4, 3, 2, &ShiftSpec::default(), 1).unwrap();
        write_dataset(&path, &ds).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(AbgError::TruncatedFile(_))));
    }

    #[test]
    fn version_gate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.abgd");
        let (ds, _) = generate(2, 4, 3, 2, &ShiftSpec::default(), 1).unwrap();
        write_dataset(&path, &ds).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(AbgError::VersionMismatch(9))));
    }

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.abgs");
        let cfg = TrainConfig::desk();
        let mut store = ParameterStore::default();
        store.insert(Group::Y, "cls.w1", Mat::from_vec(2, 3, vec![1.5, -0.25, 0.0, 3.0, 2.0, -1.0]));
        store.stats.insert((Group::Y, "cls.run_mean".into()), Mat::from_vec(1, 3, vec![0.1, 0.2, 0.3]));
        write_snapshot(&path, &cfg, &store).unwrap();
        let (cfg2, store2) = read_snapshot(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(store2.params, store.params);
        assert_eq!(store2.stats, store.stats);
    }

    #[test]
    fn incompatible_snapshot_is_rejected() {
        let cfg = TrainConfig::desk();
        let (ds, _) = generate(2, 4, 3, 2, &ShiftSpec::default(), 1).unwrap();
        assert!(matches!(
            check_snapshot_compat(&cfg, &ds),
            Err(AbgError::SnapshotMismatch(_))
        ));
    }
}
