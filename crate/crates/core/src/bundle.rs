//! Array bundles: a little-endian f32 payload (`<stem>.f32`) with a JSON
//! manifest (`<stem>.json`) describing shape, dimensions, channels, grid and
//! provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grid::Grid;
use crate::synthdata::{ChannelMeta, FieldSet};
use crate::{Error, Result};

pub const BUNDLE_SCHEMA: &str = "edm-downscale.bundle.v1";

/// Named sub-array of a flat payload, in payload order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub shape: Vec<usize>,
    pub dims: Vec<String>,
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default)]
    pub units: Vec<String>,
    #[serde(default)]
    pub precip_like: Vec<bool>,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub attrs: BTreeMap<String, serde_json::Value>,
    pub config_hash: String,
    pub seed: u64,
    pub sha256: String,
}

/// In-memory bundle. Values are stored as f32 on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayBundle {
    pub manifest: Manifest,
    pub data: Vec<f32>,
}

fn payload_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest and payload paths for a stem such as `run/fine`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f32"))
}

impl ArrayBundle {
    pub fn new(data: Vec<f32>, shape: Vec<usize>, dims: Vec<String>, config_hash: &str, seed: u64) -> Result<Self> {
        if dims.len() != shape.len() {
            return Err(Error::shape(shape.len(), dims.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(n, data.len()));
        }
        let sha256 = sha256_hex(&payload_bytes(&data));
        Ok(Self {
            manifest: Manifest {
                schema: BUNDLE_SCHEMA.into(),
                shape,
                dims,
                channels: Vec::new(),
                units: Vec::new(),
                precip_like: Vec::new(),
                grid: None,
                segments: Vec::new(),
                attrs: BTreeMap::new(),
                config_hash: config_hash.into(),
                seed,
                sha256,
            },
            data,
        })
    }

    pub fn from_array(a: &ArrayD<f64>, dims: &[&str], config_hash: &str, seed: u64) -> Result<Self> {
        Self::new(
            a.iter().map(|v| *v as f32).collect(),
            a.shape().to_vec(),
            dims.iter().map(|d| d.to_string()).collect(),
            config_hash,
            seed,
        )
    }

    /// `(time, channel, lat, lon)` bundle carrying channel and grid metadata.
    pub fn from_fields(fields: &FieldSet, config_hash: &str, seed: u64) -> Result<Self> {
        let mut b = Self::from_array(&fields.data.clone().into_dyn(), &["time", "channel", "lat", "lon"], config_hash, seed)?;
        b.manifest.channels = fields.channels.iter().map(|c| c.name.clone()).collect();
        b.manifest.units = fields.channels.iter().map(|c| c.units.clone()).collect();
        b.manifest.precip_like = fields.channels.iter().map(|c| c.precip_like).collect();
        b.manifest.grid = Some(fields.grid.clone());
        b.manifest
            .attrs
            .insert("time_step_hours".into(), serde_json::json!(fields.time_step_hours));
        Ok(b)
    }

    /// `(member, time, channel, lat, lon)` bundle of equally shaped members.
    pub fn from_ensemble(members: &[FieldSet], config_hash: &str, seed: u64) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
        let mut b = Self::from_fields(first, config_hash, seed)?;
        let mut data = Vec::with_capacity(b.data.len() * members.len());
        for m in members {
            m.check_compatible(first)?;
            data.extend(m.data.iter().map(|v| *v as f32));
        }
        b.manifest.shape.insert(0, members.len());
        b.manifest.dims.insert(0, "member".into());
        b.manifest.sha256 = sha256_hex(&payload_bytes(&data));
        b.data = data;
        Ok(b)
    }

    pub fn to_ensemble(&self) -> Result<Vec<FieldSet>> {
        let m = &self.manifest;
        if m.shape.len() != 5 {
            return Err(Error::shape(5, m.shape.len()));
        }
        let per: usize = m.shape[1..].iter().product();
        (0..m.shape[0])
            .map(|e| {
                let mut single = self.clone();
                single.manifest.shape.remove(0);
                single.manifest.dims.remove(0);
                single.data = self.data[e * per..(e + 1) * per].to_vec();
                single.to_fields()
            })
            .collect()
    }

    /// Concatenates named arrays into one flat payload with a segment table.
    pub fn from_segments(arrays: &[(String, ArrayD<f64>)], config_hash: &str, seed: u64) -> Result<Self> {
        let data: Vec<f32> = arrays.iter().flat_map(|(_, a)| a.iter().map(|v| *v as f32)).collect();
        let n = data.len();
        let mut b = Self::new(data, vec![n], vec!["value".into()], config_hash, seed)?;
        b.manifest.segments = arrays
            .iter()
            .map(|(name, a)| Segment {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect();
        Ok(b)
    }

    pub fn with_attr(mut self, key: &str, value: serde_json::Value) -> Self {
        self.manifest.attrs.insert(key.into(), value);
        self
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.manifest.shape), self.data.iter().map(|v| *v as f64).collect())
            .map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn to_fields(&self) -> Result<FieldSet> {
        let m = &self.manifest;
        if m.shape.len() != 4 {
            return Err(Error::shape(4, m.shape.len()));
        }
        let grid = m
            .grid
            .clone()
            .ok_or_else(|| Error::InvalidArgument("bundle has no grid metadata".into()))?;
        let data = self
            .to_array()?
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let channels = (0..m.shape[1])
            .map(|c| ChannelMeta {
                name: m.channels.get(c).cloned().unwrap_or_else(|| format!("c{c}")),
                units: m.units.get(c).cloned().unwrap_or_default(),
                precip_like: m.precip_like.get(c).copied().unwrap_or(false),
            })
            .collect();
        let mut f = FieldSet::new(data, channels, grid)?;
        if let Some(h) = m.attrs.get("time_step_hours").and_then(|v| v.as_f64()) {
            f.time_step_hours = h;
        }
        Ok(f)
    }

    pub fn to_array4(&self) -> Result<Array4<f64>> {
        self.to_array()?
            .into_dimensionality()
            .map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn to_segments(&self) -> Result<Vec<(String, ArrayD<f64>)>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.manifest.segments.len());
        for seg in &self.manifest.segments {
            let n: usize = seg.shape.iter().product();
            let end = offset + n;
            if end > self.data.len() {
                return Err(Error::shape(end, self.data.len()));
            }
            let vals = self.data[offset..end].iter().map(|v| *v as f64).collect();
            let a = ArrayD::from_shape_vec(IxDyn(&seg.shape), vals).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            out.push((seg.name.clone(), a));
            offset = end;
        }
        if offset != self.data.len() {
            return Err(Error::shape(self.data.len(), offset));
        }
        Ok(out)
    }

    /// Writes `<stem>.f32` and `<stem>.json`; returns the payload hash.
    pub fn write(&self, stem: &Path) -> Result<String> {
        let (mpath, ppath) = paths(stem);
        if let Some(dir) = mpath.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes = payload_bytes(&self.data);
        let mut manifest = self.manifest.clone();
        manifest.sha256 = sha256_hex(&bytes);
        std::fs::write(&ppath, &bytes)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Bundle {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        std::fs::write(&mpath, text + "\n")?;
        Ok(manifest.sha256)
    }

    /// Reads and verifies a bundle.
    pub fn read(stem: &Path) -> Result<Self> {
        let (mpath, ppath) = paths(stem);
        let fail = |path: &Path, reason: String| Error::Bundle {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(&mpath).map_err(|e| fail(&mpath, format!("unreadable manifest: {e}")))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| fail(&mpath, format!("malformed manifest: {e}")))?;
        if manifest.schema != BUNDLE_SCHEMA {
            return Err(fail(&mpath, format!("unknown schema {:?}", manifest.schema)));
        }
        if manifest.dims.len() != manifest.shape.len() {
            return Err(fail(&mpath, "dimension names do not match shape rank".into()));
        }
        let bytes = std::fs::read(&ppath).map_err(|e| fail(&ppath, format!("unreadable payload: {e}")))?;
        let n: usize = manifest.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(fail(
                &ppath,
                format!("payload length {} != 4 x product(shape) = {}", bytes.len(), 4 * n),
            ));
        }
        let digest = sha256_hex(&bytes);
        if digest != manifest.sha256 {
            return Err(fail(&ppath, format!("hash mismatch: manifest {} payload {digest}", manifest.sha256)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { manifest, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fields_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::latlon(4, 8).unwrap();
        let data = Array4::from_shape_fn((2, 2, 4, 8), |(t, c, i, j)| (t + 2 * c) as f64 + 0.25 * i as f64 - j as f64);
        let f = FieldSet::new(data, vec![ChannelMeta::new("t2m", "K"), ChannelMeta::precip("tp", "mm")], grid).unwrap();
        let stem = dir.path().join("sub/fine");
        ArrayBundle::from_fields(&f, "h", 3).unwrap().write(&stem).unwrap();
        let back = ArrayBundle::read(&stem).unwrap();
        assert_eq!(back.manifest.config_hash, "h");
        assert_eq!(back.to_fields().unwrap(), f);
    }

    #[test]
    fn ensemble_round_trip() {
        let grid = Grid::latlon(4, 8).unwrap();
        let members: Vec<FieldSet> = (0..3)
            .map(|e| {
                let data = Array4::from_shape_fn((2, 1, 4, 8), |(t, _, i, j)| (e * 100 + t * 10 + i) as f64 + 0.5 * j as f64);
                FieldSet::new(data, vec![ChannelMeta::new("t2m", "K")], grid.clone()).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ens");
        ArrayBundle::from_ensemble(&members, "h", 0).unwrap().write(&stem).unwrap();
        assert_eq!(ArrayBundle::read(&stem).unwrap().to_ensemble().unwrap(), members);
    }

    #[test]
    fn segments_round_trip() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[4]), vec![-1.0, 0.5, 0.0, 9.0]).unwrap();
        let segs = vec![("w".to_string(), a), ("b".to_string(), b)];
        let bundle = ArrayBundle::from_segments(&segs, "x", 0).unwrap();
        assert_eq!(bundle.to_segments().unwrap(), segs);
    }

    #[test]
    fn corruption_is_reported_with_file_and_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("b");
        let b = ArrayBundle::new(vec![1.0, 2.0, 3.0], vec![3], vec!["x".into()], "h", 0).unwrap();
        b.write(&stem).unwrap();
        let (mpath, ppath) = paths(&stem);

        let mut bytes = std::fs::read(&ppath).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&ppath, &bytes).unwrap();
        let msg = ArrayBundle::read(&stem).unwrap_err().to_string();
        assert!(msg.contains("hash mismatch") && msg.contains("b.f32"), "{msg}");

        std::fs::write(&ppath, &bytes[..8]).unwrap();
        let msg = ArrayBundle::read(&stem).unwrap_err().to_string();
        assert!(msg.contains("payload length"), "{msg}");

        std::fs::remove_file(&mpath).unwrap();
        let msg = ArrayBundle::read(&stem).unwrap_err().to_string();
        assert!(msg.contains("b.json"), "{msg}");
        assert!(ArrayBundle::new(vec![1.0], vec![2], vec!["x".into()], "", 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn random_payload_round_trips_bit_exactly(bits in proptest::collection::vec(any::<u32>(), 1..200)) {
            let data: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).collect();
            let n = data.len();
            let b = ArrayBundle::new(data.clone(), vec![n], vec!["x".into()], "h", 1).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let stem = dir.path().join("p");
            let h1 = b.write(&stem).unwrap();
            let back = ArrayBundle::read(&stem).unwrap();
            let same = back.data.iter().zip(&data).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
            let h2 = back.write(&stem).unwrap();
            prop_assert_eq!(h1, h2);
        }
    }
}
