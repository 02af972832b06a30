//! Binary array container with a JSON manifest.
//!
//! One file holds a small JSON header (version, caller metadata, array
//! names/shapes/dtypes) followed by the raw little-endian array payloads in
//! manifest order. Instances, sim states, checkpoints, and dataset samples
//! all serialize through this container.
//!
//! Layout:
//!
//! ```text
//! b"FCBV"            magic
//! u32 LE             container format version (currently 1)
//! u64 LE             manifest byte length
//! manifest JSON      { "version", "meta", "arrays": [{name, dtype, shape}] }
//! payload bytes      arrays back to back, LE, manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FcbvError, Result};

const MAGIC: &[u8; 4] = b"FCBV";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArraySpec>,
}

/// Flat array payload plus shape.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::F32(_) => "f32",
            ArrayData::I64(_) => "i64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }
}

/// An ordered set of named arrays plus free-form JSON metadata.
#[derive(Debug, Clone, Default)]
pub struct ArrayContainer {
    pub meta: serde_json::Value,
    entries: Vec<(String, Vec<usize>, ArrayData)>,
}

impl ArrayContainer {
    pub fn new(meta: serde_json::Value) -> Self {
        ArrayContainer { meta, entries: Vec::new() }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.to_string(), shape, data));
    }

    pub fn push_f64_matrix(&mut self, name: &str, arr: &Array2<f64>) {
        let shape = vec![arr.nrows(), arr.ncols()];
        let data = arr.iter().copied().collect();
        self.push(name, shape, ArrayData::F64(data));
    }

    pub fn push_f32_matrix(&mut self, name: &str, arr: &Array2<f64>) {
        let shape = vec![arr.nrows(), arr.ncols()];
        let data = arr.iter().map(|&x| x as f32).collect();
        self.push(name, shape, ArrayData::F32(data));
    }

    pub fn push_points(&mut self, name: &str, pts: &[[f64; 3]]) {
        let flat: Vec<f64> = pts.iter().flat_map(|p| p.iter().copied()).collect();
        self.push(name, vec![pts.len(), 3], ArrayData::F64(flat));
    }

    pub fn push_indices(&mut self, name: &str, idx: &[usize]) {
        let flat: Vec<i64> = idx.iter().map(|&i| i as i64).collect();
        self.push(name, vec![idx.len()], ArrayData::I64(flat));
    }

    pub fn push_f64_vec(&mut self, name: &str, v: &[f64]) {
        self.push(name, vec![v.len()], ArrayData::F64(v.to_vec()));
    }

    fn find(&self, name: &str) -> Result<&(String, Vec<usize>, ArrayData)> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| FcbvError::Container(format!("missing array `{name}`")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.find(name)?.1)
    }

    pub fn f64_matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (_, shape, data) = self.find(name)?;
        if shape.len() != 2 {
            return Err(FcbvError::Container(format!("array `{name}` is not 2-d")));
        }
        let flat: Vec<f64> = match data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::I64(_) => {
                return Err(FcbvError::Container(format!("array `{name}` is integer")))
            }
        };
        Array2::from_shape_vec((shape[0], shape[1]), flat)
            .map_err(|e| FcbvError::Container(e.to_string()))
    }

    pub fn points(&self, name: &str) -> Result<Vec<[f64; 3]>> {
        let m = self.f64_matrix(name)?;
        if m.ncols() != 3 {
            return Err(FcbvError::Container(format!("array `{name}` is not n x 3")));
        }
        Ok(m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    pub fn indices(&self, name: &str) -> Result<Vec<usize>> {
        let (_, _, data) = self.find(name)?;
        match data {
            ArrayData::I64(v) => Ok(v.iter().map(|&i| i as usize).collect()),
            _ => Err(FcbvError::Container(format!("array `{name}` is not integer"))),
        }
    }

    pub fn f64_vec(&self, name: &str) -> Result<Vec<f64>> {
        let (_, _, data) = self.find(name)?;
        match data {
            ArrayData::F64(v) => Ok(v.clone()),
            ArrayData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            ArrayData::I64(_) => Err(FcbvError::Container(format!("array `{name}` is integer"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: self
                .entries
                .iter()
                .map(|(name, shape, data)| ArraySpec {
                    name: name.clone(),
                    dtype: data.dtype().to_string(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for (_, _, data) in &self.entries {
            match data {
                ArrayData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::I64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FcbvError::Container(format!(
                "{}: bad magic, not an array container",
                path.display()
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(FcbvError::Container(format!(
                "unsupported container version {version}"
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let manifest_len = u64::from_le_bytes(buf8) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        r.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let mut entries = Vec::with_capacity(manifest.arrays.len());
        for spec in &manifest.arrays {
            let n: usize = spec.shape.iter().product();
            let data = match spec.dtype.as_str() {
                "f64" => {
                    let mut v = vec![0f64; n];
                    for x in v.iter_mut() {
                        r.read_exact(&mut buf8)?;
                        *x = f64::from_le_bytes(buf8);
                    }
                    ArrayData::F64(v)
                }
                "f32" => {
                    let mut v = vec![0f32; n];
                    for x in v.iter_mut() {
                        r.read_exact(&mut buf4)?;
                        *x = f32::from_le_bytes(buf4);
                    }
                    ArrayData::F32(v)
                }
                "i64" => {
                    let mut v = vec![0i64; n];
                    for x in v.iter_mut() {
                        r.read_exact(&mut buf8)?;
                        *x = i64::from_le_bytes(buf8);
                    }
                    ArrayData::I64(v)
                }
                other => {
                    return Err(FcbvError::Container(format!("unknown dtype `{other}`")));
                }
            };
            entries.push((spec.name.clone(), spec.shape.clone(), data));
        }
        Ok(ArrayContainer { meta: manifest.meta, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fcbv");
        let mut c = ArrayContainer::new(serde_json::json!({"kind": "test", "n": 3}));
        c.push_f64_matrix("m", &array![[1.0, 2.5], [-3.25, f64::MIN_POSITIVE]]);
        c.push_indices("idx", &[0, 7, 42]);
        c.push_f64_vec("v", &[0.1, 0.2]);
        c.save(&path).unwrap();

        let loaded = ArrayContainer::load(&path).unwrap();
        assert_eq!(loaded.meta["kind"], "test");
        assert_eq!(loaded.f64_matrix("m").unwrap(), c.f64_matrix("m").unwrap());
        assert_eq!(loaded.indices("idx").unwrap(), vec![0, 7, 42]);
        assert_eq!(loaded.f64_vec("v").unwrap(), vec![0.1, 0.2]);
    }

    #[test]
    fn missing_array_reports_name() {
        let c = ArrayContainer::new(serde_json::Value::Null);
        let err = c.f64_matrix("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a container at all").unwrap();
        assert!(ArrayContainer::load(&path).is_err());
    }
}
