//! Named parameter store with a deterministic binary layout.
//!
//! Parameters are kept sorted by name, so serialization is byte-stable for
//! checkpoint-equality tests. Values are held as f64 in memory and stored
//! as little-endian f32.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::ArrayD;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar values.
    pub fn value_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Serialize as `count u32` then, per entry sorted by name:
    /// `name_len u32 | name bytes | ndim u32 | dims u32... | values f32...`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.map.len() as u32).to_le_bytes())?;
        for (name, value) in &self.map {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.ndim() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in value.iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let values: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), values)
                .map_err(|e| Error::Format(format!("parameter '{name}': {e}")))?;
            map.insert(name, arr);
        }
        Ok(ParamStore { map })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
