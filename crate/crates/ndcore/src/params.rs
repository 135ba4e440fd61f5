use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::array::NdArray;
use crate::element::Element;
use crate::error::{NdError, Result};

/// Named parameter arrays, iterated in sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, NdArray<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: NdArray<T>) -> Option<NdArray<T>> {
        self.entries.insert(path.into(), value)
    }

    pub fn get(&self, path: &str) -> Result<&NdArray<T>> {
        self.entries
            .get(path)
            .ok_or_else(|| NdError::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut NdArray<T>> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NdArray<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all arrays.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(NdArray::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Concatenated records, each a `u16` little-endian path length, the
    /// UTF-8 path, then one NDT1 record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (path, value) in &self.entries {
            out.extend_from_slice(&(path.len() as u16).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&value.to_ndt_bytes());
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut set = Self::new();
        loop {
            let mut len = [0u8; 2];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut path = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut path)?;
            let path = String::from_utf8(path).map_err(|e| NdError::Format(e.to_string()))?;
            let value = NdArray::read_ndt(r)?;
            if set.insert(path.clone(), value).is_some() {
                return Err(NdError::Format(format!("duplicate parameter `{path}`")));
            }
        }
        Ok(set)
    }
}

impl<T> FromIterator<(String, NdArray<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, NdArray<T>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}
