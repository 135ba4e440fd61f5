//! NDT1 raw tensor records.
//!
//! Layout: magic `NDT1`, `u8` rank, `rank` little-endian `u32` extents,
//! `u8` dtype tag (0 = f32, 1 = f64), then the little-endian payload.

use std::io::{Read, Write};

use crate::array::NdArray;
use crate::element::{DType, Element};
use crate::error::{NdError, Result};

pub const MAGIC: &[u8; 4] = b"NDT1";

impl<T: Element> NdArray<T> {
    pub fn to_ndt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + self.len() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.push(self.rank() as u8);
        for &d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &x in self.data() {
            x.write_le(&mut out);
        }
        out
    }

    pub fn write_ndt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_ndt_bytes())?;
        Ok(())
    }

    /// Reads one record. The stored dtype must match `T`.
    pub fn read_ndt<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NdError::Format(format!("bad magic {magic:?}")));
        }
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        let rank = b[0] as usize;
        if rank == 0 {
            return Err(NdError::Format("rank 0".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e = [0u8; 4];
            r.read_exact(&mut e)?;
            shape.push(u32::from_le_bytes(e) as usize);
        }
        r.read_exact(&mut b)?;
        let dtype = DType::from_tag(b[0])
            .ok_or_else(|| NdError::Format(format!("unknown dtype tag {}", b[0])))?;
        if dtype != T::DTYPE {
            return Err(NdError::Format(format!(
                "dtype {dtype:?} stored, {:?} requested",
                T::DTYPE
            )));
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * dtype.size()];
        r.read_exact(&mut payload)?;
        let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
        NdArray::new(shape, data)
    }
}
