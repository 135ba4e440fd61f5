use crate::element::Element;
use crate::error::{NdError, Result};

/// Dense row-major array with a fixed shape.
///
/// Once an array is handed out by a public operation it holds only finite
/// values; kernels that would produce NaN or infinity report
/// [`NdError::NonFinite`] instead.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> NdArray<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if shape.contains(&0) {
            return Err(NdError::invalid("NdArray::new", "zero-sized extent"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds without validating shape; callers guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Shape as `(N, C, H, W)` for rank-4 arrays.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(NdError::Rank {
                op,
                expected: 4,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(NdError::Rank {
                op,
                expected: self.shape.len(),
                got: other.shape.clone(),
            });
        }
        for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(NdError::AxisMismatch {
                    op,
                    axis: axis_name(axis, self.shape.len()),
                    expected: a,
                    got: b,
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(NdError::NonFinite { op })
        }
    }

    pub fn sum(&self) -> T {
        T::from_f64(self.data.iter().map(|x| x.as_f64()).sum())
    }

    pub fn mean(&self) -> T {
        T::from_f64(self.data.iter().map(|x| x.as_f64()).sum::<f64>() / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Converts to another precision.
    pub fn cast<U: Element>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// One sample of a batch (`[N, ...] -> [1, ...]`).
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let n = self.shape[0];
        if index >= n {
            return Err(NdError::invalid(
                "batch_item",
                format!("index {index} out of {n}"),
            ));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Concatenates arrays along the leading (batch) axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| NdError::invalid("stack_batch", "no arrays"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for item in items {
            if item.shape[1..] != first.shape[1..] {
                return Err(NdError::invalid(
                    "stack_batch",
                    format!(
                        "item shape {:?} does not match {:?}",
                        item.shape, first.shape
                    ),
                ));
            }
            n += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

pub(crate) fn axis_name(axis: usize, rank: usize) -> &'static str {
    if rank == 4 {
        ["N", "C", "H", "W"][axis]
    } else {
        ["axis0", "axis1", "axis2", "axis3", "axis4", "axis5"]
            .get(axis)
            .copied()
            .unwrap_or("axis")
    }
}
