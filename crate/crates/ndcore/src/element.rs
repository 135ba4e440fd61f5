//! Scalar element types and the dense matrix product used by every kernel.

use std::fmt::Debug;

use num_traits::Float;

/// On-disk dtype tag of the NDT1 format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A real scalar that arrays and tapes can be built over (`f32` or `f64`).
pub trait Element:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Exponential used by the activation and softmax kernels.
    fn fast_exp(self) -> Self;

    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).fast_exp())
        } else {
            let e = self.fast_exp();
            e / (Self::one() + e)
        }
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    #[inline(always)]
    fn fast_exp(self) -> Self {
        expf_poly(self)
    }

    #[inline(always)]
    fn sigmoid(self) -> Self {
        // exp is clamped, so this never divides by infinity.
        1.0 / (1.0 + expf_poly(-self))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn fast_exp(self) -> Self {
        self.exp()
    }
}

/// Branch-free `exp` for `f32` (range reduction by ln 2, degree-6 polynomial),
/// written so that loops over slices vectorize. Inputs are clamped to
/// [-87.3, 88.3]; relative error stays within a few ulp.
#[inline(always)]
pub fn expf_poly(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.3, 88.3);
    // Round to nearest through the 1.5 * 2^23 shifter; avoids a libm call.
    const SHIFTER: f32 = 12_582_912.0;
    let n = (x * LOG2E + SHIFTER) - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let p = p * r * r + r + 1.0;
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

/// Row-major matrix product `c = alpha * op(a) @ op(b) + beta * c`.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. With `trans_a`, `a` is stored as
/// a `k x m` row-major matrix (likewise `trans_b`: `b` stored `n x k`).
/// When `beta` is zero the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too small");
    assert!(b.len() >= k * n, "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    // Column-major view of the row-major problem: c^T = op(b)^T op(a)^T.
    let (lhs_rs, lhs_cs) = if trans_b {
        (k as isize, 1)
    } else {
        (1, n as isize)
    };
    let (rhs_rs, rhs_cs) = if trans_a {
        (m as isize, 1)
    } else {
        (1, k as isize)
    };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        gemm::gemm(
            n,
            m,
            k,
            c.as_mut_ptr(),
            n as isize,
            1,
            beta != T::zero(),
            b.as_ptr(),
            lhs_cs,
            lhs_rs,
            a.as_ptr(),
            rhs_cs,
            rhs_rs,
            beta,
            alpha,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}
