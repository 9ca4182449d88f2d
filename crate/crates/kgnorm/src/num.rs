//! Scalar abstraction so the numeric core runs in f32 (training/inference)
//! or f64 (gradient-check builds) from the same code.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use std::io::{Read, Write};

/// Floating-point element type of all tensors.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Checkpoint precision tag (0 = f32, 1 = f64).
    const PRECISION_TAG: u8;

    fn write_slice<W: Write>(data: &[Self], w: &mut W) -> std::io::Result<()>;
    fn read_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<Self>>;
}

/// Cast from f64 into the working precision.
pub fn from_f64<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 conversion")
}

/// Cast a scalar up to f64.
pub fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().expect("f64 conversion")
}

impl Scalar for f32 {
    const PRECISION_TAG: u8 = 0;

    fn write_slice<W: Write>(data: &[Self], w: &mut W) -> std::io::Result<()> {
        for &x in data {
            w.write_f32::<LittleEndian>(x)?;
        }
        Ok(())
    }

    fn read_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<Self>> {
        let mut v = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut v)?;
        Ok(v)
    }
}

impl Scalar for f64 {
    const PRECISION_TAG: u8 = 1;

    fn write_slice<W: Write>(data: &[Self], w: &mut W) -> std::io::Result<()> {
        for &x in data {
            w.write_f64::<LittleEndian>(x)?;
        }
        Ok(())
    }

    fn read_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<Self>> {
        let mut v = vec![0f64; n];
        r.read_f64_into::<LittleEndian>(&mut v)?;
        Ok(v)
    }
}

/// Outer product `a b^T` as an `m x n` matrix.
pub fn outer<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> Array2<F> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[[i, j]] = ai * bj;
        }
    }
    out
}

/// L2 norm of a vector.
pub fn l2_norm<F: Scalar>(v: &Array1<F>) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn outer_product_shape_and_values() {
        let a = array![1.0f64, 2.0];
        let b = array![3.0f64, 4.0, 5.0];
        let m = outer(&a, &b);
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(m[[1, 2]], 10.0);
        assert_eq!(m[[0, 0]], 3.0);
    }

    #[test]
    fn slice_io_round_trip() {
        let data = vec![1.5f32, -2.25, 0.0, 3.75];
        let mut buf = Vec::new();
        f32::write_slice(&data, &mut buf).unwrap();
        let back = f32::read_vec(&mut buf.as_slice(), 4).unwrap();
        assert_eq!(data, back);

        let data = vec![1.5f64, -2.25e-300];
        let mut buf = Vec::new();
        f64::write_slice(&data, &mut buf).unwrap();
        let back = f64::read_vec(&mut buf.as_slice(), 2).unwrap();
        assert_eq!(data, back);
    }
}
