//! Dense NCHW tensors and the elementwise primitives the network is built from.

use std::fmt::Debug;
use std::ops::Range;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};

/// Storage precision of a tensor, also the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type usable in tensors.
pub trait Real: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` holds exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Compare against `other`, naming the first dimension that differs.
    pub fn expect_eq(&self, other: &Shape, context: &str) -> Result<()> {
        let names = ["batch", "channels", "height", "width"];
        for ((name, a), b) in names.iter().zip(self.as_array()).zip(other.as_array()) {
            if a != b {
                return Err(StsError::shape(context, name, a, b));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array in (batch, channel, height, width) row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Real = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.as_array().contains(&0) {
            return Err(StsError::Argument(format!(
                "tensor dimensions must be positive, got {shape}"
            )));
        }
        if data.len() != shape.numel() {
            return Err(StsError::shape("tensor data", "length", shape.numel(), data.len()));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The H×W plane of one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copy out the channel range `range` of every batch member.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.shape.c {
            return Err(StsError::Argument(format!(
                "channel range {range:?} out of bounds for {} channels",
                self.shape.c
            )));
        }
        let shape = self.shape.with_channels(range.len());
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            for c in range.clone() {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor4 { shape, data })
    }

    /// Copy out batch member `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.c * self.shape.plane();
        Tensor4 {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Copy out the spatial window `[y0, y0+h) × [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.shape.h || x0 + w > self.shape.w {
            return Err(StsError::Argument(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.shape.h, self.shape.w
            )));
        }
        let shape = Shape { h, w, ..self.shape };
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            for c in 0..self.shape.c {
                let plane = self.plane(n, c);
                for y in y0..y0 + h {
                    let row = y * self.shape.w;
                    data.extend_from_slice(&plane[row + x0..row + x0 + w]);
                }
            }
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor4<T>) -> Result<()> {
        self.shape.expect_eq(&other.shape, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Elementwise rectifier, `max(0, x)`.
pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `x > 0`; the derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
    x.shape.expect_eq(&upstream.shape, "relu backward")?;
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor4 { shape: x.shape, data })
}

/// Stack tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| StsError::Argument("concat of zero tensors".into()))?;
    let base = first.shape;
    let mut channels = 0;
    for (k, p) in parts.iter().enumerate() {
        let s = p.shape;
        let ctx = format!("concat part {k}");
        if s.n != base.n {
            return Err(StsError::shape(ctx, "batch", base.n, s.n));
        }
        if s.h != base.h {
            return Err(StsError::shape(ctx, "height", base.h, s.h));
        }
        if s.w != base.w {
            return Err(StsError::shape(ctx, "width", base.w, s.w));
        }
        channels += s.c;
    }
    let shape = base.with_channels(channels);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..base.n {
        for p in parts {
            for c in 0..p.shape.c {
                data.extend_from_slice(p.plane(n, c));
            }
        }
    }
    Ok(Tensor4 { shape, data })
}

/// Inverse of [`concat_channels`]: cut `x` into consecutive channel groups.
pub fn split_channels<T: Real>(x: &Tensor4<T>, sizes: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape.c {
        return Err(StsError::shape("split", "channels", x.shape.c, total));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        out.push(x.slice_channels(start..start + s)?);
        start += s;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementOp {
    Add,
    Sub,
    Mul,
}

/// `a op b` elementwise. `b` may also be a single-channel map with the same
/// batch and spatial size as `a`, in which case it is replicated across channels.
pub fn elementwise<T: Real>(op: ElementOp, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let f = |x: T, y: T| match op {
        ElementOp::Add => x + y,
        ElementOp::Sub => x - y,
        ElementOp::Mul => x * y,
    };
    let (sa, sb) = (a.shape, b.shape);
    if sa == sb {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor4 { shape: sa, data });
    }
    if sb.c != 1 {
        return Err(StsError::shape("elementwise", "channels", sa.c, sb.c));
    }
    if sb.n != sa.n {
        return Err(StsError::shape("elementwise broadcast", "batch", sa.n, sb.n));
    }
    if sb.h != sa.h {
        return Err(StsError::shape("elementwise broadcast", "height", sa.h, sb.h));
    }
    if sb.w != sa.w {
        return Err(StsError::shape("elementwise broadcast", "width", sa.w, sb.w));
    }
    let mut data = Vec::with_capacity(sa.numel());
    for n in 0..sa.n {
        let m = b.plane(n, 0);
        for c in 0..sa.c {
            data.extend(a.plane(n, c).iter().zip(m).map(|(&x, &y)| f(x, y)));
        }
    }
    Ok(Tensor4 { shape: sa, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, seed: u64) -> Tensor4<f64> {
        let mut s = seed;
        Tensor4::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor4::<f64>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, StsError::ShapeMismatch { dim: "length", .. }));
    }

    #[test]
    fn relu_values() {
        let x = Tensor4::new(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn relu_idempotent() {
        let x = t(Shape::new(2, 3, 5, 4), 7);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn relu_backward_negative_branch_and_zero() {
        let x = Tensor4::new(Shape::new(1, 1, 1, 3), vec![-0.5, 0.0, 1.0]).unwrap();
        let g = Tensor4::full(x.shape(), 3.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn concat_paper_widths() {
        let a = Tensor4::<f64>::zeros(Shape::new(1, 30, 8, 8));
        let b = Tensor4::<f64>::zeros(Shape::new(1, 30, 8, 8));
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), Shape::new(1, 60, 8, 8));
        let c = Tensor4::<f64>::zeros(Shape::new(1, 20, 8, 8));
        assert_eq!(concat_channels(&[&c, &c, &c]).unwrap().shape(), Shape::new(1, 60, 8, 8));
    }

    #[test]
    fn concat_single_part_is_identity() {
        let a = t(Shape::new(2, 3, 4, 5), 1);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = t(Shape::new(2, 2, 4, 5), 1);
        let b = t(Shape::new(2, 3, 4, 5), 2);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&cat, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_spatial_mismatch_names_dim() {
        let a = Tensor4::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor4::<f64>::zeros(Shape::new(1, 2, 4, 5));
        let err = concat_channels(&[&a, &b]).unwrap_err();
        assert!(matches!(err, StsError::ShapeMismatch { dim: "width", .. }));
    }

    #[test]
    fn elementwise_identities() {
        let x = t(Shape::new(1, 2, 3, 3), 3);
        let zeros = Tensor4::zeros(x.shape());
        assert_eq!(elementwise(ElementOp::Add, &x, &zeros).unwrap(), x);
        assert_eq!(elementwise(ElementOp::Sub, &x, &x).unwrap(), zeros);
    }

    #[test]
    fn elementwise_mask_broadcast() {
        let x = Tensor4::full(Shape::new(1, 2, 2, 2), 5.0);
        let m = Tensor4::new(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = elementwise(ElementOp::Mul, &x, &m).unwrap();
        assert_eq!(y.data(), &[5.0, 0.0, 0.0, 5.0, 5.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn elementwise_incompatible() {
        let x = Tensor4::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let y = Tensor4::<f64>::zeros(Shape::new(1, 2, 2, 2));
        assert!(elementwise(ElementOp::Add, &x, &y).is_err());
    }

    #[test]
    fn crop_and_slice() {
        let x = t(Shape::new(1, 2, 4, 4), 9);
        let c = x.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.get(0, 1, 0, 0), x.get(0, 1, 1, 2));
        assert!(x.crop(3, 0, 2, 2).is_err());
    }
}
