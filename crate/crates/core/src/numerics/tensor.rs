//! Dense row-major tensors over f32/f64.
//!
//! Buffers are flat `Vec<T>` in row-major order. There are no strided views:
//! reshape keeps the buffer, everything else copies. Binary ops broadcast by
//! trailing-dimension alignment (right-align shapes, each dim must match or
//! be 1).

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element trait: f32 for training, f64 for gradient checking.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// exp() for inner loops. The f32 impl trades ~1e-7 relative accuracy
    /// for a branchless polynomial the compiler can vectorize; f64 keeps
    /// libm exp so float64 gradient checks see the textbook function.
    fn exp_inner(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline(always)]
    fn exp_inner(self) -> Self {
        // exp(x) = 2^k * exp(r), r = x - k*ln2, |r| <= ln2/2.
        // round-to-int via the 1.5*2^23 magic constant keeps the whole body
        // branchless so the loop vectorizer takes it.
        const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
        let x = self.max(-87.0).min(88.0);
        let kf = x * std::f32::consts::LOG2_E + MAGIC;
        let ki = (kf.to_bits() as i32).wrapping_sub(MAGIC.to_bits() as i32);
        let k = kf - MAGIC;
        let r = x - k * std::f32::consts::LN_2;
        let p = 1.0
            + r * (1.0
                + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r / 720.0)))));
        f32::from_bits(((ki + 127) << 23) as u32) * p
    }
}
impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline(always)]
    fn exp_inner(self) -> Self {
        self.exp()
    }
}

/// Shorthand for converting literal constants into the active scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 literal convertible to scalar type")
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking the buffer-length and extent invariants.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "buffer length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same buffer, new shape. Copies nothing but the Vec.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn iter_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides of this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Permute axes, copying into the new layout.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        if axes.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "permute axes {:?} do not match rank {}",
                axes,
                self.shape.len()
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || seen[a] {
                return Err(Error::shape(format!("invalid permutation {axes:?}")));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = self.strides();
        // stride in the input for each output axis
        let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![T::zero(); self.data.len()];
        let mut coords = vec![0usize; out_shape.len()];
        for slot in out.iter_mut() {
            let mut src = 0usize;
            for (c, s) in coords.iter().zip(&gather_strides) {
                src += c * s;
            }
            *slot = self.data[src];
            // odometer increment
            for d in (0..coords.len()).rev() {
                coords[d] += 1;
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Contiguous slice along `axis`: elements `start..start+len`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() || start + len > self.shape[axis] || len == 0 {
            return Err(Error::shape(format!(
                "slice axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * self.shape[axis] * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != first.shape[d] {
                    return Err(Error::shape(format!(
                        "concat extent mismatch at dim {d}: {:?} vs {:?}",
                        p.shape, first.shape
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let rows = p.shape[axis];
                let base = o * rows * inner;
                data.extend_from_slice(&p.data[base..base + rows * inner]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Elementwise binary op with trailing-dimension broadcast.
    pub fn broadcast_zip(&self, rhs: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let out_shape = broadcast_shape(&self.shape, &rhs.shape)?;
        if self.shape == rhs.shape {
            // fast path: same layout
            let data = self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: out_shape,
                data,
            });
        }
        let la = BroadcastLayout::new(&self.shape, &out_shape);
        let lb = BroadcastLayout::new(&rhs.shape, &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut coords = vec![0usize; out_shape.len()];
        for _ in 0..numel {
            data.push(f(self.data[la.offset(&coords)], rhs.data[lb.offset(&coords)]));
            for d in (0..coords.len()).rev() {
                coords[d] += 1;
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Sum-reduce a gradient of `self.shape` down to `target` (the broadcast
    /// inverse): broadcasted dims accumulate.
    pub fn reduce_to(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        // target right-aligns with self.shape
        let layout = BroadcastLayout::new(target, &self.shape);
        let mut out = Tensor::zeros(target);
        let mut coords = vec![0usize; self.shape.len()];
        for &v in &self.data {
            let dst = layout.offset(&coords);
            out.data[dst] = out.data[dst] + v;
            for d in (0..coords.len()).rev() {
                coords[d] += 1;
                if coords[d] < self.shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        Ok(out)
    }
}

/// Standard-normal tensor via Box-Muller on the given stream; the fixed
/// draw order keeps results reproducible across platforms.
pub fn random_normal<T: Scalar>(
    shape: &[usize],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<T> {
    use rand::Rng;
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        lit::<T>((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
    })
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Broadcast-compatible output shape, trailing-dimension alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ea != eb && ea != 1 && eb != 1 {
            return Err(Error::shape(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible at dim {i}"
            )));
        }
        out[i] = ea.max(eb);
    }
    Ok(out)
}

/// Maps output coordinates to a flat offset in a (possibly broadcast) input.
struct BroadcastLayout {
    // stride per output axis; 0 where the input extent is 1
    strides: Vec<usize>,
}

impl BroadcastLayout {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let in_strides = strides_of(in_shape);
        let pad = out_shape.len() - in_shape.len();
        let strides = (0..out_shape.len())
            .map(|d| {
                if d < pad || in_shape[d - pad] == 1 {
                    0
                } else {
                    in_strides[d - pad]
                }
            })
            .collect();
        BroadcastLayout { strides }
    }

    #[inline]
    fn offset(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.strides)
            .map(|(c, s)| c * s)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 3]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let t = Tensor::<f32>::from_fn(&[3, 2, 2], |i| i as f32);
        let a = t.slice(0, 0, 1).unwrap();
        let b = t.slice(0, 1, 2).unwrap();
        let back = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn reduce_to_sums_broadcast_dims() {
        let g = Tensor::<f64>::ones(&[2, 3]);
        let r = g.reduce_to(&[3]).unwrap();
        assert_eq!(r.data(), &[2.0, 2.0, 2.0]);
        let r2 = g.reduce_to(&[1, 3]).unwrap();
        assert_eq!(r2.shape(), &[1, 3]);
    }
}
