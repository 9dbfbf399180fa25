use super::Scalar;
use crate::error::{Error, Result};

/// Dense rank-4 array in `batch x channels x height x width` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor dimensions must be >= 1, got {shape:?}"
        );
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let [b, c, h, w] = shape;
        let mut i = 0;
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f([n, ch, y, x]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Values per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, [n, c, y, x]: [usize; 4]) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    /// Slice of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.item(n).to_vec(),
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    /// Concatenates along the channel axis; `a` occupies the leading block.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Self::concat_many(&[a, b])
    }

    pub fn concat_many(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let [b, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != b || p.shape[2] != h || p.shape[3] != w {
                return Err(Error::shape("concat_channels", &first.shape, &p.shape));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(b * c * h * w);
        for n in 0..b {
            for p in parts {
                data.extend_from_slice(p.item(n));
            }
        }
        Ok(Tensor {
            shape: [b, c, h, w],
            data,
        })
    }

    /// Splits along the channel axis into blocks of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        let [b, c, h, w] = self.shape;
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "cannot split {c} channels into {sizes:?}"
            )));
        }
        let plane = h * w;
        let mut out: Vec<Vec<T>> = sizes
            .iter()
            .map(|&s| Vec::with_capacity(b * s * plane))
            .collect();
        for n in 0..b {
            let item = self.item(n);
            let mut off = 0;
            for (o, &s) in out.iter_mut().zip(sizes) {
                o.extend_from_slice(&item[off * plane..(off + s) * plane]);
                off += s;
            }
        }
        Ok(out
            .into_iter()
            .zip(sizes)
            .map(|(data, &s)| Tensor {
                shape: [b, s, h, w],
                data,
            })
            .collect())
    }

    /// Stacks tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut b = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
            b += t.shape[0];
        }
        Ok(Tensor {
            shape: [b, c, h, w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_shapes_and_order() {
        let a = Tensor::<f32>::from_fn([1, 3, 4, 4], |[_, c, y, x]| (c * 100 + y * 4 + x) as f32);
        let b = Tensor::<f32>::full([1, 1, 4, 4], -1.0);
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), [1, 4, 4, 4]);
        assert_eq!(&cat.data()[..16], &a.data()[..16]);
        assert!(cat.data()[48..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 3, 8, 8]);
        assert!(matches!(
            Tensor::concat_channels(&a, &b),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn split_inverts_concat_over_batches() {
        let a = Tensor::<f64>::from_fn([2, 2, 3, 3], |[n, c, y, x]| (n * 1000 + c * 100 + y * 3 + x) as f64);
        let b = Tensor::<f64>::from_fn([2, 1, 3, 3], |[n, _, y, x]| -((n * 10 + y * 3 + x) as f64));
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        let parts = cat.split_channels(&[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(Tensor::<f32>::from_vec([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }
}
