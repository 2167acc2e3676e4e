//! Dense row-major containers: [`Volume`] for single-channel 3D scans and
//! label maps, [`Tensor`] for multi-channel feature maps `(C, D, H, W)`.

use crate::scalar::Scalar;

/// A 3D array in `(D, H, W)` order, `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    /// Panics if `data.len()` does not match the product of `dims`.
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "volume size mismatch");
        Self { dims, data }
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> T {
        self.data[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: T) {
        let i = self.index(d, h, w);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume { dims: self.dims, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

impl<T: Scalar> Volume<T> {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum: f64 = self.data.iter().map(|x| x.as_f64()).sum();
        T::lit(sum / self.data.len() as f64)
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        self.map(|x| U::lit(x.as_f64()))
    }
}

/// Multi-channel feature map in `(C, D, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size mismatch");
        Self { shape, data }
    }

    /// Wraps a single volume as a one-channel tensor.
    pub fn from_volume(v: &Volume<T>) -> Self {
        let [d, h, w] = v.dims();
        Self { shape: [1, d, h, w], data: v.data().to_vec() }
    }

    /// Channel `c` as a volume.
    pub fn channel_volume(&self, c: usize) -> Volume<T> {
        Volume::from_vec(self.spatial(), self.channel(c).to_vec())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Self {
        let n = self.spatial_len();
        Self {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Concatenates along the channel axis. Panics on spatial mismatch.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Self {
        let spatial = parts[0].spatial();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut c = 0;
        for p in parts {
            assert_eq!(p.spatial(), spatial, "concat spatial mismatch");
            data.extend_from_slice(&p.data);
            c += p.channels();
        }
        Self { shape: [c, spatial[0], spatial[1], spatial[2]], data }
    }

    /// Spatial mean per channel.
    pub fn channel_means(&self) -> Vec<T> {
        let n = T::of_usize(self.spatial_len());
        (0..self.channels()).map(|c| self.channel(c).iter().copied().sum::<T>() / n).collect()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|x| x.is_zero())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }
}
