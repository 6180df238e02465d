//! Row-major dense arrays.

use crate::Scalar;

/// A dense n-dimensional array in row-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> NdArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// The single element of a 1-element array.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2d array {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2d array {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Self { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// C = A·B, with optional transposition of either operand. Each case
    /// keeps the innermost walk contiguous.
    pub fn gemm(a: &Self, ta: bool, b: &Self, tb: bool) -> Self {
        assert_eq!(a.shape.len(), 2, "gemm lhs must be 2d");
        assert_eq!(b.shape.len(), 2, "gemm rhs must be 2d");
        let (m, k) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
        let (kb, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
        assert_eq!(k, kb, "gemm inner dims: {:?}{} x {:?}{}", a.shape, if ta { "ᵀ" } else { "" }, b.shape, if tb { "ᵀ" } else { "" });
        let mut out = Self::zeros(&[m, n]);
        match (ta, tb) {
            (false, false) => {
                for i in 0..m {
                    let arow = &a.data[i * k..(i + 1) * k];
                    let orow = &mut out.data[i * n..(i + 1) * n];
                    for (p, &av) in arow.iter().enumerate() {
                        if av == T::zero() {
                            continue;
                        }
                        let brow = &b.data[p * n..(p + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            (false, true) => {
                // Row-by-row dot products; both operands walk contiguously.
                for i in 0..m {
                    let arow = &a.data[i * k..(i + 1) * k];
                    for j in 0..n {
                        let brow = &b.data[j * k..(j + 1) * k];
                        let mut acc = T::zero();
                        for (&av, &bv) in arow.iter().zip(brow) {
                            acc += av * bv;
                        }
                        out.data[i * n + j] = acc;
                    }
                }
            }
            (true, false) => {
                // Rank-1 accumulation over the shared leading index.
                for p in 0..k {
                    let arow = &a.data[p * m..(p + 1) * m];
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (i, &av) in arow.iter().enumerate() {
                        if av == T::zero() {
                            continue;
                        }
                        let orow = &mut out.data[i * n..(i + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            (true, true) => {
                for i in 0..m {
                    for p in 0..k {
                        let av = a.at2(p, i);
                        if av == T::zero() {
                            continue;
                        }
                        for j in 0..n {
                            out.data[i * n + j] += av * b.at2(j, p);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn transposed2(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_computed() {
        let a = NdArray::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = NdArray::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = NdArray::gemm(&a, false, &b, false);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        let a = NdArray::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let b = NdArray::from_vec(&[2, 3], vec![0.3, 2.0, -1.0, 0.7, -0.2, 4.0]);
        let nt = NdArray::gemm(&a, false, &b, true);
        let explicit = NdArray::gemm(&a, false, &b.transposed2(), false);
        assert_eq!(nt, explicit);
        let tn = NdArray::gemm(&a, true, &b, false);
        let explicit = NdArray::gemm(&a.transposed2(), false, &b, false);
        assert_eq!(tn, explicit);
    }
}
