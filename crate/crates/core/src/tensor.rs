//! Dense row-major `f64` tensors and the matrix kernels the tape is built on.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// A `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return shape_err("from_rows on empty row list");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &NdTensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &NdTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major matrix kernels over raw slices.
pub mod kernels {
    use crate::parallel;

    /// Work (n*k*m) above which row blocks are dispatched to the pool.
    const PAR_THRESHOLD: usize = 1 << 16;

    fn matmul_rows(x: &[f64], w: &[f64], out: &mut [f64], k: usize, m: usize) {
        for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
            or.iter_mut().for_each(|v| *v = 0.0);
            for (p, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &w[p * m..(p + 1) * m];
                for (o, &wv) in or.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
    }

    /// `out[n,m] = x[n,k] · w[k,m]`, single-threaded.
    pub fn matmul_seq(x: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        debug_assert_eq!(x.len(), n * k);
        debug_assert_eq!(w.len(), k * m);
        matmul_rows(x, w, out, k, m);
    }

    /// Same as [`matmul_seq`] with row blocks spread over the pool.
    pub fn matmul_par(x: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        debug_assert_eq!(out.len(), n * m);
        let block = 16usize;
        parallel::for_each_chunk_mut(out, block * m, |bi, oc| {
            let rows = oc.len() / m;
            let xs = &x[bi * block * k..(bi * block + rows) * k];
            matmul_rows(xs, w, oc, k, m);
        });
    }

    pub fn matmul(x: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        if n * k * m >= PAR_THRESHOLD && parallel::parallel_enabled() {
            matmul_par(x, w, out, n, k, m)
        } else {
            matmul_seq(x, w, out, n, k, m)
        }
    }

    /// `dx[n,k] += dy[n,m] · wᵀ` where `w` is `[k,m]`.
    pub fn matmul_grad_x(dy: &[f64], w: &[f64], dx: &mut [f64], n: usize, k: usize, m: usize) {
        let body = |dyr: &[f64], dxr: &mut [f64]| {
            for (p, d) in dxr.iter_mut().enumerate() {
                let wr = &w[p * m..(p + 1) * m];
                *d += dyr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        };
        if n * k * m >= PAR_THRESHOLD && parallel::parallel_enabled() {
            parallel::for_each_chunk_mut(dx, k, |i, dxr| body(&dy[i * m..(i + 1) * m], dxr));
        } else {
            for (dyr, dxr) in dy.chunks_exact(m).zip(dx.chunks_exact_mut(k)) {
                body(dyr, dxr);
            }
        }
    }

    /// `dw[k,m] += xᵀ · dy` where `x` is `[n,k]`, `dy` is `[n,m]`.
    ///
    /// Each output row is reduced over `n` in ascending order regardless of
    /// threading, so the result is bitwise independent of the pool size.
    pub fn matmul_grad_w(x: &[f64], dy: &[f64], dw: &mut [f64], n: usize, k: usize, m: usize) {
        if n * k * m >= PAR_THRESHOLD && parallel::parallel_enabled() {
            parallel::for_each_chunk_mut(dw, m, |p, dwr| {
                for i in 0..n {
                    let xv = x[i * k + p];
                    if xv == 0.0 {
                        continue;
                    }
                    for (d, &g) in dwr.iter_mut().zip(&dy[i * m..(i + 1) * m]) {
                        *d += xv * g;
                    }
                }
            });
        } else {
            for (xr, dyr) in x.chunks_exact(k).zip(dy.chunks_exact(m)) {
                for (p, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (d, &g) in dw[p * m..(p + 1) * m].iter_mut().zip(dyr) {
                        *d += xv * g;
                    }
                }
            }
        }
    }
}
