use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without validating extents. Zero-sized leading
    /// dimensions are permitted here (empty token sets).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self::from_parts(vec![rows, cols], data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Self::from_parts(vec![rows.len(), cols], rows.concat()))
    }

    pub fn identity(n: usize) -> Self {
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor; rank-1 tensors read as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                let c = *self.shape.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
///
/// Each output element accumulates `a[i][p]·b[p][j]` for ascending `p`
/// starting from `0.0`, so results are bit-identical to a naive triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (n, _) = b.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = a.dims2();
    let (_, n) = b.dims2();
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Softmax along `axis`, with max-subtraction for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!("axis {axis} out of range for rank {}", x.rank())));
    }
    let n = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = x.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Layer normalization over the last axis with an affine `gain`/`bias`
/// (each of the last-axis extent).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("layer_norm", &x.shape, gain.shape()));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let (mean, var) = moments(row);
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Population mean and variance.
pub(crate) fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Output length of a valid strided 1-D convolution.
pub fn conv1d_out_len(len: usize, window: usize, stride: usize) -> Result<usize> {
    if stride == 0 || window == 0 {
        return Err(Error::invalid("conv1d window and stride must be positive"));
    }
    if len < window {
        return Err(Error::invalid(format!(
            "conv1d input length {len} is shorter than window {window}"
        )));
    }
    Ok((len - window) / stride + 1)
}

/// Valid (unpadded) cross-correlation of `x[T×Cin]` with `kernels[w×Cin×Cout]`.
pub fn conv1d(x: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    if x.rank() != 2 || kernels.rank() != 3 || kernels.shape[1] != x.shape[1] {
        return Err(Error::shape("conv1d", &x.shape, &kernels.shape));
    }
    let (t, cin) = (x.shape[0], x.shape[1]);
    let (w, cout) = (kernels.shape[0], kernels.shape[2]);
    let t_out = conv1d_out_len(t, w, stride)?;
    let mut out = vec![0.0; t_out * cout];
    for o in 0..t_out {
        let orow = &mut out[o * cout..(o + 1) * cout];
        for k in 0..w {
            let xrow = x.row(o * stride + k);
            for (ci, &xv) in xrow.iter().enumerate().take(cin) {
                let krow = &kernels.data[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                for (acc, &kv) in orow.iter_mut().zip(krow) {
                    *acc += xv * kv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t_out, cout], out))
}
