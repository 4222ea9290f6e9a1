//! Dense row-major 2-D blocks of `f64`.
//!
//! Everything numerically heavy in the crate (network evaluation, the tape,
//! batched control-variate evaluation) works on `Tensor`s whose rows are
//! samples and whose columns are features. A scalar is a 1x1 tensor.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    /// Panics if `data.len() != rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    /// A single row.
    pub fn row_vector(values: &[f64]) -> Self {
        Self::new(1, values.len(), values.to_vec())
    }

    /// Stacks equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// Columns `start..start + len` as a new tensor.
    pub fn columns(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column range out of bounds");
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Self { rows: self.rows, cols: len, data }
    }

    /// Side-by-side concatenation `[self, other]`.
    pub fn concat_cols(&self, other: &Tensor) -> Self {
        assert_eq!(self.rows, other.rows, "concat_cols row mismatch");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Self { rows: self.rows, cols, data }
    }

    /// `out[:, k] = self[:, index[k]]`.
    pub fn gather_cols(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * index.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(index.iter().map(|&j| r[j]));
        }
        Self { rows: self.rows, cols: index.len(), data }
    }

    /// Rows selected by `index`, in order.
    pub fn gather_rows(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: index.len(), cols: self.cols, data }
    }

    /// Rows `start..start + len`.
    pub fn row_range(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "row range out of bounds");
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Column sums as a 1 x cols tensor.
    pub fn col_sums(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Self { rows: 1, cols: self.cols, data: out }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Tensor) -> Self {
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self * w + bias`, with `bias` added to every row.
    pub fn affine(&self, w: &Tensor, bias: &[f64]) -> Self {
        assert_eq!(bias.len(), w.cols, "affine bias length mismatch");
        let mut out = Tensor::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(bias);
        }
        gemm(self, false, w, false, 1.0, &mut out);
        out
    }

    /// `n` copies of `row` stacked.
    pub fn repeat_row(row: &[f64], n: usize) -> Self {
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Self { rows: n, cols: row.len(), data }
    }
}

/// `out = beta * out + op(a) * op(b)` where `op` optionally transposes.
///
/// Backed by `matrixmultiply`, which picks its kernel by runtime CPU feature
/// detection; results are bit-reproducible on a given machine.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool, beta: f64, out: &mut Tensor) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.shape(), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes and strides were checked above; all three buffers are
    // live for the duration of the call and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Elementwise hyperbolic tangent, vectorizable and accurate to a few ulp.
pub mod fastmath {
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52

    /// tanh(x) for finite or infinite x; NaN propagates.
    ///
    /// |x| <= 0.625 uses the odd rational approximation `a + a z P(z)/Q(z)`
    /// (z = x^2); larger |x| uses `(1 - E)/(1 + E)` with `E = exp(-2|x|)`
    /// from a Pade form `2^n (q + p)/(q - p)`. Both branches are evaluated
    /// and share one division, which keeps the loop vectorizable and cheap.
    #[inline(always)]
    pub fn tanh(x: f64) -> f64 {
        let a = x.abs();

        // exp(-2a) = 2^n * (q + p) / (q - p), n = round(-2a / ln 2)
        let t = (-2.0 * a).max(-700.0);
        const C1: f64 = 6.931_457_519_531_25E-1;
        const C2: f64 = 1.428_606_820_309_417_232_12E-6;
        let shifted = t * std::f64::consts::LOG2_E + MAGIC;
        let n = shifted - MAGIC;
        let r = t - n * C1 - n * C2;
        let rr = r * r;
        let p = r
            * ((1.261_771_930_748_105_908_78E-4 * rr + 3.029_944_077_074_419_613_00E-2) * rr
                + 9.999_999_999_999_999_999_10E-1);
        let q = ((3.001_985_051_386_644_550_42E-6 * rr + 2.524_483_403_496_841_041_92E-3) * rr
            + 2.272_655_482_081_550_287_66E-1)
            * rr
            + 2.000_000_000_000_000_000_09E0;
        // Low bits of `shifted` hold n as a two's-complement integer.
        let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
        let (qm, qp) = (q - p, scale * (q + p));
        let (num_large, den_large) = (qm - qp, qm + qp);

        let z = x * x;
        let pn = (-9.643_991_794_250_522_386_28E-1 * z - 9.928_772_310_019_185_865_64E1) * z
            - 1.614_687_684_417_084_479_52E3;
        let qn = ((z + 1.128_116_784_916_329_314_02E2) * z + 2.235_488_390_601_004_485_83E3) * z
            + 4.844_063_053_251_254_860_48E3;

        let large = a > 0.625;
        let num = if large { num_large } else { a * z * pn };
        let den = if large { den_large } else { qn };
        let ratio = num / den;
        let r = if large { ratio } else { a + ratio };
        r.copysign(x)
    }

    #[inline(always)]
    fn tanh_loop(input: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(input) {
            *o = tanh(x);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn tanh_loop_avx2(input: &[f64], out: &mut [f64]) {
        tanh_loop(input, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn tanh_loop_avx512(input: &[f64], out: &mut [f64]) {
        tanh_loop(input, out)
    }

    /// `out[i] = tanh(input[i])`. The AVX2 and AVX-512 paths run the same
    /// instruction sequence on wider registers (no contraction), so every path
    /// agrees bitwise with [`tanh`].
    pub fn tanh_slice(input: &[f64], out: &mut [f64]) {
        assert_eq!(input.len(), out.len());
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                unsafe { tanh_loop_avx512(input, out) };
                return;
            }
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { tanh_loop_avx2(input, out) };
                return;
            }
        }
        tanh_loop(input, out)
    }
}
