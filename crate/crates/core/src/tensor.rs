//! Dense row-major `f64` tensors and the primitive kernels shared by the
//! eager ops below and by the recording [`Tape`](crate::autograd::Tape).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.data)
    }
}

/// Index of the largest value, lowest index on ties. `None` for empty input.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `Wx + b` for a single input vector.
pub fn affine_transform(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (out, inp) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Dimension(format!("weight must be 2-D, got {s:?}"))),
    };
    if b.shape() != [out] {
        return Err(Error::Dimension(format!(
            "bias shape {:?} does not match {out} outputs",
            b.shape()
        )));
    }
    if x.shape() != [inp] {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match {inp} inputs",
            x.shape()
        )));
    }
    let mut y = vec![0.0; out];
    kernels::linear_forward(x.data(), 1, inp, w.data(), out, Some(b.data()), &mut y);
    Ok(Tensor::vector(y))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Valid (unpadded), stride-1 cross-correlation of a `c_in×H×W` input.
pub fn conv2d(kernels: &Tensor, x: &Tensor) -> Result<Tensor> {
    let geom = ConvGeometry::from_shapes(kernels.shape(), x.shape())?;
    let mut y = vec![0.0; geom.output_len()];
    kernels::conv_forward(&geom, x.data(), kernels.data(), None, &mut y);
    Tensor::new(vec![geom.c_out, geom.out_h(), geom.out_w()], y)
}

/// `-ln softmax(logits)[label]`, evaluated with max subtraction.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    if logits.rank() != 1 {
        return Err(Error::Dimension(format!(
            "logits must be 1-D, got {:?}",
            logits.shape()
        )));
    }
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(kernels::cross_entropy_row(logits.data(), label))
}

/// Shape bookkeeping for a valid stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeometry {
    pub fn from_shapes(kernels: &[usize], x: &[usize]) -> Result<Self> {
        let (c_out, c_in, kh, kw) = match kernels {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::Dimension(format!("kernels must be 4-D, got {s:?}"))),
        };
        if kh != kw {
            return Err(Error::Dimension(format!(
                "kernels must be square, got {kh}x{kw}"
            )));
        }
        let (xc, h, w) = match x {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::Dimension(format!("input must be c×H×W, got {s:?}"))),
        };
        if xc != c_in {
            return Err(Error::Dimension(format!(
                "input has {xc} channels, kernels expect {c_in}"
            )));
        }
        let geom = ConvGeometry {
            c_in,
            c_out,
            k: kh,
            h,
            w,
        };
        geom.check()?;
        Ok(geom)
    }

    pub fn check(&self) -> Result<()> {
        if self.k == 0 || self.k > self.h || self.k > self.w {
            return Err(Error::Dimension(format!(
                "kernel {k}x{k} does not fit a {h}x{w} input",
                k = self.k,
                h = self.h,
                w = self.w
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        self.h - self.k + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.k + 1
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.out_h() * self.out_w()
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

/// Slice-level kernels. Reduction order is fixed so results are reproducible.
pub(crate) mod kernels {
    use super::ConvGeometry;

    /// Dot product with four independent accumulators, combined in a fixed order.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let i = c * 4;
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        let mut tail = 0.0;
        for i in chunks * 4..a.len() {
            tail += a[i] * b[i];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    #[inline]
    pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    /// `y[r, o] = Σ_i x[r, i] w[o, i] + b[o]` for `n` rows.
    pub fn linear_forward(
        x: &[f64],
        n: usize,
        inp: usize,
        w: &[f64],
        out: usize,
        b: Option<&[f64]>,
        y: &mut [f64],
    ) {
        for r in 0..n {
            let xr = &x[r * inp..(r + 1) * inp];
            let yr = &mut y[r * out..(r + 1) * out];
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo = dot(xr, &w[o * inp..(o + 1) * inp]) + b.map_or(0.0, |b| b[o]);
            }
        }
    }

    /// Accumulates weight, bias and input gradients of [`linear_forward`].
    #[allow(clippy::too_many_arguments)]
    pub fn linear_backward(
        g: &[f64],
        x: &[f64],
        n: usize,
        inp: usize,
        w: &[f64],
        out: usize,
        dw: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
        dx: Option<&mut [f64]>,
    ) {
        if let Some(dw) = dw {
            for r in 0..n {
                let xr = &x[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let go = g[r * out + o];
                    if go != 0.0 {
                        axpy(go, xr, &mut dw[o * inp..(o + 1) * inp]);
                    }
                }
            }
        }
        if let Some(db) = db {
            for r in 0..n {
                for o in 0..out {
                    db[o] += g[r * out + o];
                }
            }
        }
        if let Some(dx) = dx {
            for r in 0..n {
                let dxr = &mut dx[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let go = g[r * out + o];
                    if go != 0.0 {
                        axpy(go, &w[o * inp..(o + 1) * inp], dxr);
                    }
                }
            }
        }
    }

    pub fn conv_forward(
        geom: &ConvGeometry,
        x: &[f64],
        kernels: &[f64],
        bias: Option<&[f64]>,
        y: &mut [f64],
    ) {
        let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.k);
        for o in 0..geom.c_out {
            let b = bias.map_or(0.0, |b| b[o]);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..geom.c_in {
                        for di in 0..k {
                            let xrow = &x[(c * geom.h + i + di) * geom.w + j..][..k];
                            let krow = &kernels[((o * geom.c_in + c) * k + di) * k..][..k];
                            for (a, b) in xrow.iter().zip(krow) {
                                acc += a * b;
                            }
                        }
                    }
                    y[(o * oh + i) * ow + j] = acc + b;
                }
            }
        }
    }

    pub fn conv_backward(
        geom: &ConvGeometry,
        g: &[f64],
        x: &[f64],
        kernels: &[f64],
        mut dk: Option<&mut [f64]>,
        mut db: Option<&mut [f64]>,
        mut dx: Option<&mut [f64]>,
    ) {
        let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.k);
        for o in 0..geom.c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let go = g[(o * oh + i) * ow + j];
                    if go == 0.0 {
                        continue;
                    }
                    if let Some(db) = db.as_deref_mut() {
                        db[o] += go;
                    }
                    for c in 0..geom.c_in {
                        for di in 0..k {
                            let xoff = (c * geom.h + i + di) * geom.w + j;
                            let koff = ((o * geom.c_in + c) * k + di) * k;
                            if let Some(dk) = dk.as_deref_mut() {
                                axpy(go, &x[xoff..xoff + k], &mut dk[koff..koff + k]);
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                axpy(go, &kernels[koff..koff + k], &mut dx[xoff..xoff + k]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns `(max, ln Σ exp(v − max))`, the second part via `ln_1p` over
    /// the non-maximal terms so tiny tails keep full precision.
    fn split_log_sum_exp(values: &[f64]) -> (f64, f64) {
        let (arg, m) =
            values
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(ai, am), (i, v)| {
                    if v > am {
                        (i, v)
                    } else {
                        (ai, am)
                    }
                });
        let rest: f64 = values
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, v)| (v - m).exp())
            .sum();
        (m, rest.ln_1p())
    }

    pub fn log_sum_exp(values: &[f64]) -> f64 {
        let (m, tail) = split_log_sum_exp(values);
        m + tail
    }

    /// `ln Σ exp(v) − v[label]` without cancellation when `label` is the max.
    pub fn cross_entropy_row(values: &[f64], label: usize) -> f64 {
        let (m, tail) = split_log_sum_exp(values);
        (m - values[label]) + tail
    }
}
