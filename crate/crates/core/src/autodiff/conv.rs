//! Strided N-d convolution kernels.
//!
//! For each kernel offset the valid (output, input) voxel pairs are grouped
//! into runs that are contiguous along the last axis, so the inner loops are
//! plain strided axpy / dot products.

#[derive(Clone, Copy, Debug)]
struct Run {
    out: usize,
    inp: usize,
    len: usize,
}

/// Index geometry of a convolution from `input` extents to `output`
/// extents.
pub(crate) struct ConvGeometry {
    pub kernel_len: usize,
    pub in_len: usize,
    pub out_len: usize,
    stride: usize,
    runs: Vec<Vec<Run>>,
}

pub(crate) fn conv_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let d = input.len();
        let output: Vec<usize> = input
            .iter()
            .zip(kernel)
            .map(|(&n, &k)| conv_output_extent(n, k, stride, pad))
            .collect::<Option<_>>()?;
        let in_st = crate::field::strides(input);
        let out_st = crate::field::strides(&output);
        let kernel_len: usize = kernel.iter().product();
        let k_st = crate::field::strides(kernel);
        let rows: usize = output[..d - 1].iter().product();
        let n_last = input[d - 1] as isize;
        let o_last = output[d - 1] as isize;
        let s = stride as isize;
        let p = pad as isize;

        let mut runs = Vec::with_capacity(kernel_len);
        let mut kidx = vec![0usize; d];
        let mut oidx = vec![0usize; d - 1];
        for k in 0..kernel_len {
            let mut rem = k;
            for a in 0..d {
                kidx[a] = rem / k_st[a];
                rem %= k_st[a];
            }
            let kl = kidx[d - 1] as isize;
            // valid o on the last axis: 0 <= o*s + kl - p <= n_last - 1
            let lo = {
                let num = p - kl;
                if num <= 0 {
                    0
                } else {
                    (num + s - 1) / s
                }
            };
            let hi = ((n_last - 1 + p - kl).div_euclid(s)).min(o_last - 1);
            let mut list = Vec::new();
            if lo <= hi {
                for r in 0..rows {
                    let mut rem = r;
                    for a in (0..d - 1).rev() {
                        oidx[a] = rem % output[a];
                        rem /= output[a];
                    }
                    let mut out_off = 0usize;
                    let mut in_off = 0usize;
                    let mut ok = true;
                    for a in 0..d - 1 {
                        let i = oidx[a] as isize * s + kidx[a] as isize - p;
                        if i < 0 || i >= input[a] as isize {
                            ok = false;
                            break;
                        }
                        in_off += i as usize * in_st[a];
                        out_off += oidx[a] * out_st[a];
                    }
                    if !ok {
                        continue;
                    }
                    out_off += lo as usize;
                    in_off += (lo * s + kl - p) as usize;
                    list.push(Run {
                        out: out_off,
                        inp: in_off,
                        len: (hi - lo + 1) as usize,
                    });
                }
            }
            runs.push(list);
        }
        Some(Self {
            kernel_len,
            in_len: input.iter().product(),
            out_len: output.iter().product(),
            stride,
            runs,
        })
    }

    /// `out += w * shift_k(inp)` for kernel offset `k`.
    #[inline]
    pub fn gather(&self, k: usize, w: f64, inp: &[f64], out: &mut [f64]) {
        let s = self.stride;
        for r in &self.runs[k] {
            let o = &mut out[r.out..r.out + r.len];
            if s == 1 {
                for (a, b) in o.iter_mut().zip(&inp[r.inp..r.inp + r.len]) {
                    *a += w * b;
                }
            } else {
                for (t, a) in o.iter_mut().enumerate() {
                    *a += w * inp[r.inp + t * s];
                }
            }
        }
    }

    /// Adjoint of [`gather`]: `inp += w * shift_k^T(out)`.
    #[inline]
    pub fn scatter(&self, k: usize, w: f64, out: &[f64], inp: &mut [f64]) {
        let s = self.stride;
        for r in &self.runs[k] {
            let o = &out[r.out..r.out + r.len];
            if s == 1 {
                for (b, a) in inp[r.inp..r.inp + r.len].iter_mut().zip(o) {
                    *b += w * a;
                }
            } else {
                for (t, a) in o.iter().enumerate() {
                    inp[r.inp + t * s] += w * a;
                }
            }
        }
    }

    /// `sum_t out[t] * shift_k(inp)[t]`.
    #[inline]
    pub fn dot(&self, k: usize, inp: &[f64], out: &[f64]) -> f64 {
        let s = self.stride;
        let mut acc = 0.0;
        for r in &self.runs[k] {
            let o = &out[r.out..r.out + r.len];
            if s == 1 {
                acc += o
                    .iter()
                    .zip(&inp[r.inp..r.inp + r.len])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            } else {
                for (t, a) in o.iter().enumerate() {
                    acc += a * inp[r.inp + t * s];
                }
            }
        }
        acc
    }
}

/// Forward convolution. `w` is `[co, ci, k..]`.
pub(crate) fn conv_forward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    ci: usize,
    co: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; co * g.out_len];
    for o in 0..co {
        let dst = &mut out[o * g.out_len..(o + 1) * g.out_len];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..ci {
            let src = &x[i * g.in_len..(i + 1) * g.in_len];
            let wrow = &w[(o * ci + i) * g.kernel_len..(o * ci + i + 1) * g.kernel_len];
            for (k, &wk) in wrow.iter().enumerate() {
                g.gather(k, wk, src, dst);
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`] with respect to input and weights.
pub(crate) fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    ci: usize,
    co: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = want_x.then(|| vec![0.0; ci * g.in_len]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    for o in 0..co {
        let go = &grad[o * g.out_len..(o + 1) * g.out_len];
        for i in 0..ci {
            let base = (o * ci + i) * g.kernel_len;
            let src = &x[i * g.in_len..(i + 1) * g.in_len];
            for k in 0..g.kernel_len {
                if let Some(gx) = gx.as_mut() {
                    g.scatter(
                        k,
                        w[base + k],
                        go,
                        &mut gx[i * g.in_len..(i + 1) * g.in_len],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    gw[base + k] += g.dot(k, src, go);
                }
            }
        }
    }
    (gx, gw)
}

/// Transposed convolution: the adjoint of a convolution from `y` extents
/// to `x` extents. `w` is `[ci, co, k..]` where `ci` are the channels of
/// `x`.
pub(crate) fn conv_transpose_forward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    ci: usize,
    co: usize,
) -> Vec<f64> {
    // geometry maps y-space (conv input) to x-space (conv output)
    let mut y = vec![0.0; co * g.in_len];
    for o in 0..co {
        let dst = &mut y[o * g.in_len..(o + 1) * g.in_len];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..ci {
            let src = &x[i * g.out_len..(i + 1) * g.out_len];
            let base = (i * co + o) * g.kernel_len;
            for k in 0..g.kernel_len {
                g.scatter(k, w[base + k], src, dst);
            }
        }
    }
    y
}

pub(crate) fn conv_transpose_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    ci: usize,
    co: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = want_x.then(|| vec![0.0; ci * g.out_len]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    for o in 0..co {
        let gy = &grad[o * g.in_len..(o + 1) * g.in_len];
        for i in 0..ci {
            let base = (i * co + o) * g.kernel_len;
            let src = &x[i * g.out_len..(i + 1) * g.out_len];
            for k in 0..g.kernel_len {
                if let Some(gx) = gx.as_mut() {
                    g.gather(
                        k,
                        w[base + k],
                        gy,
                        &mut gx[i * g.out_len..(i + 1) * g.out_len],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    gw[base + k] += g.dot(k, gy, src);
                }
            }
        }
    }
    (gx, gw)
}
