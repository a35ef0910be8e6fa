//! Convolution via im2col + sgemm, with the matching backward pass.

/// Geometry of a square-kernel convolution with "same"-style padding (`pad = dilation * (k - 1) / 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let o = |n: usize| (n + 2 * self.pad() - span) / self.stride + 1;
        (o(h), o(w))
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }
}

pub fn im2col(x: &[f32], h: usize, w: usize, g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut cols = vec![0f32; g.patch_len() * p];
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize - pad + (ky * g.dilation) as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize - pad + (kx * g.dilation) as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im(cols: &[f32], h: usize, w: usize, g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut x = vec![0f32; g.in_ch * h * w];
    for c in 0..g.in_ch {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize - pad + (ky * g.dilation) as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride) as isize - pad + (kx * g.dilation) as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution. Returns the output (out_ch x oh x ow) and the im2col buffer for backward.
pub fn conv_forward(x: &[f32], h: usize, w: usize, g: &ConvGeom, weight: &[f32], bias: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let cols = if g.kernel == 1 && g.stride == 1 {
        x.to_vec()
    } else {
        im2col(x, h, w, g)
    };
    let mut out = vec![0f32; g.out_ch * p];
    for (o, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.fill(bias[o]);
    }
    gemm(g.out_ch, g.patch_len(), p, weight, false, &cols, false, 1.0, &mut out);
    (out, cols)
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    dout: &[f32],
    cols: &[f32],
    h: usize,
    w: usize,
    g: &ConvGeom,
    weight: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Vec<f32>> {
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let kl = g.patch_len();
    for (o, chunk) in dout.chunks_exact(p).enumerate() {
        dbias[o] += chunk.iter().sum::<f32>();
    }
    gemm(g.out_ch, p, kl, dout, false, cols, true, 1.0, dweight);
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![0f32; kl * p];
    gemm(kl, g.out_ch, p, weight, true, dout, false, 0.0, &mut dcols);
    if g.kernel == 1 && g.stride == 1 {
        Some(dcols)
    } else {
        Some(col2im(&dcols, h, w, g))
    }
}
