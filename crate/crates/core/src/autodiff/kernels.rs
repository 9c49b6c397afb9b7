//! Per-sample numeric kernels behind the graph ops.
//!
//! Everything here works on plain slices; shape validation happens in the graph.

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `out = alpha * a * b + beta * out`, with `out` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.max_index() < a.data.len());
    assert!(b.max_index() < b.data.len());
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[c, h, w]` image into `[c * 9, h * w]` columns for a 3x3, padding-1 convolution.
pub(crate) fn im2col3(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates column gradients back onto the image.
pub(crate) fn col2im3(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            for i in 1..w {
                                dst[i - 1] += src[i];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                dst[i] += src[i];
                            }
                        }
                        _ => {
                            for i in 0..w - 1 {
                                dst[i + 1] += src[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2, stride-2 max pool of one `[c, h, w]` sample. Returns the flat argmax
/// index (within the sample) for each output cell; ties keep the first cell in
/// row-major window order.
pub(crate) fn maxpool2(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64], arg: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = x[best];
                arg[o] = best as u32;
            }
        }
    }
}
