//! Raw numeric kernels shared by the tape's forward and backward passes.

/// Row-major matrix view: `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical_rows(&self) -> usize {
        if self.transposed {
            self.cols
        } else {
            self.rows
        }
    }

    fn logical_cols(&self) -> usize {
        if self.transposed {
            self.rows
        } else {
            self.cols
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    let m = a.logical_rows();
    let k = a.logical_cols();
    let n = b.logical_cols();
    assert_eq!(k, b.logical_rows(), "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views were checked against their backing slices and the
    // output length above; matrixmultiply reads/writes only within
    // `m*k`, `k*n` and `m*n` logical elements with the given strides.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NHWC tensors.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Gather input patches into `[out_positions, k_h*k_w*in_c]`.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.out_positions() * plen];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &input[b * g.in_h * g.in_w * g.in_c..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k_h {
                    let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                        let s = (iy * g.in_w + ix) * g.in_c;
                        let d = (ky * g.k_w + kx) * g.in_c;
                        dst[d..d + g.in_c].copy_from_slice(&img[s..s + g.in_c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patches back onto the input grid.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], input: &mut [f64]) {
    let plen = g.patch_len();
    let mut row = 0;
    for b in 0..g.batch {
        let img = &mut input[b * g.in_h * g.in_w * g.in_c..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k_h {
                    let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                        let s = (iy * g.in_w + ix) * g.in_c;
                        let d = (ky * g.k_w + kx) * g.in_c;
                        for c in 0..g.in_c {
                            img[s + c] += src[d + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
