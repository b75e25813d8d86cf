//! Slice-level forward and adjoint kernels. All loops run in a fixed order
//! so results are bitwise reproducible.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds the input into a `[c_in*k*k, h_out*w_out]` patch matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n_out = g.spatial_out();
    let mut cols = vec![0.0; g.patch() * n_out];
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let n_out = g.spatial_out();
    for ci in 0..g.c_in {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    kernels: &[f64],
    bias: &[f64],
    cols: &[f64],
    g: &ConvGeom,
) -> Vec<f64> {
    let n_out = g.spatial_out();
    let patch = g.patch();
    let mut out = vec![0.0; g.c_out * n_out];
    for (o, out_row) in out.chunks_exact_mut(n_out).enumerate() {
        out_row.fill(bias[o]);
        let wrow = &kernels[o * patch..(o + 1) * patch];
        for (r, &wv) in wrow.iter().enumerate() {
            let col_row = &cols[r * n_out..(r + 1) * n_out];
            for (y, &c) in out_row.iter_mut().zip(col_row) {
                *y += wv * c;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernels: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    upstream: &[f64],
    kernels: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let n_out = g.spatial_out();
    let patch = g.patch();

    let input = need[0].then(|| {
        let mut dcols = vec![0.0; patch * n_out];
        for o in 0..g.c_out {
            let up = &upstream[o * n_out..(o + 1) * n_out];
            for r in 0..patch {
                let wv = kernels[o * patch + r];
                let drow = &mut dcols[r * n_out..(r + 1) * n_out];
                for (d, &u) in drow.iter_mut().zip(up) {
                    *d += wv * u;
                }
            }
        }
        let mut dx = vec![0.0; g.c_in * g.h * g.w];
        col2im_add(&dcols, g, &mut dx);
        dx
    });

    let kernels_grad = need[1].then(|| {
        let mut dw = vec![0.0; g.c_out * patch];
        for o in 0..g.c_out {
            let up = &upstream[o * n_out..(o + 1) * n_out];
            for r in 0..patch {
                let col_row = &cols[r * n_out..(r + 1) * n_out];
                dw[o * patch + r] = dot(up, col_row);
            }
        }
        dw
    });

    let bias = need[2].then(|| {
        upstream
            .chunks_exact(n_out)
            .map(|row| row.iter().sum())
            .collect()
    });

    ConvGrads {
        input,
        kernels: kernels_grad,
        bias,
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sum_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Per-window maxima; ties go to the first element in row-major scan order.
/// Returns the outputs and the flat input index each output came from.
pub(crate) fn maxpool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let h_out = (h - k) / stride + 1;
    let w_out = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * h_out * w_out);
    let mut argmax = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = input[best_idx];
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax, h_out, w_out)
}
