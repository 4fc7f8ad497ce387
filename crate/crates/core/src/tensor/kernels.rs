//! Raw numeric kernels on row-major slices. No autodiff here.

/// Stride-1 "same" convolution geometry. One-dimensional convolutions are run
/// as two-dimensional ones with `h == 1` and `kh == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `d`.
    fn range(extent: usize, k: usize, d: usize) -> (usize, usize) {
        let p = k / 2;
        let lo = p.saturating_sub(d);
        let hi = (extent + p).saturating_sub(d).min(extent);
        (lo, hi.max(lo))
    }

    fn widx(&self, o: usize, i: usize, dh: usize, dw: usize) -> usize {
        ((o * self.cin + i) * self.kh + dh) * self.kw + dw
    }
}

/// y[b,o,r,c] = sum_{i,dh,dw} w[o,i,dh,dw] * x[b,i,r+dh-ph,c+dw-pw], zero padded.
pub fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.hw();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut y = vec![0.0; g.batch * g.cout * hw];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let yo = &mut y[(b * g.cout + o) * hw..][..hw];
            for i in 0..g.cin {
                let xi = &x[(b * g.cin + i) * hw..][..hw];
                for dh in 0..g.kh {
                    let (r_lo, r_hi) = ConvGeom::range(g.h, g.kh, dh);
                    for dw in 0..g.kw {
                        let wv = w[g.widx(o, i, dh, dw)];
                        let (c_lo, c_hi) = ConvGeom::range(g.w, g.kw, dw);
                        let len = c_hi - c_lo;
                        for r in r_lo..r_hi {
                            let ir = r + dh - ph;
                            let yrow = &mut yo[r * g.w + c_lo..][..len];
                            let xrow = &xi[ir * g.w + c_lo + dw - pw..][..len];
                            for (a, &v) in yrow.iter_mut().zip(xrow) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv_forward`] in `x`: dx[b,i,..] from dy[b,o,..].
pub fn conv_grad_input(dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.hw();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut dx = vec![0.0; g.batch * g.cin * hw];
    for b in 0..g.batch {
        for i in 0..g.cin {
            let dxi = &mut dx[(b * g.cin + i) * hw..][..hw];
            for o in 0..g.cout {
                let dyo = &dy[(b * g.cout + o) * hw..][..hw];
                for dh in 0..g.kh {
                    let (r_lo, r_hi) = ConvGeom::range(g.h, g.kh, dh);
                    for dw in 0..g.kw {
                        let wv = w[g.widx(o, i, dh, dw)];
                        let (c_lo, c_hi) = ConvGeom::range(g.w, g.kw, dw);
                        let len = c_hi - c_lo;
                        for r in r_lo..r_hi {
                            let ir = r + dh - ph;
                            let src = &dyo[r * g.w + c_lo..][..len];
                            let dst = &mut dxi[ir * g.w + c_lo + dw - pw..][..len];
                            for (a, &v) in dst.iter_mut().zip(src) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`conv_forward`] in `w`: dw[o,i,dh,dw] from x and dy.
pub fn conv_grad_weight(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.hw();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut dwt = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let dyo = &dy[(b * g.cout + o) * hw..][..hw];
            for i in 0..g.cin {
                let xi = &x[(b * g.cin + i) * hw..][..hw];
                for dh in 0..g.kh {
                    let (r_lo, r_hi) = ConvGeom::range(g.h, g.kh, dh);
                    for dw in 0..g.kw {
                        let (c_lo, c_hi) = ConvGeom::range(g.w, g.kw, dw);
                        let len = c_hi - c_lo;
                        let mut acc = 0.0;
                        for r in r_lo..r_hi {
                            let ir = r + dh - ph;
                            let a = &dyo[r * g.w + c_lo..][..len];
                            let v = &xi[ir * g.w + c_lo + dw - pw..][..len];
                            acc += a.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
                        }
                        dwt[g.widx(o, i, dh, dw)] += acc;
                    }
                }
            }
        }
    }
    dwt
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// C[m,n] = op(A)[m,k] op(B)[k,n]; `a_dims`/`b_dims` are the stored (rows, cols).
pub fn matmul(
    a: &[f64],
    a_dims: (usize, usize),
    ta: bool,
    b: &[f64],
    b_dims: (usize, usize),
    tb: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
    let n = if tb { b_dims.0 } else { b_dims.1 };
    let a_owned;
    let a = if ta {
        a_owned = transpose(a, a_dims.0, a_dims.1);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(b, b_dims.0, b_dims.1);
        &b_owned[..]
    } else {
        b
    };
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..][..n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    (c, m, n)
}

/// 2x average pooling over the trailing `sdims` axes of `[planes, spatial..]`.
pub fn pool2(x: &[f64], planes: usize, spatial: &[usize]) -> Vec<f64> {
    match *spatial {
        [l] => {
            let lo = l / 2;
            let mut y = vec![0.0; planes * lo];
            for p in 0..planes {
                let xs = &x[p * l..][..l];
                for (t, v) in y[p * lo..][..lo].iter_mut().enumerate() {
                    *v = 0.5 * (xs[2 * t] + xs[2 * t + 1]);
                }
            }
            y
        }
        [h, w] => {
            let (ho, wo) = (h / 2, w / 2);
            let mut y = vec![0.0; planes * ho * wo];
            for p in 0..planes {
                let xs = &x[p * h * w..][..h * w];
                let ys = &mut y[p * ho * wo..][..ho * wo];
                for r in 0..ho {
                    for c in 0..wo {
                        let i = 2 * r * w + 2 * c;
                        ys[r * wo + c] = 0.25 * (xs[i] + xs[i + 1] + xs[i + w] + xs[i + w + 1]);
                    }
                }
            }
            y
        }
        _ => unreachable!("pool2 supports one or two spatial axes"),
    }
}

/// Nearest-neighbour 2x upsampling; `spatial` is the input extent.
pub fn upsample2(x: &[f64], planes: usize, spatial: &[usize]) -> Vec<f64> {
    match *spatial {
        [l] => {
            let mut y = vec![0.0; planes * 2 * l];
            for p in 0..planes {
                let xs = &x[p * l..][..l];
                for (t, v) in y[p * 2 * l..][..2 * l].iter_mut().enumerate() {
                    *v = xs[t / 2];
                }
            }
            y
        }
        [h, w] => {
            let (ho, wo) = (2 * h, 2 * w);
            let mut y = vec![0.0; planes * ho * wo];
            for p in 0..planes {
                let xs = &x[p * h * w..][..h * w];
                let ys = &mut y[p * ho * wo..][..ho * wo];
                for r in 0..ho {
                    for c in 0..wo {
                        ys[r * wo + c] = xs[(r / 2) * w + c / 2];
                    }
                }
            }
            y
        }
        _ => unreachable!("upsample2 supports one or two spatial axes"),
    }
}

/// Per-sample layer normalisation over all non-batch elements followed by an
/// elementwise affine map.
pub fn layer_norm(x: &[f64], batch: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let f = gamma.len();
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        let xs = &x[b * f..][..f];
        let mean = xs.iter().sum::<f64>() / f as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, out) in y[b * f..][..f].iter_mut().enumerate() {
            *out = gamma[j] * (xs[j] - mean) * inv + beta[j];
        }
    }
    y
}
