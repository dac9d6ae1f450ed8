//! Spatial ops: 2-D convolution (im2col + GEMM), pooling, and nearest
//! upsampling. Image values are `H x W x C`; kernels are `KH x KW x Cin x Cout`.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::{Tape, Var};

fn im2col(
    x: &super::Value,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let xs = x.as_slice().expect("standard layout input");
    let mut cols = Array2::<f64>::zeros((h_out * w_out, kh * kw * c));
    {
        let cs = cols.as_slice_mut().unwrap();
        let row_len = kh * kw * c;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let base = (oy * w_out + ox) * row_len;
                for di in 0..kh {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dj in 0..kw {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = base + (di * kw + dj) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    (cols, h_out, w_out)
}

fn col2im(
    gcols: &Array2<f64>,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
    let ds = dx.as_slice_mut().unwrap();
    let gs = gcols.as_slice().expect("standard layout gradient");
    let row_len = kh * kw * c;
    for oy in 0..h_out {
        for ox in 0..w_out {
            let base = (oy * w_out + ox) * row_len;
            for di in 0..kh {
                let iy = (oy * stride + di) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dj in 0..kw {
                    let ix = (ox * stride + dj) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = base + (di * kw + dj) * c;
                    for ch in 0..c {
                        ds[dst + ch] += gs[src + ch];
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// Same-padded 2-D convolution plus bias.
    ///
    /// `x: H x W x Cin`, `w: KH x KW x Cin x Cout`, `b: Cout`; padding is
    /// `KH/2` so stride 1 preserves the spatial size and stride 2 halves it
    /// (rounding up).
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (kh, kw, cin, cout) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        assert_eq!(xv.shape()[2], cin, "conv2d channel mismatch");
        assert_eq!(bv.shape(), [cout]);
        let pad = kh / 2;
        let (h, wdt) = (xv.shape()[0], xv.shape()[1]);

        let (cols, h_out, w_out) = im2col(&xv, kh, kw, stride, pad);
        let wmat = wv
            .to_shape((kh * kw * cin, cout))
            .expect("contiguous kernel");
        let mut out = cols.dot(&wmat);
        let brow = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        out += &brow;
        let y = out
            .into_shape_with_order(IxDyn(&[h_out, w_out, cout]))
            .unwrap();

        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let gmat = g
                    .view()
                    .into_shape_with_order((h_out * w_out, cout))
                    .expect("contiguous gradient");
                let (cols, _, _) = im2col(&xv, kh, kw, stride, pad);
                let dw = cols.t().dot(&gmat);
                sink.add(
                    w,
                    dw.into_shape_with_order(IxDyn(&[kh, kw, cin, cout]))
                        .unwrap(),
                );
                sink.add(b, gmat.sum_axis(Axis(0)).into_dyn());
                let wmat = wv.to_shape((kh * kw * cin, cout)).unwrap();
                let gcols = gmat.dot(&wmat.t());
                sink.add(x, col2im(&gcols, h, wdt, cin, kh, kw, stride, pad));
            })),
        )
    }

    /// Non-overlapping average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % k == 0 && w % k == 0, "avg_pool needs divisible dims");
        let (ho, wo) = (h / k, w / k);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[ho, wo, c]));
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += xv[[oy * k + dy, ox * k + dx, ch]];
                        }
                    }
                    y[[oy, ox, ch]] = acc / (k * k) as f64;
                }
            }
        }
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
                let scale = 1.0 / (k * k) as f64;
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ch in 0..c {
                            let gv = g[[oy, ox, ch]] * scale;
                            for dy in 0..k {
                                for dx2 in 0..k {
                                    dx[[oy * k + dy, ox * k + dx2, ch]] += gv;
                                }
                            }
                        }
                    }
                }
                sink.add(x, dx);
            })),
        )
    }

    /// Global average over the spatial axes: `H x W x C -> C`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w, _c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let y = xv.mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
        let shape = xv.raw_dim();
        self.push_node(
            y.into_dyn().into_shared(),
            Some(Box::new(move |g, sink| {
                let scale = 1.0 / (h * w) as f64;
                let dx = (g * scale)
                    .broadcast(shape.clone())
                    .expect("gap broadcast")
                    .to_owned();
                sink.add(x, dx);
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[2 * h, 2 * w, c]));
        for i in 0..2 * h {
            for j in 0..2 * w {
                for ch in 0..c {
                    y[[i, j, ch]] = xv[[i / 2, j / 2, ch]];
                }
            }
        }
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        for ch in 0..c {
                            dx[[i / 2, j / 2, ch]] += g[[i, j, ch]];
                        }
                    }
                }
                sink.add(x, dx);
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_gradient;
    use super::*;
    use ndarray::IxDyn;

    fn seeded(shape: &[usize], scale: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n)
            .map(|i| ((i * 2654435761 + 12345) % 1000) as f64 / 1000.0 * scale - scale / 2.0)
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let t = Tape::new();
        let x = t.leaf(seeded(&[5, 4, 2], 1.0));
        // 1x1 identity kernel copies channels through.
        let mut w = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        w[[0, 0, 0, 0]] = 1.0;
        w[[0, 0, 1, 1]] = 1.0;
        let wv = t.leaf(w);
        let bv = t.leaf(ArrayD::zeros(IxDyn(&[2])));
        let y = t.conv2d(x, wv, bv, 1);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn conv2d_shapes_with_stride() {
        let t = Tape::new();
        let x = t.leaf(seeded(&[9, 7, 3], 1.0));
        let w = t.leaf(seeded(&[3, 3, 3, 4], 0.2));
        let b = t.leaf(ArrayD::zeros(IxDyn(&[4])));
        assert_eq!(t.shape(t.conv2d(x, w, b, 1)), [9, 7, 4]);
        assert_eq!(t.shape(t.conv2d(x, w, b, 2)), [5, 4, 4]);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x0 = seeded(&[5, 5, 2], 1.0);
        // input gradient
        check_gradient(
            |t, v| {
                let w = t.leaf(seeded(&[3, 3, 2, 3], 0.4));
                let b = t.leaf(seeded(&[3], 0.2));
                t.rms(t.conv2d(v, w, b, 1))
            },
            &x0,
            10,
            1e-5,
        );
        // kernel gradient, stride 2
        let w0 = seeded(&[3, 3, 2, 3], 0.4);
        check_gradient(
            |t, v| {
                let x = t.leaf(seeded(&[5, 5, 2], 1.0));
                let b = t.leaf(seeded(&[3], 0.2));
                t.rms(t.conv2d(x, v, b, 2))
            },
            &w0,
            10,
            1e-5,
        );
        // bias gradient
        let b0 = seeded(&[3], 0.2);
        check_gradient(
            |t, v| {
                let x = t.leaf(seeded(&[5, 5, 2], 1.0));
                let w = t.leaf(seeded(&[3, 3, 2, 3], 0.4));
                t.rms(t.conv2d(x, w, v, 1))
            },
            &b0,
            3,
            1e-5,
        );
    }

    #[test]
    fn pool_and_upsample_gradients() {
        let x0 = seeded(&[4, 4, 2], 1.0);
        check_gradient(|t, v| t.rms(t.avg_pool(v, 2)), &x0, 8, 1e-6);
        check_gradient(|t, v| t.rms(t.upsample2(v)), &x0, 8, 1e-6);
        check_gradient(|t, v| t.rms(t.global_avg_pool(v)), &x0, 8, 1e-6);
    }

    #[test]
    fn avg_pool_values() {
        let t = Tape::new();
        let mut x = ArrayD::zeros(IxDyn(&[2, 2, 1]));
        x[[0, 0, 0]] = 1.0;
        x[[0, 1, 0]] = 2.0;
        x[[1, 0, 0]] = 3.0;
        x[[1, 1, 0]] = 4.0;
        let v = t.leaf(x);
        let y = t.avg_pool(v, 2);
        assert_eq!(t.value(y)[[0, 0, 0]], 2.5);
    }
}
