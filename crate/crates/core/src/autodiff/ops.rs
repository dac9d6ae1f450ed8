//! Tape operations: elementwise math, reductions, shape surgery, and the
//! image-oriented broadcasts the networks and losses are built from.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Zip};

use super::{Tape, Value, Var};

fn dims3(v: &Value) -> (usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 3, "expected H x W x C value, got {s:?}");
    (s[0], s[1], s[2])
}

impl Tape {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let y = &av + &bv;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let y = &av - &bv;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, -g);
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let y = &av * &bv;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(a, g * &bv);
                sink.add(b, g * &av);
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let y = &av / &bv;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(a, g / &bv);
                sink.add(b, -(g * &av) / (&bv * &bv));
            })),
        )
    }

    /// Elementwise `a^b` for strictly positive `a`; differentiable in both.
    pub fn powt(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let mut y = ArrayD::zeros(av.raw_dim());
        Zip::from(&mut y).and(&av).and(&bv).for_each(|y, &a, &b| {
            debug_assert!(a > 0.0, "powt base must be positive");
            *y = a.powf(b);
        });
        let yv: Value = y.into_shared();
        let y_back = yv.clone();
        self.push_node(
            yv,
            Some(Box::new(move |g, sink| {
                // d/da = b * a^(b-1), d/db = a^b * ln a
                let mut da = ArrayD::zeros(g.raw_dim());
                let mut db = ArrayD::zeros(g.raw_dim());
                Zip::from(&mut da)
                    .and(&mut db)
                    .and(g)
                    .and(&av)
                    .and(&bv)
                    .for_each(|da, db, &g, &a, &b| {
                        *da = g * b * a.powf(b - 1.0);
                        *db = g * a.ln();
                    });
                db *= &y_back;
                sink.add(a, da);
                sink.add(b, db);
            })),
        )
    }

    // ---- elementwise with scalars / constants -------------------------------

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let y = &av + c;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| sink.add(a, g.clone()))),
        )
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let y = &av * c;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| sink.add(a, g * c))),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Adds a constant array (no gradient tracked for the constant).
    pub fn add_const(&self, a: Var, k: &ArrayD<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), k.shape());
        let y = &av + k;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| sink.add(a, g.clone()))),
        )
    }

    /// Multiplies by a constant array elementwise.
    pub fn mul_const(&self, a: Var, k: &ArrayD<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), k.shape());
        let y = &av * k;
        let kk = k.clone();
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| sink.add(a, g * &kk))),
        )
    }

    /// Multiplies every element of `a` by the scalar variable `s`.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        let av = self.value(a);
        let sv = self.value(s);
        assert_eq!(sv.len(), 1);
        let y = &av * sv[0];
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(a, g * sv[0]);
                let ds = (g * &av).sum();
                sink.add(s, ArrayD::from_elem(IxDyn(&[1]), ds));
            })),
        )
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn exp(&self, a: Var) -> Var {
        let av = self.value(a);
        let y: Value = av.mapv(f64::exp).into_shared();
        let yb = y.clone();
        self.push_node(y, Some(Box::new(move |g, sink| sink.add(a, g * &yb))))
    }

    pub fn ln(&self, a: Var) -> Var {
        let av = self.value(a);
        let y = av.mapv(f64::ln);
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| sink.add(a, g / &av))),
        )
    }

    /// Square root with a zero subgradient at zero.
    pub fn sqrt_guarded(&self, a: Var) -> Var {
        let av = self.value(a);
        let y: Value = av.mapv(f64::sqrt).into_shared();
        let yb = y.clone();
        self.push_node(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(g.raw_dim());
                Zip::from(&mut dx).and(g).and(&yb).for_each(|dx, &g, &y| {
                    *dx = if y > 0.0 { g / (2.0 * y) } else { 0.0 };
                });
                sink.add(a, dx);
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let av = self.value(a);
        let y: Value = av.mapv(f64::tanh).into_shared();
        let yb = y.clone();
        self.push_node(
            y,
            Some(Box::new(move |g, sink| {
                sink.add(a, g * &(1.0 - &yb * &yb));
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let av = self.value(a);
        let y: Value = av.mapv(|x| 1.0 / (1.0 + (-x).exp())).into_shared();
        let yb = y.clone();
        self.push_node(
            y,
            Some(Box::new(move |g, sink| {
                sink.add(a, g * &(&yb * &(1.0 - &yb)));
            })),
        )
    }

    pub fn silu(&self, a: Var) -> Var {
        let av = self.value(a);
        let y = av.mapv(|x| x / (1.0 + (-x).exp()));
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(g.raw_dim());
                Zip::from(&mut dx).and(g).and(&av).for_each(|dx, &g, &x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    *dx = g * s * (1.0 + x * (1.0 - s));
                });
                sink.add(a, dx);
            })),
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.value(a);
        let y = av.mapv(|x| x.clamp(lo, hi));
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(g.raw_dim());
                Zip::from(&mut dx).and(g).and(&av).for_each(|dx, &g, &x| {
                    *dx = if (lo..=hi).contains(&x) { g } else { 0.0 };
                });
                sink.add(a, dx);
            })),
        )
    }

    /// Elementwise reciprocal.
    pub fn recip(&self, a: Var) -> Var {
        let av = self.value(a);
        let y: Value = av.mapv(|x| 1.0 / x).into_shared();
        let yb = y.clone();
        self.push_node(
            y,
            Some(Box::new(move |g, sink| {
                sink.add(a, -(g * &(&yb * &yb)));
            })),
        )
    }

    /// Absolute value with zero subgradient at zero.
    pub fn abs(&self, a: Var) -> Var {
        let av = self.value(a);
        let y = av.mapv(f64::abs);
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(g.raw_dim());
                Zip::from(&mut dx).and(g).and(&av).for_each(|dx, &g, &x| {
                    *dx = g * if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                });
                sink.add(a, dx);
            })),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let av = self.value(a);
        let y = &av * &av;
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| sink.add(a, g * &(2.0 * &av)))),
        )
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.raw_dim();
        let y = ArrayD::from_elem(IxDyn(&[1]), av.sum());
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(a, ArrayD::from_elem(shape.clone(), g[0]));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len() as f64;
        let shape = av.raw_dim();
        let y = ArrayD::from_elem(IxDyn(&[1]), av.sum() / n);
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(a, ArrayD::from_elem(shape.clone(), g[0] / n));
            })),
        )
    }

    /// Root-mean-square of all elements: `sqrt(mean(x^2))`.
    pub fn rms(&self, a: Var) -> Var {
        self.sqrt_guarded(self.mean_all(self.square(a)))
    }

    // ---- shape surgery --------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let in_shape: Vec<usize> = av.shape().to_vec();
        assert_eq!(av.len(), shape.iter().product::<usize>());
        let y = av
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape on contiguous value");
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let back = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape gradient");
                sink.add(a, back);
            })),
        )
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_last(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let nd = av.ndim();
        assert_eq!(nd, bv.ndim());
        let axis = Axis(nd - 1);
        let ca = av.shape()[nd - 1];
        let y = concatenate(axis, &[av.view(), bv.view()]).expect("concat shapes");
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let ga = g.index_axis_range(axis, 0..ca);
                let gb = g.index_axis_range(axis, ca..g.shape()[nd - 1]);
                sink.add(a, ga.to_owned());
                sink.add(b, gb.to_owned());
            })),
        )
    }

    /// Selects one channel of an `H x W x C` value, keeping a unit channel axis.
    pub fn slice_c(&self, a: Var, idx: usize) -> Var {
        let av = self.value(a);
        let (h, w, c) = dims3(&av);
        assert!(idx < c);
        let y = av
            .index_axis(Axis(2), idx)
            .to_owned()
            .insert_axis(Axis(2))
            .into_dyn();
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(IxDyn(&[h, w, c]));
                dx.index_axis_mut(Axis(2), idx)
                    .assign(&g.index_axis(Axis(2), 0));
                sink.add(a, dx);
            })),
        )
    }

    /// Mean over the channel axis: `H x W x C -> H x W x 1`.
    pub fn channel_mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let (_, _, c) = dims3(&av);
        let y = av
            .mean_axis(Axis(2))
            .expect("non-empty channel axis")
            .insert_axis(Axis(2))
            .into_dyn();
        let shape = av.raw_dim();
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let scaled = g / c as f64;
                let dx = scaled
                    .broadcast(shape.clone())
                    .expect("channel_mean broadcast")
                    .to_owned();
                sink.add(a, dx);
            })),
        )
    }

    /// Crops `H x W x C` to a window.
    pub fn crop2d(&self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let av = self.value(a);
        let (ih, iw, ic) = dims3(&av);
        assert!(y0 + h <= ih && x0 + w <= iw);
        let y = av
            .slice(ndarray::s![y0..y0 + h, x0..x0 + w, ..])
            .to_owned()
            .into_dyn();
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(IxDyn(&[ih, iw, ic]));
                dx.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w, ..])
                    .assign(g);
                sink.add(a, dx);
            })),
        )
    }

    // ---- image broadcasts -------------------------------------------------------

    /// Adds a per-channel bias vector `C` to an `H x W x C` value.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let (_, _, c) = dims3(&xv);
        assert_eq!(bv.shape(), [c]);
        let y = &xv + &bv.broadcast(xv.raw_dim()).expect("bias broadcast");
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                sink.add(x, g.clone());
                let db = g.sum_axis(Axis(0)).sum_axis(Axis(0));
                sink.add(b, db.into_dyn());
            })),
        )
    }

    /// Scales channels of `H x W x C` by a per-channel vector `C`.
    pub fn mul_channel_scale(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let (_, _, c) = dims3(&xv);
        assert_eq!(sv.shape(), [c]);
        let y = &xv * &sv.broadcast(xv.raw_dim()).expect("scale broadcast");
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let dx = g * &sv.broadcast(g.raw_dim()).expect("scale broadcast");
                sink.add(x, dx);
                let ds = (g * &xv).sum_axis(Axis(0)).sum_axis(Axis(0));
                sink.add(s, ds.into_dyn());
            })),
        )
    }

    /// Multiplies an `H x W x C` value by a single-channel map `H x W x 1`.
    pub fn mul_map(&self, x: Var, m: Var) -> Var {
        let xv = self.value(x);
        let mv = self.value(m);
        let (h, w, _) = dims3(&xv);
        assert_eq!(mv.shape(), [h, w, 1]);
        let y = &xv * &mv.broadcast(xv.raw_dim()).expect("map broadcast");
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let dx = g * &mv.broadcast(g.raw_dim()).expect("map broadcast");
                sink.add(x, dx);
                let dm = (g * &xv)
                    .sum_axis(Axis(2))
                    .insert_axis(Axis(2))
                    .into_dyn();
                sink.add(m, dm);
            })),
        )
    }

    /// Broadcast-multiplies a single-channel map variable by a constant
    /// `H x W x C` image: the Hadamard recomposition with fixed reflectance.
    pub fn map_times_const(&self, m: Var, k: &ArrayD<f64>) -> Var {
        let mv = self.value(m);
        let (h, w, cm) = dims3(&mv);
        assert_eq!(cm, 1);
        assert_eq!(&k.shape()[..2], [h, w]);
        let y = k * &mv.broadcast(k.raw_dim()).expect("map broadcast");
        let kk = k.clone();
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let dm = (g * &kk)
                    .sum_axis(Axis(2))
                    .insert_axis(Axis(2))
                    .into_dyn();
                sink.add(m, dm);
            })),
        )
    }

    // ---- spatial differences -----------------------------------------------------

    /// Horizontal forward difference with zero padding at the last column.
    pub fn diff_h(&self, a: Var) -> Var {
        let av = self.value(a);
        let (h, w, c) = dims3(&av);
        let mut y = ArrayD::zeros(av.raw_dim());
        for i in 0..h {
            for j in 0..w.saturating_sub(1) {
                for ch in 0..c {
                    y[[i, j, ch]] = av[[i, j + 1, ch]] - av[[i, j, ch]];
                }
            }
        }
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(IxDyn(&[h, w, c]));
                for i in 0..h {
                    for j in 0..w.saturating_sub(1) {
                        for ch in 0..c {
                            let gv = g[[i, j, ch]];
                            dx[[i, j, ch]] -= gv;
                            dx[[i, j + 1, ch]] += gv;
                        }
                    }
                }
                sink.add(a, dx);
            })),
        )
    }

    /// Vertical forward difference with zero padding at the last row.
    pub fn diff_v(&self, a: Var) -> Var {
        let av = self.value(a);
        let (h, w, c) = dims3(&av);
        let mut y = ArrayD::zeros(av.raw_dim());
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                for ch in 0..c {
                    y[[i, j, ch]] = av[[i + 1, j, ch]] - av[[i, j, ch]];
                }
            }
        }
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(IxDyn(&[h, w, c]));
                for i in 0..h.saturating_sub(1) {
                    for j in 0..w {
                        for ch in 0..c {
                            let gv = g[[i, j, ch]];
                            dx[[i, j, ch]] -= gv;
                            dx[[i + 1, j, ch]] += gv;
                        }
                    }
                }
                sink.add(a, dx);
            })),
        )
    }

    // ---- softmax ---------------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_c(&self, a: Var) -> Var {
        let av = self.value(a);
        let nd = av.ndim();
        let axis = Axis(nd - 1);
        let mut y = av.to_owned();
        for mut lane in y.lanes_mut(axis) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        let yv: Value = y.into_shared();
        let yb = yv.clone();
        self.push_node(
            yv,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for (mut dlane, ylane) in dx.lanes_mut(axis).into_iter().zip(yb.lanes(axis)) {
                    let dot: f64 = dlane.iter().zip(ylane.iter()).map(|(d, y)| d * y).sum();
                    for (d, y) in dlane.iter_mut().zip(ylane.iter()) {
                        *d = y * (*d - dot);
                    }
                }
                sink.add(a, dx);
            })),
        )
    }

    // ---- matrix product ----------------------------------------------------------

    /// 2-D matrix product `(M,K) x (K,N) -> (M,N)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a2 = av
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs 2-D");
        let b2 = bv
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs 2-D");
        let y = a2.dot(&b2).into_dyn();
        self.push_node(
            y.into_shared(),
            Some(Box::new(move |g, sink| {
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("matmul grad 2-D");
                let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                sink.add(a, g2.dot(&b2.t()).into_dyn());
                sink.add(b, a2.t().dot(&g2).into_dyn());
            })),
        )
    }
}

trait IndexAxisRange {
    fn index_axis_range(&self, axis: Axis, range: std::ops::Range<usize>)
        -> ndarray::ArrayViewD<'_, f64>;
}

impl IndexAxisRange for ArrayD<f64> {
    fn index_axis_range(
        &self,
        axis: Axis,
        range: std::ops::Range<usize>,
    ) -> ndarray::ArrayViewD<'_, f64> {
        self.slice_axis(axis, ndarray::Slice::from(range))
    }
}
