//! Minimal reverse-mode automatic differentiation over `ndarray` values.
//!
//! A [`Tape`] records every operation as a node holding the forward value and
//! a backward closure that routes the output gradient to the node's parents.
//! Gradients are `f64` end to end; finite-difference tests elsewhere in the
//! crate pin the adjoints.
//!
//! Tapes are single-threaded by design; batch parallelism runs one tape per
//! item and reduces gradients in index order.

mod conv;
mod ops;

use std::cell::RefCell;

use ndarray::{ArcArray, ArrayD, IxDyn};

/// Shared forward value stored on the tape.
pub type Value = ArcArray<f64, IxDyn>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Value,
    back: Option<BackFn>,
}

/// Gradient accumulator passed to backward closures.
pub struct GradSink {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradSink {
    /// Adds `g` to the gradient slot of `v`.
    pub fn add(&mut self, v: Var, g: ArrayD<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// Wengert list of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf (input or parameter).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push_node(value.into_shared(), None)
    }

    /// Records a scalar leaf of shape `[1]`.
    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    pub(crate) fn push_node(&self, value: Value, back: Option<BackFn>) -> Var {
        // Every stored value is standard layout so ops can take fast slices.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned().into_shared()
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var(nodes.len() - 1)
    }

    /// Forward value of a node (cheap shared clone).
    pub fn value(&self, v: Var) -> Value {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Forward value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val[0]
    }

    /// Reverse pass from a scalar `loss` node; returns gradients for every
    /// node that participates in it.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward requires a scalar loss");
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        sink.grads[loss.0] = Some(ArrayD::ones(IxDyn(&[1])));
        for id in (0..=loss.0).rev() {
            let Some(grad) = sink.grads[id].clone() else {
                continue;
            };
            if let Some(back) = &nodes[id].back {
                back(&grad, &mut sink);
            }
        }
        Grads { grads: sink.grads }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite-difference check of `f`'s gradient at `x`.
    ///
    /// `f` maps a leaf variable to a scalar loss on the same tape. Probes
    /// `n_probes` coordinates (deterministically spread over the input) and
    /// asserts relative error below `tol`.
    pub fn check_gradient<F>(f: F, x: &ArrayD<f64>, n_probes: usize, tol: f64)
    where
        F: Fn(&Tape, Var) -> Var,
    {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = f(&tape, v);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(v, x.shape());

        let n = x.len();
        let h = 1e-5;
        for k in 0..n_probes.min(n) {
            let idx = (k * 2654435761) % n; // deterministic spread
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fp = {
                let t = Tape::new();
                let v = t.leaf(xp);
                t.scalar_value(f(&t, v))
            };
            let fm = {
                let t = Tape::new();
                let v = t.leaf(xm);
                t.scalar_value(f(&t, v))
            };
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic.as_slice().unwrap()[idx];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            assert!(
                (ad - fd).abs() / denom < tol,
                "gradient mismatch at {idx}: analytic {ad}, finite-diff {fd}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::check_gradient;
    use super::*;
    use ndarray::ArrayD;

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn chain_rule_through_product_and_sum() {
        // d/dx sum(x * x) = 2x
        let t = Tape::new();
        let x = t.leaf(arr(&[1.0, -2.0, 3.0]));
        let y = t.mul(x, x);
        let s = t.sum_all(y);
        assert_eq!(t.scalar_value(s), 14.0);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap(), &arr(&[2.0, -4.0, 6.0]));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // f = sum(x) + sum(x) -> grad 2 everywhere
        let t = Tape::new();
        let x = t.leaf(arr(&[0.5, 0.25]));
        let s = t.add(t.sum_all(x), t.sum_all(x));
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap(), &arr(&[2.0, 2.0]));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = arr(&[0.3, 0.7, 0.11, 0.93, 0.42, 0.58]);
        check_gradient(
            |t, v| {
                let e = t.exp(v);
                let l = t.ln(t.add_scalar(v, 1.0));
                let th = t.tanh(v);
                let sg = t.sigmoid(v);
                let mix = t.add(t.mul(e, th), t.mul(l, sg));
                t.mean_all(mix)
            },
            &x,
            6,
            1e-6,
        );
    }

    #[test]
    fn powt_gradients_match_finite_differences() {
        // Both the base and the exponent receive gradients.
        let base = arr(&[0.2, 0.5, 0.8, 0.35]);
        check_gradient(
            |t, v| {
                let expo = t.leaf(arr(&[0.7, 1.3, 2.0, 0.5]));
                t.mean_all(t.powt(v, expo))
            },
            &base,
            4,
            1e-6,
        );
        let expo = arr(&[0.7, 1.3, 2.0, 0.5]);
        check_gradient(
            |t, v| {
                let base = t.leaf(arr(&[0.2, 0.5, 0.8, 0.35]));
                t.mean_all(t.powt(base, v))
            },
            &expo,
            4,
            1e-6,
        );
    }

    #[test]
    fn softmax_and_rms_gradients() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[2, 2, 2]),
            vec![0.3, -0.2, 1.1, 0.4, -0.6, 0.9, 0.05, -1.3],
        )
        .unwrap();
        check_gradient(
            |t, v| {
                let sm = t.softmax_c(v);
                let sq = t.square(sm);
                t.sqrt_guarded(t.mean_all(sq))
            },
            &x,
            8,
            1e-6,
        );
    }

    #[test]
    fn matmul_gradients() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.1, 0.4, -0.3, 0.8, 0.2, -0.5]).unwrap();
        check_gradient(
            |t, v| {
                let b = t.leaf(
                    ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![0.7, -0.1, 0.2, 0.9, -0.4, 0.3])
                        .unwrap(),
                );
                t.sum_all(t.square(t.matmul(v, b)))
            },
            &a,
            6,
            1e-6,
        );
    }
}
