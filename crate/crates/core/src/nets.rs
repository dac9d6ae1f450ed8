//! Trainable function approximators: the two-branch gamma/weight predictor,
//! the conditional noise-prediction U-Net, and the frozen feature extractor.
//!
//! Every forward pass is a pure function of (parameters, inputs). Activation
//! design, not training, enforces the output ranges: gamma maps pass through
//! `exp(tanh)` bounded to `[gamma_min, gamma_max]` and the weight pair through
//! a two-way softmax.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

/// Same-padded conv layer; kernel `KH x KW x Cin x Cout`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub stride: usize,
}

impl Conv2d {
    fn he(k: usize, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let w = ArrayD::from_shape_fn(IxDyn(&[k, k, cin, cout]), |_| normal.sample(rng));
        Self {
            w,
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride,
        }
    }

    fn zeros(k: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            w: ArrayD::zeros(IxDyn(&[k, k, cin, cout])),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride,
        }
    }

    fn forward(&self, t: &Tape, x: Var, pv: &mut Vec<Var>) -> Var {
        let w = t.leaf(self.w.clone());
        let b = t.leaf(self.b.clone());
        pv.push(w);
        pv.push(b);
        t.conv2d(x, w, b, self.stride)
    }

    /// Forward without exposing the parameters as trainable (frozen layer).
    fn forward_frozen(&self, t: &Tape, x: Var) -> Var {
        let w = t.leaf(self.w.clone());
        let b = t.leaf(self.b.clone());
        t.conv2d(x, w, b, self.stride)
    }
}

/// Dense layer on row vectors `(1, in) -> (1, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
}

impl Linear {
    fn he(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / n_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            w: ArrayD::from_shape_fn(IxDyn(&[n_in, n_out]), |_| normal.sample(rng)),
            b: ArrayD::zeros(IxDyn(&[n_out])),
        }
    }

    fn forward(&self, t: &Tape, x: Var, pv: &mut Vec<Var>) -> Var {
        let w = t.leaf(self.w.clone());
        let b = t.leaf(self.b.clone());
        pv.push(w);
        pv.push(b);
        let n_out = self.b.len();
        t.add(t.matmul(x, w), t.reshape(b, &[1, n_out]))
    }
}

macro_rules! visit_params {
    ($self:ident, $f:ident, $name:ident) => {
        $f(concat!(stringify!($name), ".w"), &$self.$name.w);
        $f(concat!(stringify!($name), ".b"), &$self.$name.b);
    };
}

macro_rules! visit_params_mut {
    ($self:ident, $f:ident, $name:ident) => {
        $f(concat!(stringify!($name), ".w"), &mut $self.$name.w);
        $f(concat!(stringify!($name), ".b"), &mut $self.$name.b);
    };
}

// ---------------------------------------------------------------------------
// AGCM predictor
// ---------------------------------------------------------------------------

/// Raw tape outputs of the AGCM predictor: two gamma maps and two weight
/// maps, each `H x W x 1`, already activation-constrained.
pub struct AgcmMapsT {
    pub gamma_u: Var,
    pub gamma_o: Var,
    pub weight_u: Var,
    pub weight_o: Var,
}

/// Two-branch predictor: a structure branch over `concat(L, R)` feeds a
/// channel-attention gamma head (fused with the illumination prior) and a
/// weight head.
#[derive(Debug, Clone)]
pub struct AgcmNet {
    s1: Conv2d,
    s2: Conv2d,
    g0: Conv2d,
    ca_fc1: Linear,
    ca_fc2: Linear,
    g1: Conv2d,
    g2: Conv2d,
    w1: Conv2d,
    w2: Conv2d,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Sigmoid weights instead of the softmax pair (ablation switch).
    pub unnormalized_weights: bool,
}

impl AgcmNet {
    /// Fresh network. Final heads are zero-initialized so the untrained model
    /// is the identity correction (gamma 1, weights 1/2).
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = width;
        let cat = 2 * w;
        let mid = (cat / 4).max(2);
        Self {
            s1: Conv2d::he(3, 4, w, 1, &mut rng),
            s2: Conv2d::he(3, w, w, 1, &mut rng),
            g0: Conv2d::he(3, 1, w, 1, &mut rng),
            ca_fc1: Linear::he(cat, mid, &mut rng),
            ca_fc2: Linear::he(mid, cat, &mut rng),
            g1: Conv2d::he(3, cat, w, 1, &mut rng),
            g2: Conv2d::zeros(3, w, 2, 1),
            w1: Conv2d::he(3, w, w, 1, &mut rng),
            w2: Conv2d::zeros(3, w, 2, 1),
            gamma_min: 0.1,
            gamma_max: 10.0,
            unnormalized_weights: false,
        }
    }

    /// Records the forward pass; `illum` is `H x W x 1` and `refl` is
    /// `H x W x 3`. Appends parameter leaves to `pv` in [`Self::visit`] order.
    pub fn forward_t(
        &self,
        t: &Tape,
        illum: &Array3<f64>,
        refl: &Array3<f64>,
        pv: &mut Vec<Var>,
    ) -> AgcmMapsT {
        let l = t.leaf(illum.clone().into_dyn());
        let r = t.leaf(refl.clone().into_dyn());

        // structure branch
        let xs = t.concat_last(l, r);
        let f_s = t.silu(self.s2.forward(t, t.silu(self.s1.forward(t, xs, pv)), pv));

        // gamma branch: illumination prior fused with structure via channel attention
        let g0 = t.silu(self.g0.forward(t, l, pv));
        let cat = t.concat_last(g0, f_s);
        let pooled = t.global_avg_pool(cat);
        let c = t.shape(cat)[2];
        let row = t.reshape(pooled, &[1, c]);
        let gate = t.sigmoid(self.ca_fc2.forward(t, t.silu(self.ca_fc1.forward(t, row, pv)), pv));
        let gate = t.reshape(gate, &[c]);
        let attended = t.mul_channel_scale(cat, gate);
        let g_pre = self.g2.forward(t, t.silu(self.g1.forward(t, attended, pv)), pv);

        // log-space bounded gamma: neutral point (pre-activation 0) is the
        // geometric mean of the bounds, i.e. gamma = 1 for [0.1, 10].
        let log_mid = 0.5 * (self.gamma_min.ln() + self.gamma_max.ln());
        let log_half = 0.5 * (self.gamma_max.ln() - self.gamma_min.ln());
        let to_gamma = |pre: Var| {
            let g = t.exp(t.add_scalar(t.mul_scalar(t.tanh(pre), log_half), log_mid));
            // exp can overshoot the bound by one ulp at tanh saturation
            t.clamp(g, self.gamma_min, self.gamma_max)
        };
        let gamma_u = to_gamma(t.slice_c(g_pre, 0));
        let gamma_o = to_gamma(t.slice_c(g_pre, 1));

        // weight head
        let w_pre = self.w2.forward(t, t.silu(self.w1.forward(t, f_s, pv)), pv);
        let (weight_u, weight_o) = if self.unnormalized_weights {
            let s = t.sigmoid(w_pre);
            (t.slice_c(s, 0), t.slice_c(s, 1))
        } else {
            let s = t.softmax_c(w_pre);
            (t.slice_c(s, 0), t.slice_c(s, 1))
        };

        AgcmMapsT {
            gamma_u,
            gamma_o,
            weight_u,
            weight_o,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        visit_params!(self, f, s1);
        visit_params!(self, f, s2);
        visit_params!(self, f, g0);
        visit_params!(self, f, ca_fc1);
        visit_params!(self, f, ca_fc2);
        visit_params!(self, f, g1);
        visit_params!(self, f, g2);
        visit_params!(self, f, w1);
        visit_params!(self, f, w2);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        visit_params_mut!(self, f, s1);
        visit_params_mut!(self, f, s2);
        visit_params_mut!(self, f, g0);
        visit_params_mut!(self, f, ca_fc1);
        visit_params_mut!(self, f, ca_fc2);
        visit_params_mut!(self, f, g1);
        visit_params_mut!(self, f, g2);
        visit_params_mut!(self, f, w1);
        visit_params_mut!(self, f, w2);
    }
}

// ---------------------------------------------------------------------------
// noise predictor
// ---------------------------------------------------------------------------

/// Two-level conditional U-Net predicting the noise field from
/// `(x_t, t, y)`; the condition is concatenated at the input and the timestep
/// embedding is injected as per-channel biases.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    stem: Conv2d,
    enc1: Conv2d,
    down: Conv2d,
    enc2: Conv2d,
    bott: Conv2d,
    up: Conv2d,
    fuse: Conv2d,
    out: Conv2d,
    tl1: Linear,
    tl2: Linear,
    proj_stem: Linear,
    proj_down: Linear,
    proj_up: Linear,
    pub temb_dim: usize,
    pub t_max: usize,
}

impl NoisePredictor {
    pub fn new(width: usize, temb_dim: usize, t_max: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = width;
        Self {
            stem: Conv2d::he(3, 6, w, 1, &mut rng),
            enc1: Conv2d::he(3, w, w, 1, &mut rng),
            down: Conv2d::he(3, w, 2 * w, 2, &mut rng),
            enc2: Conv2d::he(3, 2 * w, 2 * w, 1, &mut rng),
            bott: Conv2d::he(3, 2 * w, 2 * w, 1, &mut rng),
            up: Conv2d::he(3, 2 * w, w, 1, &mut rng),
            fuse: Conv2d::he(3, 2 * w, w, 1, &mut rng),
            out: Conv2d::zeros(3, w, 3, 1),
            tl1: Linear::he(temb_dim, temb_dim, &mut rng),
            tl2: Linear::he(temb_dim, temb_dim, &mut rng),
            proj_stem: Linear::he(temb_dim, w, &mut rng),
            proj_down: Linear::he(temb_dim, 2 * w, &mut rng),
            proj_up: Linear::he(temb_dim, w, &mut rng),
            temb_dim,
            t_max,
        }
    }

    fn sinusoid(&self, t_step: usize) -> ArrayD<f64> {
        // normalized timestep, scaled so the schedule length drops out
        let tn = t_step as f64 / self.t_max as f64 * 1000.0;
        let half = self.temb_dim / 2;
        let mut e = Vec::with_capacity(self.temb_dim);
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            e.push((tn * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            e.push((tn * freq).sin());
        }
        ArrayD::from_shape_vec(IxDyn(&[1, self.temb_dim]), e).unwrap()
    }

    /// Records the forward pass; `x_t` and `y` are `H x W x 3`. Appends
    /// parameter leaves to `pv` in [`Self::visit`] order.
    pub fn forward_t(
        &self,
        t: &Tape,
        x_t: &Array3<f64>,
        t_step: usize,
        y: &Array3<f64>,
        pv: &mut Vec<Var>,
    ) -> Var {
        assert!(t_step <= self.t_max, "timestep out of schedule range");
        let (h, w) = (x_t.dim().0, x_t.dim().1);
        let xv = t.leaf(x_t.clone().into_dyn());
        let yv = t.leaf(y.clone().into_dyn());

        // embedding MLP must come first to keep pv aligned with visit order
        let emb0 = t.leaf(self.sinusoid(t_step));
        let emb = self.tl2.forward(t, t.silu(self.tl1.forward(t, emb0, pv)), pv);
        let inject = |x: Var, proj: &Linear, c: usize, pv: &mut Vec<Var>| {
            let b = t.reshape(proj.forward(t, emb, pv), &[c]);
            t.add_channel_bias(x, b)
        };

        let cw = self.stem.b.len();
        let h0 = self.stem.forward(t, t.concat_last(xv, yv), pv);
        let h0 = t.silu(inject(h0, &self.proj_stem, cw, pv));
        let skip = t.silu(self.enc1.forward(t, h0, pv));

        let d = self.down.forward(t, skip, pv);
        let d = t.silu(inject(d, &self.proj_down, 2 * cw, pv));
        let d = t.silu(self.enc2.forward(t, d, pv));
        let d = t.silu(self.bott.forward(t, d, pv));

        let u = t.crop2d(t.upsample2(d), 0, 0, h, w);
        let u = self.up.forward(t, u, pv);
        let u = t.silu(inject(u, &self.proj_up, cw, pv));
        let f = t.silu(self.fuse.forward(t, t.concat_last(u, skip), pv));
        self.out.forward(t, f, pv)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        visit_params!(self, f, tl1);
        visit_params!(self, f, tl2);
        visit_params!(self, f, stem);
        visit_params!(self, f, proj_stem);
        visit_params!(self, f, enc1);
        visit_params!(self, f, down);
        visit_params!(self, f, proj_down);
        visit_params!(self, f, enc2);
        visit_params!(self, f, bott);
        visit_params!(self, f, up);
        visit_params!(self, f, proj_up);
        visit_params!(self, f, fuse);
        visit_params!(self, f, out);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        visit_params_mut!(self, f, tl1);
        visit_params_mut!(self, f, tl2);
        visit_params_mut!(self, f, stem);
        visit_params_mut!(self, f, proj_stem);
        visit_params_mut!(self, f, enc1);
        visit_params_mut!(self, f, down);
        visit_params_mut!(self, f, proj_down);
        visit_params_mut!(self, f, enc2);
        visit_params_mut!(self, f, bott);
        visit_params_mut!(self, f, up);
        visit_params_mut!(self, f, proj_up);
        visit_params_mut!(self, f, fuse);
        visit_params_mut!(self, f, out);
    }
}

/// Plain forward pass: the predicted noise field for `(x_t, t, y)`.
pub fn noise_forward(
    net: &NoisePredictor,
    x_t: &Array3<f64>,
    t_step: usize,
    y: &Array3<f64>,
) -> Result<Array3<f64>> {
    if x_t.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "x_t {:?} vs condition {:?}",
            x_t.dim(),
            y.dim()
        )));
    }
    if t_step > net.t_max {
        return Err(Error::Domain(format!(
            "timestep {t_step} outside [0, {}]",
            net.t_max
        )));
    }
    let tape = Tape::new();
    let mut pv = Vec::new();
    let out = net.forward_t(&tape, x_t, t_step, y, &mut pv);
    Ok(tape
        .value(out)
        .to_owned()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("noise output is H x W x 3"))
}

// ---------------------------------------------------------------------------
// feature extractor
// ---------------------------------------------------------------------------

/// Frozen feature map for the consistency loss: identity, a fixed random
/// conv stack, or an externally supplied conv stack.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    Identity,
    Cnn(Vec<Conv2d>),
}

impl FeatureExtractor {
    pub fn identity() -> Self {
        FeatureExtractor::Identity
    }

    /// Three stride-2 stages with fixed, seeded weights.
    pub fn frozen_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureExtractor::Cnn(vec![
            Conv2d::he(3, 3, 8, 2, &mut rng),
            Conv2d::he(3, 8, 8, 2, &mut rng),
            Conv2d::he(3, 8, 8, 2, &mut rng),
        ])
    }

    /// Loads a conv stack from a checkpoint container with arrays named
    /// `conv{i}.w` / `conv{i}.b` (pretrained-extractor mode).
    pub fn from_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let arrays = checkpoint::load_arrays(path)?;
        let lookup = |name: &str| arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a.clone());
        let mut convs = Vec::new();
        let mut i = 0;
        while let Some(w) = lookup(&format!("conv{i}.w")) {
            let b = lookup(&format!("conv{i}.b"))
                .ok_or_else(|| Error::Checkpoint(format!("missing conv{i}.b")))?;
            if w.ndim() != 4 || b.ndim() != 1 || w.shape()[3] != b.shape()[0] {
                return Err(Error::Checkpoint(format!("conv{i} has invalid shapes")));
            }
            convs.push(Conv2d { w, b, stride: 2 });
            i += 1;
        }
        if convs.is_empty() {
            return Err(Error::Checkpoint("no conv layers in extractor file".into()));
        }
        Ok(FeatureExtractor::Cnn(convs))
    }

    /// Tape expression of the features; CNN modes concatenate every stage's
    /// activations, flattened to one vector. Parameters stay frozen.
    pub fn features_t(&self, t: &Tape, x: Var) -> Var {
        match self {
            FeatureExtractor::Identity => x,
            FeatureExtractor::Cnn(convs) => {
                let mut h = x;
                let mut flat: Option<Var> = None;
                for conv in convs {
                    h = t.silu(conv.forward_frozen(t, h));
                    let n = t.shape(h).iter().product::<usize>();
                    let stage = t.reshape(h, &[n]);
                    flat = Some(match flat {
                        None => stage,
                        Some(acc) => t.concat_last(acc, stage),
                    });
                }
                flat.expect("at least one stage")
            }
        }
    }

    /// Plain feature evaluation.
    pub fn extract(&self, img: &ArrayD<f64>) -> ArrayD<f64> {
        let tape = Tape::new();
        let x = tape.leaf(img.clone());
        let f = self.features_t(&tape, x);
        tape.value(f).to_owned()
    }
}

// ---------------------------------------------------------------------------

/// Collects `(name, array)` pairs via a visit function.
pub fn collect_named(visit: impl Fn(&mut dyn FnMut(&str, &ArrayD<f64>))) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    visit(&mut |name: &str, arr: &ArrayD<f64>| out.push((name.to_string(), arr.clone())));
    out
}

/// Writes a net's parameters to a checkpoint container.
pub fn save_net(path: impl AsRef<std::path::Path>, visit: impl Fn(&mut dyn FnMut(&str, &ArrayD<f64>))) -> Result<()> {
    let named = collect_named(visit);
    let refs: Vec<(String, &ArrayD<f64>)> = named.iter().map(|(n, a)| (n.clone(), a)).collect();
    checkpoint::save_arrays(path, &refs)
}

/// Loads parameters by name into a net; every visited array must be present
/// with a matching shape.
pub fn load_net(
    path: impl AsRef<std::path::Path>,
    visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut ArrayD<f64>)),
) -> Result<()> {
    let arrays = checkpoint::load_arrays(&path)?;
    let mut missing: Vec<String> = Vec::new();
    visit_mut(&mut |name: &str, slot: &mut ArrayD<f64>| {
        match arrays.iter().find(|(n, _)| n == name) {
            Some((_, arr)) if arr.shape() == slot.shape() => *slot = arr.clone(),
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "{}: unusable entries: {}",
            path.as_ref().display(),
            missing.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::Array3;

    fn test_inputs(h: usize, w: usize) -> (Array3<f64>, Array3<f64>) {
        let l = Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
            0.1 + 0.8 * ((y * w + x) % 17) as f64 / 16.0
        });
        let r = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 3 + x * 7 + c * 11) % 23) as f64 / 22.0
        });
        (l, r)
    }

    #[test]
    fn agcm_output_shapes_and_fresh_identity() {
        let net = AgcmNet::new(8, 3);
        let (l, r) = test_inputs(6, 5);
        let t = Tape::new();
        let mut pv = Vec::new();
        let maps = net.forward_t(&t, &l, &r, &mut pv);
        for v in [maps.gamma_u, maps.gamma_o, maps.weight_u, maps.weight_o] {
            assert_eq!(t.shape(v), [6, 5, 1]);
        }
        // zero-initialized heads force gamma 1 and weights 1/2
        assert!(t.value(maps.gamma_u).iter().all(|&g| (g - 1.0).abs() < 1e-12));
        assert!(t.value(maps.gamma_o).iter().all(|&g| (g - 1.0).abs() < 1e-12));
        assert!(t.value(maps.weight_u).iter().all(|&w| (w - 0.5).abs() < 1e-12));
        assert!(t.value(maps.weight_o).iter().all(|&w| (w - 0.5).abs() < 1e-12));
    }

    #[test]
    fn agcm_maps_respect_bounds_for_arbitrary_params() {
        let mut net = AgcmNet::new(8, 5);
        // blast the heads with large weights; activations must still bound the maps
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 5.0).unwrap();
        net.visit_mut(&mut |_, arr| arr.mapv_inplace(|_| normal.sample(&mut rng)));
        let (l, r) = test_inputs(5, 5);
        let t = Tape::new();
        let mut pv = Vec::new();
        let maps = net.forward_t(&t, &l, &r, &mut pv);
        for g in t.value(maps.gamma_u).iter().chain(t.value(maps.gamma_o).iter()) {
            assert!((0.1..=10.0).contains(g));
        }
        let wu = t.value(maps.weight_u);
        let wo = t.value(maps.weight_o);
        for (u, o) in wu.iter().zip(wo.iter()) {
            assert!((u + o - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(u));
        }
    }

    #[test]
    fn agcm_param_vars_align_with_visit_order() {
        let net = AgcmNet::new(4, 1);
        let (l, r) = test_inputs(4, 4);
        let t = Tape::new();
        let mut pv = Vec::new();
        net.forward_t(&t, &l, &r, &mut pv);
        let named = collect_named(|f| net.visit(f));
        assert_eq!(pv.len(), named.len());
        for (v, (name, arr)) in pv.iter().zip(named.iter()) {
            assert_eq!(&t.shape(*v), &arr.shape().to_vec(), "misaligned {name}");
        }
    }

    #[test]
    fn noise_predictor_shape_and_determinism() {
        let net = NoisePredictor::new(4, 8, 1000, 7);
        let (_, x) = test_inputs(16, 16);
        let (_, y) = test_inputs(16, 16);
        let a = noise_forward(&net, &x, 500, &y).unwrap();
        let b = noise_forward(&net, &x, 500, &y).unwrap();
        assert_eq!(a.dim(), (16, 16, 3));
        assert_eq!(a, b);
        assert!(noise_forward(&net, &x, 1001, &y).is_err());
    }

    #[test]
    fn noise_predictor_param_vars_align_with_visit_order() {
        let net = NoisePredictor::new(2, 8, 1000, 7);
        let (_, x) = test_inputs(8, 8);
        let t = Tape::new();
        let mut pv = Vec::new();
        net.forward_t(&t, &x, 10, &x, &mut pv);
        let named = collect_named(|f| net.visit(f));
        assert_eq!(pv.len(), named.len());
        for (v, (name, arr)) in pv.iter().zip(named.iter()) {
            assert_eq!(&t.shape(*v), &arr.shape().to_vec(), "misaligned {name}");
        }
    }

    #[test]
    fn timestep_reaches_the_output() {
        // distinct t with identical inputs must generally differ once the
        // output head is non-zero
        let mut net = NoisePredictor::new(4, 8, 1000, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 0.1).unwrap();
        net.out.w.mapv_inplace(|_| normal.sample(&mut rng));
        let (_, x) = test_inputs(12, 12);
        let a = noise_forward(&net, &x, 100, &x).unwrap();
        let b = noise_forward(&net, &x, 900, &x).unwrap();
        let diff: f64 = (&a - &b).iter().map(|d| d.abs()).sum();
        assert!(diff > 1e-9, "embedding did not affect the output");
    }

    #[test]
    fn odd_sized_inputs_keep_their_shape() {
        let net = NoisePredictor::new(4, 8, 1000, 7);
        let (_, x) = test_inputs(11, 9);
        let out = noise_forward(&net, &x, 3, &x).unwrap();
        assert_eq!(out.dim(), (11, 9, 3));
    }

    #[test]
    fn feature_extractor_modes() {
        let (_, x) = test_inputs(16, 16);
        let x = x.into_dyn();
        let id = FeatureExtractor::identity();
        assert_eq!(id.extract(&x), x);

        let cnn = FeatureExtractor::frozen_random(2);
        let f1 = cnn.extract(&x);
        let f2 = cnn.extract(&x);
        assert_eq!(f1, f2, "frozen extractor must be deterministic");
        assert_eq!(f1.ndim(), 1);

        // continuity: feature difference shrinks with the perturbation
        let mut prev = f64::INFINITY;
        for k in 1..=3 {
            let delta = 10f64.powi(-(k as i32));
            let xp = &x + delta;
            let diff = (&cnn.extract(&xp.mapv(|v| v.min(1.0))) - &f1)
                .iter()
                .map(|d| d.abs())
                .fold(0.0f64, f64::max);
            assert!(diff < prev);
            prev = diff;
        }
        assert!(prev < 1e-1);
    }

    #[test]
    fn net_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agcm.ckpt");
        let net = AgcmNet::new(4, 42);
        save_net(&path, |f| net.visit(f)).unwrap();
        let mut other = AgcmNet::new(4, 1); // different init
        load_net(&path, |f| other.visit_mut(f)).unwrap();
        let a = collect_named(|f| net.visit(f));
        let b = collect_named(|f| other.visit(f));
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            for (p, q) in x.iter().zip(y.iter()) {
                assert!((p - q).abs() < 1e-6); // f32 storage
            }
        }
    }
}
