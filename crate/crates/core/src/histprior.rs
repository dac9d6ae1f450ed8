//! Illumination histograms, the corpus-level histogram prior, and the
//! histogram-guided correction loss.
//!
//! The loss is `KL(H(L') || H_prior)` where `H` is a histogram over `[0, 1]`.
//! Training needs gradients through `H`, so a triangular soft-binning
//! surrogate stands in for hard counting; with bandwidth equal to one bin
//! width the two agree exactly on bin-center-valued images.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{list_images, load_image, ImageTensor};
use crate::retinex;

/// Per-bin smoothing added before renormalization so KL never divides by zero.
pub const EPS_H: f64 = 1e-6;

/// Normalized, smoothed histogram over uniform bins on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    bins: Vec<f64>,
}

impl Histogram {
    /// Builds directly from already-normalized, strictly positive bins.
    pub fn from_bins(bins: Vec<f64>) -> Result<Self> {
        validate_bins(&bins)?;
        Ok(Self { bins })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    /// The `B + 1` uniform bin edges.
    pub fn bin_edges(&self) -> Vec<f64> {
        let b = self.bins.len();
        (0..=b).map(|i| i as f64 / b as f64).collect()
    }
}

/// Corpus-averaged illumination histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramPrior {
    bins: Vec<f64>,
    corpus_size: usize,
}

impl HistogramPrior {
    pub fn from_bins(bins: Vec<f64>, corpus_size: usize) -> Result<Self> {
        validate_bins(&bins)?;
        if corpus_size == 0 {
            return Err(Error::Corpus("prior needs at least one image".into()));
        }
        Ok(Self { bins, corpus_size })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }
}

fn validate_bins(bins: &[f64]) -> Result<()> {
    if bins.len() < 2 {
        return Err(Error::Domain("histogram needs at least 2 bins".into()));
    }
    let sum: f64 = bins.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("histogram sums to {sum}, not 1")));
    }
    if bins.iter().any(|&b| b <= 0.0) {
        return Err(Error::Domain("histogram has a non-positive bin".into()));
    }
    Ok(())
}

fn check_single_channel(illum: &ImageTensor) -> Result<()> {
    if illum.channels() != 1 {
        return Err(Error::Dimension(
            "histogram input must be single-channel".into(),
        ));
    }
    Ok(())
}

fn smooth(mut bins: Vec<f64>) -> Vec<f64> {
    let b = bins.len() as f64;
    let denom = 1.0 + b * EPS_H;
    for v in &mut bins {
        *v = (*v + EPS_H) / denom;
    }
    bins
}

/// Hard-counting histogram of a single-channel image; `1.0` lands in the
/// last bin. Normalized and smoothed.
pub fn hard_histogram(illum: &ImageTensor, bin_count: usize) -> Result<Histogram> {
    check_single_channel(illum)?;
    if bin_count < 2 {
        return Err(Error::Domain("bin_count must be at least 2".into()));
    }
    let mut counts = vec![0.0f64; bin_count];
    for &v in illum.data().iter() {
        let idx = ((v * bin_count as f64) as usize).min(bin_count - 1);
        counts[idx] += 1.0;
    }
    let n = illum.data().len() as f64;
    for c in &mut counts {
        *c /= n;
    }
    Histogram::from_bins(smooth(counts))
}

fn triangular_masses(values: &[f64], bin_count: usize, bandwidth: f64) -> Vec<f64> {
    let b = bin_count as f64;
    let mut raw = vec![0.0f64; bin_count];
    for &v in values {
        let lo = (((v - bandwidth) * b - 0.5).ceil().max(0.0)) as usize;
        let hi = (((v + bandwidth) * b - 0.5).floor()).min(b - 1.0).max(0.0) as usize;
        for (i, r) in raw.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let center = (i as f64 + 0.5) / b;
            let w = 1.0 - (v - center).abs() / bandwidth;
            if w > 0.0 {
                *r += w;
            }
        }
    }
    raw
}

/// Differentiable triangular-kernel histogram; normalized and smoothed.
pub fn soft_histogram(illum: &ImageTensor, bin_count: usize, bandwidth: f64) -> Result<Histogram> {
    check_single_channel(illum)?;
    if bin_count < 2 {
        return Err(Error::Domain("bin_count must be at least 2".into()));
    }
    if bandwidth <= 0.0 {
        return Err(Error::Domain("bandwidth must be positive".into()));
    }
    let values: Vec<f64> = illum.data().iter().copied().collect();
    let mut raw = triangular_masses(&values, bin_count, bandwidth);
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("soft histogram collected no mass".into()));
    }
    for r in &mut raw {
        *r /= total;
    }
    Histogram::from_bins(smooth(raw))
}

/// Tape node holding raw (unnormalized) triangular bin masses of `x`.
fn soft_masses_t(tape: &Tape, x: Var, bin_count: usize, bandwidth: f64) -> Var {
    let xv = tape.value(x);
    let values: Vec<f64> = xv.iter().copied().collect();
    let raw = triangular_masses(&values, bin_count, bandwidth);
    let y = ArrayD::from_shape_vec(IxDyn(&[bin_count]), raw).unwrap();
    let shape = xv.raw_dim();
    tape.push_node(
        y.into_shared(),
        Some(Box::new(move |g, sink| {
            let b = bin_count as f64;
            let mut dx = ArrayD::<f64>::zeros(shape.clone());
            let dxs = dx.as_slice_mut().unwrap();
            for (p, &v) in values.iter().enumerate() {
                let lo = (((v - bandwidth) * b - 0.5).ceil().max(0.0)) as usize;
                let hi = (((v + bandwidth) * b - 0.5).floor()).min(b - 1.0).max(0.0) as usize;
                let mut acc = 0.0;
                for i in lo..=hi.min(bin_count - 1) {
                    let center = (i as f64 + 0.5) / b;
                    let d = v - center;
                    if d.abs() < bandwidth {
                        // d/dv of 1 - |v - c| / bw
                        acc += g[i] * (-d.signum() / bandwidth);
                    }
                }
                dxs[p] = acc;
            }
            sink.add(x, dx);
        })),
    )
}

/// Normalized, smoothed soft histogram as a tape expression.
pub fn soft_histogram_t(tape: &Tape, x: Var, bin_count: usize, bandwidth: f64) -> Var {
    let raw = soft_masses_t(tape, x, bin_count, bandwidth);
    let total = tape.sum_all(raw);
    let h = tape.mul_scalar_var(raw, tape.recip(total));
    let denom = 1.0 + bin_count as f64 * EPS_H;
    tape.mul_scalar(tape.add_scalar(h, EPS_H), 1.0 / denom)
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)`; exactly zero for identical inputs.
pub fn kl_divergence(p: &Histogram, q: &HistogramPrior) -> Result<f64> {
    if p.bin_count() != q.bin_count() {
        return Err(Error::Dimension(format!(
            "bin count mismatch: {} vs {}",
            p.bin_count(),
            q.bin_count()
        )));
    }
    Ok(p
        .bins
        .iter()
        .zip(q.bins.iter())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// KL of a smoothed tape histogram against a constant prior.
fn kl_t(tape: &Tape, p: Var, prior: &HistogramPrior) -> Var {
    let neg_ln_q = ArrayD::from_shape_vec(
        IxDyn(&[prior.bin_count()]),
        prior.bins.iter().map(|q| -q.ln()).collect(),
    )
    .unwrap();
    let lp = tape.ln(p);
    let diff = tape.add_const(lp, &neg_ln_q);
    tape.sum_all(tape.mul(p, diff))
}

/// Differentiable histogram-guided correction loss: soft histogram of the
/// corrected illumination against the prior.
pub fn hic_loss_t(tape: &Tape, corrected_illum: Var, prior: &HistogramPrior) -> Var {
    let bw = 1.0 / prior.bin_count() as f64;
    let h = soft_histogram_t(tape, corrected_illum, prior.bin_count(), bw);
    kl_t(tape, h, prior)
}

/// Loss value without a caller-managed tape.
pub fn hic_loss(corrected_illum: &ImageTensor, prior: &HistogramPrior) -> Result<f64> {
    check_single_channel(corrected_illum)?;
    let tape = Tape::new();
    let x = tape.leaf(corrected_illum.data().clone().into_dyn());
    let loss = hic_loss_t(&tape, x, prior);
    Ok(tape.scalar_value(loss))
}

/// Averages the illumination histograms of every loadable image in a
/// directory. Unreadable files are skipped with a warning; an empty or fully
/// unreadable corpus is an error.
pub fn build_prior(corpus_dir: impl AsRef<Path>, bin_count: usize) -> Result<HistogramPrior> {
    let paths = list_images(&corpus_dir)?;
    if paths.is_empty() {
        return Err(Error::Corpus(format!(
            "no images in {}",
            corpus_dir.as_ref().display()
        )));
    }
    let histograms: Vec<Option<Histogram>> = paths
        .par_iter()
        .map(|path| match image_histogram(path, bin_count) {
            Ok(h) => Some(h),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                None
            }
        })
        .collect();

    // Deterministic reduction in path order.
    let mut bins = vec![0.0f64; bin_count];
    let mut used = 0usize;
    for h in histograms.into_iter().flatten() {
        for (acc, b) in bins.iter_mut().zip(h.bins.iter()) {
            *acc += b;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Corpus("every corpus image failed to load".into()));
    }
    let total: f64 = bins.iter().sum();
    for b in &mut bins {
        *b /= total;
    }
    HistogramPrior::from_bins(bins, used)
}

fn image_histogram(path: &Path, bin_count: usize) -> Result<Histogram> {
    let img = load_image(path)?;
    let pair = retinex::decompose(&img)?;
    hard_histogram(&pair.illumination, bin_count)
}

/// Prior file layout: bin count, corpus size, then space-separated bins.
pub fn save_prior(prior: &HistogramPrior, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bins: Vec<String> = prior.bins.iter().map(|b| format!("{b:.12e}")).collect();
    let text = format!(
        "{}\n{}\n{}\n",
        prior.bin_count(),
        prior.corpus_size,
        bins.join(" ")
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<HistogramPrior> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let err = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let bin_count: usize = lines
        .next()
        .ok_or_else(|| err("missing bin count"))?
        .trim()
        .parse()
        .map_err(|_| err("bad bin count"))?;
    let corpus_size: usize = lines
        .next()
        .ok_or_else(|| err("missing corpus size"))?
        .trim()
        .parse()
        .map_err(|_| err("bad corpus size"))?;
    let bins: Vec<f64> = lines
        .next()
        .ok_or_else(|| err("missing bins"))?
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| err("bad bin value")))
        .collect::<Result<_>>()?;
    if bins.len() != bin_count {
        return Err(err("bin count does not match bin line"));
    }
    let total: f64 = bins.iter().sum();
    let bins = bins.into_iter().map(|b| b / total).collect();
    HistogramPrior::from_bins(bins, corpus_size)
}
