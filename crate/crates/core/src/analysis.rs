//! Membrane-distribution analysis: histograms, quantization error, and an
//! information-loss estimate for the spike quantizer.
//!
//! Firing quantizes a membrane potential `u` to a binary spike. The
//! information-loss estimator compares the membrane density near the two
//! quantization targets against the discrete spike distribution smeared over
//! the same `2 * epsilon` windows:
//!
//! * the spike distribution puts mass `1 - r` at 0 and `r` at 1 (with `r`
//!   the overall firing rate), modeled as constant densities
//!   `share / (2 * epsilon)` on the windows around 0 and 1;
//! * the membrane distribution is modeled the same way from the fraction of
//!   recorded potentials falling inside each window.
//!
//! The estimate integrates `p_u * ln(p_u / p_o)` over both windows with a
//! midpoint rule. Both model densities are constant per window, so the
//! integral is exact at any bin count and refining the grid cannot change
//! the value; a window holding no membrane mass contributes zero. The
//! estimate is a truncated divergence: regions outside the windows are
//! ignored, so it is negative whenever the windows hold membrane mass that
//! is spread thinner than the spike shares, and it rises toward zero as the
//! membrane distribution concentrates onto the quantization targets.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{quant_error, MembraneTape};
use crate::network::{Layer, Network};

/// Fixed-range histogram with explicit out-of-range counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// Index of the spiking layer whose membranes are counted.
    pub layer: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(layer: usize, lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Param(format!(
                "histogram range [{lo}, {hi}) is not a finite nonempty interval"
            )));
        }
        if bins == 0 {
            return Err(Error::Param("histogram needs at least one bin".into()));
        }
        Ok(Histogram {
            layer,
            lo,
            hi,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        })
    }

    /// Counts one value; the covered interval is `[lo, hi)`.
    pub fn add(&mut self, v: f64) {
        if v < self.lo {
            self.underflow += 1;
        } else if v >= self.hi {
            self.overflow += 1;
        } else {
            let frac = (v - self.lo) / (self.hi - self.lo);
            let idx = ((frac * self.counts.len() as f64) as usize).min(self.counts.len() - 1);
            self.counts[idx] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Normalized density of the bin containing `v`, or `None` outside the
    /// range or when the histogram is empty.
    pub fn density_at(&self, v: f64) -> Option<f64> {
        if v < self.lo || v >= self.hi || self.total() == 0 {
            return None;
        }
        let frac = (v - self.lo) / (self.hi - self.lo);
        let idx = ((frac * self.counts.len() as f64) as usize).min(self.counts.len() - 1);
        Some(self.counts[idx] as f64 / (self.total() as f64 * self.bin_width()))
    }
}

/// Adds every recorded membrane of one spiking layer to the histogram.
pub fn membrane_histogram(tape: &MembraneTape, layer: usize, hist: &mut Histogram) {
    for rec in &tape.records {
        if rec.layer_index != layer {
            continue;
        }
        for &u in rec.u_pre.data() {
            hist.add(u);
        }
    }
}

/// Grid for the information-loss estimate: window half-width around each
/// quantization target and the midpoint-rule bin count per window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlConfig {
    pub epsilon: f64,
    pub bins: usize,
}

impl KlConfig {
    pub fn new(epsilon: f64, bins: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::Param(format!(
                "window half-width must lie in (0, 0.5) so the windows around \
                 0 and 1 stay disjoint, got {epsilon}"
            )));
        }
        if bins < 10 {
            return Err(Error::Param(format!(
                "integration needs at least 10 bins per window, got {bins}"
            )));
        }
        Ok(KlConfig { epsilon, bins })
    }
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig {
            epsilon: 0.05,
            bins: 200,
        }
    }
}

/// Integer tallies feeding the information-loss estimate. Integer
/// accumulation makes the result exactly independent of batch splitting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WindowMasses {
    /// Membranes strictly within `epsilon` of 0.
    pub near_zero: u64,
    /// Membranes strictly within `epsilon` of 1.
    pub near_one: u64,
    /// Membranes at or above the firing threshold.
    pub fired: u64,
    /// All recorded membranes.
    pub total: u64,
}

impl WindowMasses {
    pub fn merge(&mut self, other: &WindowMasses) {
        self.near_zero += other.near_zero;
        self.near_one += other.near_one;
        self.fired += other.fired;
        self.total += other.total;
    }

    pub fn firing_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.fired as f64 / self.total as f64
        }
    }
}

/// Tallies one tape into the window counters.
pub fn accumulate_windows(
    tape: &MembraneTape,
    v_th: f64,
    epsilon: f64,
    acc: &mut WindowMasses,
) {
    for rec in &tape.records {
        for &u in rec.u_pre.data() {
            if (u - 0.0).abs() < epsilon {
                acc.near_zero += 1;
            }
            if (u - 1.0).abs() < epsilon {
                acc.near_one += 1;
            }
            if u >= v_th {
                acc.fired += 1;
            }
            acc.total += 1;
        }
    }
}

/// Information-loss estimate from accumulated window tallies.
///
/// Returns an error when a window holds membrane mass but its spike share is
/// zero: the divergence is unbounded there and the run is degenerate (the
/// firing threshold must lie outside the window around 1 for the tallies to
/// be consistent).
pub fn kl_information_loss(acc: &WindowMasses, cfg: &KlConfig) -> Result<f64> {
    KlConfig::new(cfg.epsilon, cfg.bins)?;
    if acc.total == 0 {
        return Err(Error::Usage(
            "no membrane records accumulated; record a pass first".into(),
        ));
    }
    let r = acc.firing_rate();
    let width = 2.0 * cfg.epsilon;
    let bin_w = width / cfg.bins as f64;
    let mut estimate = 0.0;
    for (mass_count, share) in [(acc.near_zero, 1.0 - r), (acc.near_one, r)] {
        let mass = mass_count as f64 / acc.total as f64;
        if mass == 0.0 {
            // lim x->0 of x ln x: an empty window contributes nothing.
            continue;
        }
        if share == 0.0 {
            return Err(Error::Numeric(format!(
                "membrane mass {mass} in a window whose spike share is zero; \
                 the estimate diverges"
            )));
        }
        let p_u = mass / width;
        let p_o = share / width;
        // Midpoint rule across the window. Both densities are constant, so
        // every bin contributes the same integrand value.
        let integrand = p_u * (p_u / p_o).ln();
        let mut window_sum = 0.0;
        for _ in 0..cfg.bins {
            window_sum += integrand * bin_w;
        }
        estimate += window_sum;
    }
    Ok(estimate)
}

/// Analysis settings shared by training reports and the standalone analyzer.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisConfig {
    pub batch_size: usize,
    pub kl: KlConfig,
    pub hist_bins: usize,
    pub hist_lo: f64,
    pub hist_hi: f64,
}

impl AnalysisConfig {
    pub fn new(
        batch_size: usize,
        kl: KlConfig,
        hist_bins: usize,
        hist_lo: f64,
        hist_hi: f64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Param("analysis batch size must be positive".into()));
        }
        KlConfig::new(kl.epsilon, kl.bins)?;
        // Histogram construction validates the range and bin count.
        Histogram::new(0, hist_lo, hist_hi, hist_bins)?;
        Ok(AnalysisConfig {
            batch_size,
            kl,
            hist_bins,
            hist_lo,
            hist_hi,
        })
    }
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            batch_size: 64,
            kl: KlConfig::default(),
            hist_bins: 100,
            hist_lo: -1.0,
            hist_hi: 2.0,
        }
    }
}

/// Everything one recorded pass over a dataset produces.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub mean_quant_error: f64,
    pub kl_estimate: f64,
    pub firing_rate: f64,
    pub histograms: Vec<Histogram>,
}

/// Index of the class with the highest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Firing threshold shared by the network's spiking layers.
pub fn network_v_th(net: &Network) -> Result<f64> {
    net.layers
        .iter()
        .find_map(|l| match l {
            Layer::SpikingActivation(p) => Some(p.v_th),
            _ => None,
        })
        .ok_or_else(|| Error::Usage("network has no spiking layer to analyze".into()))
}

/// Inference pass over a dataset that gathers accuracy, mean quantization
/// error, the information-loss estimate, and per-layer membrane histograms.
///
/// Training reports, the evaluator, and the standalone analyzer all run
/// through this one path so their numbers agree exactly.
pub fn analyze_network(
    net: &Network,
    ds: &Dataset,
    p: f64,
    cfg: &AnalysisConfig,
) -> Result<AnalysisResult> {
    if ds.is_empty() {
        return Err(Error::Data("cannot analyze an empty dataset".into()));
    }
    let v_th = network_v_th(net)?;
    let spiking_layers: Vec<usize> = net
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::SpikingActivation(_)))
        .map(|(i, _)| i)
        .collect();
    let mut histograms: Vec<Histogram> = spiking_layers
        .iter()
        .map(|&l| Histogram::new(l, cfg.hist_lo, cfg.hist_hi, cfg.hist_bins))
        .collect::<Result<_>>()?;
    let mut masses = WindowMasses::default();
    let mut correct = 0usize;
    let mut qe_sum = 0.0;
    let mut qe_count = 0usize;

    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(cfg.batch_size) {
        let (batch, labels) = ds.gather(chunk)?;
        let (logits, tape) = net.forward_infer(&batch, true)?;
        logits.assert_finite("logits")?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
        for rec in &tape.records {
            for &u in rec.u_pre.data() {
                qe_sum += quant_error(u, v_th, p);
            }
            qe_count += rec.u_pre.len();
        }
        accumulate_windows(&tape, v_th, cfg.kl.epsilon, &mut masses);
        for hist in &mut histograms {
            membrane_histogram(&tape, hist.layer, hist);
        }
    }
    if qe_count == 0 {
        return Err(Error::Usage(
            "no membrane records produced; network has no spiking layers".into(),
        ));
    }
    let kl_estimate = kl_information_loss(&masses, &cfg.kl)?;
    Ok(AnalysisResult {
        correct,
        total: ds.len(),
        accuracy: correct as f64 / ds.len() as f64,
        mean_quant_error: qe_sum / qe_count as f64,
        kl_estimate,
        firing_rate: masses.firing_rate(),
        histograms,
    })
}
