//! Training losses: cross-entropy on accumulated logits, the membrane
//! quantization penalty, and the epoch schedule that blends them.
//!
//! The quantization penalty measures how far each recorded pre-reset membrane
//! potential sits from the binary value the neuron actually emitted for it.
//! Penalizing that distance pushes membrane values toward the spike levels
//! {0, 1}, shrinking the information lost when potentials are quantized to
//! spikes. Its weight follows a triangular epoch schedule: zero at the start
//! and end of training, peaking at `k` halfway through.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Configuration of the blended training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Exponent of the quantization penalty, positive.
    pub p: f64,
    /// Peak weight of the quantization penalty, nonnegative.
    pub k: f64,
    /// Schedule length `N` in epochs, at least 1.
    pub total_epochs: usize,
}

impl LossConfig {
    pub fn new(p: f64, k: f64, total_epochs: usize) -> Result<Self> {
        if !(p > 0.0) {
            return Err(Error::Param(format!("exponent p must be positive, got {p}")));
        }
        if !(k >= 0.0) {
            return Err(Error::Param(format!(
                "schedule peak k must be nonnegative, got {k}"
            )));
        }
        if total_epochs == 0 {
            return Err(Error::Param("total_epochs must be at least 1".into()));
        }
        Ok(LossConfig {
            p,
            k,
            total_epochs,
        })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            p: 2.0,
            k: 0.1,
            total_epochs: 400,
        }
    }
}

/// One recorded pre-reset membrane tensor: spiking layer `layer_index` at
/// timestep `timestep` within a single forward pass.
#[derive(Debug, Clone)]
pub struct TapeRecord {
    pub layer_index: usize,
    pub timestep: usize,
    pub u_pre: Tensor,
}

/// Every pre-reset membrane potential recorded during a forward pass, in
/// visitation order. Output-head accumulators are never recorded.
#[derive(Debug, Clone, Default)]
pub struct MembraneTape {
    pub records: Vec<TapeRecord>,
}

impl MembraneTape {
    pub fn new() -> Self {
        MembraneTape::default()
    }

    pub fn push(&mut self, layer_index: usize, timestep: usize, u_pre: Tensor) {
        self.records.push(TapeRecord {
            layer_index,
            timestep,
            u_pre,
        });
    }

    /// Total scalar membrane values across all records.
    pub fn element_count(&self) -> usize {
        self.records.iter().map(|r| r.u_pre.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.element_count() == 0
    }
}

/// Quantization error of a single membrane value: `|target - u|^p` where the
/// target is the spike the neuron emits at `u` (1 at or above threshold, else 0).
pub fn quant_error(u: f64, v_th: f64, p: f64) -> f64 {
    let target = if u >= v_th { 1.0 } else { 0.0 };
    let d = (target - u).abs();
    if p == 2.0 {
        d * d
    } else {
        d.powf(p)
    }
}

/// Mean quantization error over every membrane value in the tape.
///
/// Accumulated in record order with a single running sum, so the result is
/// reproducible bit-for-bit for a given tape.
pub fn rmp_loss(tape: &MembraneTape, v_th: f64, p: f64) -> Result<f64> {
    let count = tape.element_count();
    if count == 0 {
        return Err(Error::Usage(
            "quantization loss over an empty membrane tape".into(),
        ));
    }
    let mut sum = 0.0;
    for rec in &tape.records {
        for &u in rec.u_pre.data() {
            sum += quant_error(u, v_th, p);
        }
    }
    Ok(sum / count as f64)
}

/// Gradient of [`rmp_loss`] with respect to each recorded membrane value,
/// one tensor per tape record in tape order.
///
/// The spike target is held fixed during differentiation: each value is
/// pulled toward the spike level it currently maps to. At `p = 2` the
/// gradient is `2 (u - target) / count`.
pub fn rmp_loss_grad(tape: &MembraneTape, v_th: f64, p: f64) -> Result<Vec<Tensor>> {
    let count = tape.element_count();
    if count == 0 {
        return Err(Error::Usage(
            "quantization loss gradient over an empty membrane tape".into(),
        ));
    }
    let inv = 1.0 / count as f64;
    let grads = tape
        .records
        .iter()
        .map(|rec| {
            rec.u_pre.map(|u| {
                let target = if u >= v_th { 1.0 } else { 0.0 };
                let d = u - target;
                if p == 2.0 {
                    2.0 * d * inv
                } else if d == 0.0 {
                    0.0
                } else {
                    p * d.abs().powf(p - 1.0) * d.signum() * inv
                }
            })
        })
        .collect();
    Ok(grads)
}

/// Penalty weight at epoch `n` of an `N`-epoch schedule: a triangle that
/// rises linearly from 0 to `k` over the first half and falls back to 0 over
/// the second. Valid for `0 <= n <= N`.
///
/// Computed as `2k * min(n, N - n) / N`, which makes the symmetry
/// `lambda(n) == lambda(N - n)` hold bit-for-bit.
pub fn lambda_schedule(n: usize, cfg: &LossConfig) -> Result<f64> {
    let total = cfg.total_epochs;
    if n > total {
        return Err(Error::Param(format!(
            "epoch {n} is outside the schedule range [0, {total}]"
        )));
    }
    let m = n.min(total - n);
    Ok(2.0 * cfg.k * m as f64 / total as f64)
}

/// Mean cross-entropy of row-softmax probabilities against integer labels.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / batch`. Softmax is computed with per-row maximum
/// subtraction so large logits stay finite.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    let [batch, classes] = shape else {
        return Err(Error::Shape(format!(
            "expected [batch, classes] logits, got shape {shape:?}"
        )));
    };
    let (batch, classes) = (*batch, *classes);
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; batch * classes];
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} is outside the class range [0, {classes})"
            )));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &l in row {
            z += (l - max).exp();
        }
        let log_z = z.ln();
        loss -= row[label] - max - log_z;
        for (c, &l) in row.iter().enumerate() {
            let p = (l - max).exp() / z;
            let indicator = if c == label { 1.0 } else { 0.0 };
            dlogits[b * classes + c] = (p - indicator) / batch as f64;
        }
    }
    Ok((
        loss / batch as f64,
        Tensor::from_vec(&[batch, classes], dlogits)?,
    ))
}

/// Blended training objective: cross-entropy plus the scheduled quantization
/// penalty, `ce + lambda(n) * rmp`.
pub fn total_loss(ce: f64, rmp: f64, n: usize, cfg: &LossConfig) -> Result<f64> {
    Ok(ce + lambda_schedule(n, cfg)? * rmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::uniform;

    const V_TH: f64 = 0.5;

    fn random_tape(rng: &mut SeededRng, records: usize, elems: usize) -> MembraneTape {
        let mut tape = MembraneTape::new();
        for i in 0..records {
            let u = uniform(rng, &[elems], -0.5, 1.5).unwrap();
            tape.push(1, i, u);
        }
        tape
    }

    #[test]
    fn quant_error_squared_cases() {
        assert!((quant_error(0.3, V_TH, 2.0) - 0.09).abs() < 1e-15);
        assert!((quant_error(0.5, V_TH, 2.0) - 0.25).abs() < 1e-15);
        assert!((quant_error(0.8, V_TH, 2.0) - 0.04).abs() < 1e-15);
        assert_eq!(quant_error(1.0, V_TH, 2.0), 0.0);
        assert_eq!(quant_error(0.0, V_TH, 2.0), 0.0);
    }

    #[test]
    fn quant_error_general_exponent() {
        assert!((quant_error(0.3, V_TH, 1.0) - 0.3).abs() < 1e-15);
        assert!((quant_error(0.8, V_TH, 4.0) - 0.2f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn rmp_loss_of_known_tape() {
        let mut tape = MembraneTape::new();
        tape.push(
            0,
            0,
            Tensor::from_vec(&[4], vec![0.0, 0.5, 0.3, 1.0]).unwrap(),
        );
        // q values: 0, 0.25, 0.09, 0 -> mean 0.085
        let l = rmp_loss(&tape, V_TH, 2.0).unwrap();
        assert!((l - 0.085).abs() < 1e-15);
    }

    #[test]
    fn rmp_loss_matches_naive_double_loop() {
        let mut rng = SeededRng::new(77);
        for _ in 0..20 {
            let tape = random_tape(&mut rng, 6, 37);
            let fast = rmp_loss(&tape, V_TH, 2.0).unwrap();
            let mut sum = 0.0;
            let mut count = 0usize;
            for rec in &tape.records {
                for &u in rec.u_pre.data() {
                    let target = if u >= V_TH { 1.0 } else { 0.0 };
                    sum += (target - u).abs().powi(2);
                    count += 1;
                }
            }
            let oracle = sum / count as f64;
            assert!(
                (fast - oracle).abs() < 1e-12,
                "loss {fast} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn empty_tape_is_a_usage_error() {
        let tape = MembraneTape::new();
        assert!(matches!(rmp_loss(&tape, V_TH, 2.0), Err(Error::Usage(_))));
        assert!(matches!(
            rmp_loss_grad(&tape, V_TH, 2.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn grad_squared_form() {
        let mut tape = MembraneTape::new();
        tape.push(
            0,
            0,
            Tensor::from_vec(&[3], vec![0.3, 0.8, 0.5]).unwrap(),
        );
        let grads = rmp_loss_grad(&tape, V_TH, 2.0).unwrap();
        let e = 3.0;
        let expect = [2.0 * 0.3 / e, 2.0 * (0.8 - 1.0) / e, 2.0 * (0.5 - 1.0) / e];
        for (g, want) in grads[0].data().iter().zip(expect) {
            assert!((g - want).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_is_zero_exactly_at_spike_levels() {
        let mut tape = MembraneTape::new();
        tape.push(0, 0, Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        for p in [1.5, 2.0, 3.0] {
            let grads = rmp_loss_grad(&tape, V_TH, p).unwrap();
            assert_eq!(grads[0].data(), &[0.0, 0.0]);
        }
    }

    // Central differences of rmp_loss at points away from the threshold,
    // where the spike target is locally constant.
    #[test]
    fn grad_matches_finite_differences_off_threshold() {
        let mut rng = SeededRng::new(91);
        for &p in &[2.0, 3.0] {
            let mut tape = random_tape(&mut rng, 3, 11);
            // Push any value near the threshold away from it.
            for rec in &mut tape.records {
                for u in rec.u_pre.data_mut() {
                    if (*u - V_TH).abs() < 1e-3 {
                        *u += 0.01;
                    }
                }
            }
            let grads = rmp_loss_grad(&tape, V_TH, p).unwrap();
            let h = 1e-6;
            for (ri, rec) in tape.records.iter().enumerate() {
                for i in (0..rec.u_pre.len()).step_by(3) {
                    let mut tp = tape.clone();
                    tp.records[ri].u_pre.data_mut()[i] += h;
                    let mut tm = tape.clone();
                    tm.records[ri].u_pre.data_mut()[i] -= h;
                    let fd = (rmp_loss(&tp, V_TH, p).unwrap()
                        - rmp_loss(&tm, V_TH, p).unwrap())
                        / (2.0 * h);
                    let g = grads[ri].data()[i];
                    let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
                    assert!(rel < 1e-6, "p {p} record {ri} elem {i}: {g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn schedule_endpoints_and_peak_are_exact() {
        let cfg = LossConfig::new(2.0, 0.1, 400).unwrap();
        assert_eq!(lambda_schedule(0, &cfg).unwrap(), 0.0);
        assert_eq!(lambda_schedule(400, &cfg).unwrap(), 0.0);
        assert_eq!(lambda_schedule(200, &cfg).unwrap(), 0.1);
    }

    #[test]
    fn schedule_is_symmetric_bit_for_bit() {
        let cfg = LossConfig::new(2.0, 0.1, 400).unwrap();
        for n in 0..=400 {
            let a = lambda_schedule(n, &cfg).unwrap();
            let b = lambda_schedule(400 - n, &cfg).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "asymmetry at n = {n}");
        }
    }

    #[test]
    fn schedule_matches_piecewise_form() {
        let cfg = LossConfig::new(2.0, 0.07, 123).unwrap();
        for n in 0..=123usize {
            let lambda = lambda_schedule(n, &cfg).unwrap();
            let nf = n as f64;
            let tf = 123.0;
            let reference = if nf <= tf / 2.0 {
                2.0 * 0.07 * nf / tf
            } else {
                2.0 * 0.07 * (1.0 - nf / tf)
            };
            assert!(
                (lambda - reference).abs() < 1e-15,
                "n = {n}: {lambda} vs {reference}"
            );
        }
    }

    #[test]
    fn schedule_rejects_epochs_past_the_end() {
        let cfg = LossConfig::new(2.0, 0.1, 10).unwrap();
        assert!(matches!(lambda_schedule(11, &cfg), Err(Error::Param(_))));
    }

    #[test]
    fn config_is_range_checked() {
        assert!(LossConfig::new(0.0, 0.1, 10).is_err());
        assert!(LossConfig::new(2.0, -0.1, 10).is_err());
        assert!(LossConfig::new(2.0, 0.1, 0).is_err());
        assert!(LossConfig::new(2.0, 0.0, 1).is_ok());
    }

    #[test]
    fn uniform_logits_cost_log_class_count() {
        let logits = Tensor::zeros(&[3, 4]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_near_zero() {
        let mut logits = Tensor::zeros(&[2, 3]).unwrap();
        logits.data_mut()[0] = 50.0; // row 0, class 0
        logits.data_mut()[3 + 2] = 50.0; // row 1, class 2
        let (loss, _) = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::from_vec(&[1, 2], vec![1000.0, 999.0]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite());
        grad.assert_finite("dlogits").unwrap();
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = SeededRng::new(55);
        let logits = uniform(&mut rng, &[5, 7], -2.0, 2.0).unwrap();
        let (_, grad) = cross_entropy(&logits, &[0, 1, 2, 3, 4]).unwrap();
        for b in 0..5 {
            let row_sum: f64 = grad.data()[b * 7..(b + 1) * 7].iter().sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(56);
        let logits = uniform(&mut rng, &[3, 4], -1.5, 1.5).unwrap();
        let labels = [2usize, 0, 3];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp.data_mut()[i] += h;
            let mut lm = logits.clone();
            lm.data_mut()[i] -= h;
            let fd = (cross_entropy(&lp, &labels).unwrap().0
                - cross_entropy(&lm, &labels).unwrap().0)
                / (2.0 * h);
            let g = grad.data()[i];
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
            assert!(rel < 1e-6, "logit {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let logits = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn total_loss_blends_by_schedule() {
        let cfg = LossConfig::new(2.0, 0.1, 400).unwrap();
        let t = total_loss(1.5, 0.2, 200, &cfg).unwrap();
        assert!((t - (1.5 + 0.1 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn zero_peak_reduces_to_cross_entropy_bitwise() {
        let cfg = LossConfig::new(2.0, 0.0, 400).unwrap();
        for n in [0usize, 100, 200, 399] {
            let ce = 1.234567890123;
            let t = total_loss(ce, 0.777, n, &cfg).unwrap();
            assert_eq!(t.to_bits(), ce.to_bits());
        }
    }
}
