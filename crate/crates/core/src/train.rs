//! The training loop: seeded shuffling, minibatch descent, per-epoch
//! metrics, and a deterministic parallel evaluator.
//!
//! Determinism contract: one seed fixes weight initialization and exactly
//! one permutation draw per epoch; nothing else consumes randomness. Saving
//! the generator state together with the weights therefore makes a resumed
//! run reproduce the uninterrupted one bit for bit.

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, TrainConfig};
use crate::data::{
    apply_standardize, feature_stats, load_csv, load_idx, synth_blobs, Dataset, FeatureStats,
};
use crate::error::{Error, Result};
use crate::loss::{
    cross_entropy, lambda_schedule, quant_error, rmp_loss, rmp_loss_grad, total_loss, LossConfig,
};
use crate::network::{
    learning_rate, sgd_step, ActivationMode, BuildParams, Network, OptimState, RmpInjection,
};
use crate::neuron::NeuronParams;
use crate::analysis::argmax;
use crate::rng::SeededRng;

/// One epoch's worth of reported numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Scheduled penalty weight used this epoch.
    pub lambda: f64,
    /// Learning rate used this epoch.
    pub lr: f64,
    /// Sample-weighted mean of the combined batch losses.
    pub train_loss: f64,
    /// Sample-weighted mean of the batch membrane penalties.
    pub rmp: f64,
    /// Mean quantization error over the test-set membrane records.
    pub qerr: f64,
    /// Test-set accuracy.
    pub accuracy: f64,
}

#[derive(Debug)]
pub struct Trainer {
    pub net: Network,
    pub opt: OptimState,
    pub rng: SeededRng,
    /// Next epoch to run; also the count of completed epochs.
    pub epoch: usize,
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    /// Structurally disables the membrane penalty: no penalty values are
    /// computed at all, as opposed to `k = 0` which computes them with
    /// weight zero. Both must produce the same training trajectory.
    pub rmp_enabled: bool,
    pub history: Vec<EpochMetrics>,
    /// Training-split standardization, reapplied verbatim on resume.
    pub stats: Option<FeatureStats>,
    pub sample_shape: Vec<usize>,
    pub class_count: usize,
}

/// Materializes the dataset a config names: `(train, test)`.
pub fn load_datasets(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Synth {
            classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
            data_seed,
        } => synth_blobs(
            *data_seed,
            *classes,
            *dim,
            *train_per_class,
            *test_per_class,
            *spread,
        ),
        DatasetSpec::Csv { train, test } => {
            let train_ds = load_csv(train.as_ref())?;
            let test_ds = load_csv(test.as_ref())?;
            check_split_compat(&train_ds, &test_ds)?;
            Ok((train_ds, test_ds))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train_ds = load_idx(train_images.as_ref(), train_labels.as_ref())?;
            let test_ds = load_idx(test_images.as_ref(), test_labels.as_ref())?;
            check_split_compat(&train_ds, &test_ds)?;
            Ok((train_ds, test_ds))
        }
    }
}

fn check_split_compat(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::Data(format!(
            "train samples are {:?} but test samples are {:?}",
            train.sample_shape(),
            test.sample_shape()
        )));
    }
    if test.class_count > train.class_count {
        return Err(Error::Data(format!(
            "test split has {} classes, training split only {}",
            test.class_count, train.class_count
        )));
    }
    Ok(())
}

impl Trainer {
    /// Builds a fresh trainer from a validated config: loads the dataset,
    /// standardizes it, and initializes the network from the seed.
    /// Returns the prepared splits alongside the trainer.
    pub fn new(cfg: TrainConfig) -> Result<(Trainer, Dataset, Dataset)> {
        cfg.validate()?;
        let (mut train, mut test) = load_datasets(&cfg.dataset)?;
        let stats = if cfg.standardize {
            let stats = feature_stats(&train)?;
            apply_standardize(&mut train, &stats)?;
            apply_standardize(&mut test, &stats)?;
            Some(stats)
        } else {
            None
        };
        let trainer = Trainer::from_parts(cfg, &train, stats)?;
        Ok((trainer, train, test))
    }

    /// Builds the trainer against an already-prepared training split.
    pub fn from_parts(
        cfg: TrainConfig,
        train: &Dataset,
        stats: Option<FeatureStats>,
    ) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let bp = BuildParams {
            neuron: NeuronParams::new(cfg.tau, cfg.v_th)?,
            alpha: cfg.alpha,
            bn_eps: cfg.bn_eps,
            bn_momentum: cfg.bn_momentum,
            timesteps: cfg.timesteps,
        };
        let net = Network::build(
            &cfg.arch,
            train.sample_shape(),
            train.class_count,
            &bp,
            &mut rng,
        )?;
        let opt = OptimState::new(&net, cfg.base_lr, cfg.momentum, cfg.epochs)?;
        let loss_cfg = LossConfig::new(cfg.p, cfg.k, cfg.epochs)?;
        Ok(Trainer {
            net,
            opt,
            rng,
            epoch: 0,
            sample_shape: train.sample_shape().to_vec(),
            class_count: train.class_count,
            cfg,
            loss_cfg,
            rmp_enabled: true,
            history: Vec::new(),
            stats,
        })
    }

    /// Runs the next epoch: one permutation draw, minibatch updates, then a
    /// test-set metric pass.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        let n = self.epoch;
        if n >= self.cfg.epochs {
            return Err(Error::Usage(format!(
                "all {} epochs already completed",
                self.cfg.epochs
            )));
        }
        let v_th = self.cfg.v_th;
        let p = self.cfg.p;
        let lambda = if self.rmp_enabled {
            lambda_schedule(n, &self.loss_cfg)?
        } else {
            0.0
        };

        let mut perm: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut perm);

        let mut loss_sum = 0.0;
        let mut rmp_sum = 0.0;
        for chunk in perm.chunks(self.cfg.batch_size) {
            let (batch, labels) = train.gather(chunk)?;
            let pass = self
                .net
                .forward_train(&batch, true, ActivationMode::Spiking)?;
            let (ce, dlogits) = cross_entropy(&pass.logits, &labels)?;
            let (total, rmp_val) = if self.rmp_enabled {
                let rmp_val = rmp_loss(&pass.tape, v_th, p)?;
                (total_loss(ce, rmp_val, n, &self.loss_cfg)?, rmp_val)
            } else {
                (ce, 0.0)
            };
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {n}: batch loss is {total}"
                )));
            }
            // The penalty gradient is only materialized when its schedule
            // weight is nonzero; a zero weight must leave the update
            // bit-identical to a run without the penalty.
            let rmp_grads = if self.rmp_enabled && lambda != 0.0 {
                Some(rmp_loss_grad(&pass.tape, v_th, p)?)
            } else {
                None
            };
            let inj = rmp_grads.as_ref().map(|grads| RmpInjection {
                grads,
                lambda,
            });
            let grads = self.net.backward(&pass, &dlogits, inj)?;
            sgd_step(&mut self.net, &grads, &mut self.opt, n)?;
            loss_sum += total * chunk.len() as f64;
            rmp_sum += rmp_val * chunk.len() as f64;
        }

        let (accuracy, qerr) = eval_metrics(&self.net, test, self.cfg.batch_size, v_th, p)?;
        let metrics = EpochMetrics {
            epoch: n,
            lambda,
            lr: learning_rate(self.cfg.base_lr, n, self.cfg.epochs),
            train_loss: loss_sum / train.len() as f64,
            rmp: rmp_sum / train.len() as f64,
            qerr,
            accuracy,
        };
        self.history.push(metrics.clone());
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs epochs until `until` are complete (capped by the config).
    pub fn run_until(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        until: usize,
    ) -> Result<Vec<EpochMetrics>> {
        let stop = until.min(self.cfg.epochs);
        let mut out = Vec::new();
        while self.epoch < stop {
            out.push(self.run_epoch(train, test)?);
        }
        Ok(out)
    }

    pub fn is_complete(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }
}

/// Accuracy and mean membrane quantization error from one recorded
/// inference pass over a dataset.
pub fn eval_metrics(
    net: &Network,
    ds: &Dataset,
    batch_size: usize,
    v_th: f64,
    p: f64,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    let mut qe_sum = 0.0;
    let mut qe_count = 0usize;
    for chunk in indices.chunks(batch_size) {
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
    }
    if qe_count == 0 {
        return Err(Error::Usage(
            "network has no spiking layers; nothing to measure".into(),
        ));
    }
    Ok((
        correct as f64 / ds.len() as f64,
        qe_sum / qe_count as f64,
    ))
}

/// Reads the evaluation thread cap from `SNN_RMP_THREADS` (default 1).
pub fn eval_thread_cap() -> Result<usize> {
    match std::env::var("SNN_RMP_THREADS") {
        Ok(s) => {
            let n: usize = s.trim().parse().map_err(|_| {
                Error::Param(format!(
                    "SNN_RMP_THREADS must be a positive integer, got {s:?}"
                ))
            })?;
            if n == 0 {
                return Err(Error::Param(
                    "SNN_RMP_THREADS must be a positive integer, got 0".into(),
                ));
            }
            Ok(n)
        }
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Param(format!("SNN_RMP_THREADS: {e}"))),
    }
}

/// Counts correct predictions over a slice of sample indices.
fn eval_range(
    net: &Network,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<usize> {
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = ds.gather(chunk)?;
        let (logits, _) = net.forward_infer(&batch, false)?;
        logits.assert_finite("logits")?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Full-dataset accuracy as integer counts `(correct, total)`.
///
/// Work is split into contiguous index ranges, one per thread, and the
/// integer counts are reduced in range order, so the result is identical for
/// every thread cap.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<(usize, usize)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let threads = eval_thread_cap()?.min(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    if threads == 1 {
        return Ok((eval_range(net, ds, &indices, batch_size)?, ds.len()));
    }
    let per = ds.len().div_ceil(threads);
    let ranges: Vec<&[usize]> = indices.chunks(per).collect();
    let results: Vec<Result<usize>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|range| scope.spawn(move || eval_range(net, ds, range, batch_size)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numeric("evaluation thread panicked".into())))
            })
            .collect()
    });
    let mut correct = 0usize;
    for r in results {
        correct += r?;
    }
    Ok((correct, ds.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small_cfg() -> TrainConfig {
        TrainConfig::from_value(json!({
            "arch": "mlp-s",
            "dataset": {
                "kind": "synth",
                "classes": 3,
                "dim": 8,
                "train_per_class": 20,
                "test_per_class": 10,
                "spread": 0.25
            },
            "timesteps": 2,
            "epochs": 4,
            "batch_size": 16,
            "seed": 7
        }))
        .unwrap()
    }

    #[test]
    fn one_epoch_produces_metrics_and_advances() {
        let (mut tr, train, test) = Trainer::new(small_cfg()).unwrap();
        let m = tr.run_epoch(&train, &test).unwrap();
        assert_eq!(m.epoch, 0);
        assert_eq!(tr.epoch, 1);
        assert_eq!(m.lambda, 0.0, "schedule starts at zero");
        assert_eq!(m.lr, 0.01);
        assert!(m.train_loss.is_finite());
        assert!(m.rmp > 0.0);
        assert!(m.qerr >= 0.0);
        assert!((0.0..=1.0).contains(&m.accuracy));
        assert_eq!(tr.history.len(), 1);
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let (mut a, train, test) = Trainer::new(small_cfg()).unwrap();
        let (mut b, train2, test2) = Trainer::new(small_cfg()).unwrap();
        assert_eq!(train.inputs, train2.inputs);
        let ma = a.run_until(&train, &test, 3).unwrap();
        let mb = b.run_until(&train2, &test2, 3).unwrap();
        assert_eq!(ma, mb, "identical seeds give identical metric sequences");
        // And the weights agree bit for bit.
        for (la, lb) in a.net.layers.iter().zip(&b.net.layers) {
            if let (
                crate::network::Layer::Dense { weight: wa, .. },
                crate::network::Layer::Dense { weight: wb, .. },
            ) = (la, lb)
            {
                assert_eq!(wa, wb);
            }
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let (mut a, train, test) = Trainer::new(small_cfg()).unwrap();
        let mut cfg = small_cfg();
        cfg.seed = 8;
        let (mut b, train2, test2) = Trainer::new(cfg).unwrap();
        let ma = a.run_epoch(&train, &test).unwrap();
        let mb = b.run_epoch(&train2, &test2).unwrap();
        assert_ne!(ma.train_loss, mb.train_loss);
    }

    #[test]
    fn learning_reduces_loss_on_separable_blobs() {
        let (mut tr, train, test) = Trainer::new(small_cfg()).unwrap();
        let first = tr.run_epoch(&train, &test).unwrap();
        let mut last = first.clone();
        while !tr.is_complete() {
            last = tr.run_epoch(&train, &test).unwrap();
        }
        assert!(
            last.train_loss < first.train_loss,
            "loss should fall: {} -> {}",
            first.train_loss,
            last.train_loss
        );
        assert!(
            last.accuracy > 1.0 / 3.0,
            "accuracy should beat chance, got {}",
            last.accuracy
        );
    }

    #[test]
    fn epochs_beyond_the_schedule_are_rejected() {
        let (mut tr, train, test) = Trainer::new(small_cfg()).unwrap();
        tr.run_until(&train, &test, 99).unwrap();
        assert!(tr.is_complete());
        assert!(matches!(
            tr.run_epoch(&train, &test),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn k_zero_matches_structurally_disabled_penalty() {
        let mut cfg = small_cfg();
        cfg.k = 0.0;
        let (mut a, train, test) = Trainer::new(cfg.clone()).unwrap();
        let (mut b, train2, test2) = Trainer::new(cfg).unwrap();
        b.rmp_enabled = false;
        let ma = a.run_until(&train, &test, 4).unwrap();
        let mb = b.run_until(&train2, &test2, 4).unwrap();
        for (x, y) in ma.iter().zip(&mb) {
            assert_eq!(x.train_loss, y.train_loss, "identical loss bit for bit");
            assert_eq!(x.accuracy, y.accuracy);
            assert_eq!(x.qerr, y.qerr);
        }
        // Weight streams stay bit-identical too.
        for (la, lb) in a.net.layers.iter().zip(&b.net.layers) {
            if let (
                crate::network::Layer::Dense { weight: wa, .. },
                crate::network::Layer::Dense { weight: wb, .. },
            ) = (la, lb)
            {
                assert_eq!(wa, wb);
            }
        }
    }

    #[test]
    fn standardization_stats_are_stored_and_applied() {
        let (tr, train, _) = Trainer::new(small_cfg()).unwrap();
        let stats = tr.stats.as_ref().unwrap();
        assert_eq!(stats.mean.len(), 8);
        // The returned split is already standardized.
        let after = crate::data::feature_stats(&train).unwrap();
        for d in 0..8 {
            assert!(after.mean[d].abs() < 1e-12);
        }
        let mut cfg = small_cfg();
        cfg.standardize = false;
        let (tr2, _, _) = Trainer::new(cfg).unwrap();
        assert!(tr2.stats.is_none());
    }

    #[test]
    fn evaluate_counts_match_eval_metrics() {
        let (mut tr, train, test) = Trainer::new(small_cfg()).unwrap();
        tr.run_epoch(&train, &test).unwrap();
        let (correct, total) = evaluate(&tr.net, &test, 16).unwrap();
        assert_eq!(total, 30);
        let (acc, _) = eval_metrics(&tr.net, &test, 16, 0.5, 2.0).unwrap();
        assert_eq!(correct as f64 / total as f64, acc);
    }

    // One test owns the SNN_RMP_THREADS variable end to end: the test runner
    // is multi-threaded and process environment is shared, so splitting this
    // into several tests would race.
    #[test]
    fn thread_cap_parses_and_leaves_accuracy_unchanged() {
        std::env::set_var("SNN_RMP_THREADS", "zero");
        assert!(eval_thread_cap().is_err());
        std::env::set_var("SNN_RMP_THREADS", "0");
        assert!(eval_thread_cap().is_err());
        std::env::remove_var("SNN_RMP_THREADS");
        assert_eq!(eval_thread_cap().unwrap(), 1);

        let (mut tr, train, test) = Trainer::new(small_cfg()).unwrap();
        tr.run_epoch(&train, &test).unwrap();
        let (c1, _) = evaluate(&tr.net, &test, 7).unwrap();
        std::env::set_var("SNN_RMP_THREADS", "3");
        let (c3, _) = evaluate(&tr.net, &test, 7).unwrap();
        std::env::set_var("SNN_RMP_THREADS", "16");
        let (c16, _) = evaluate(&tr.net, &test, 7).unwrap();
        std::env::remove_var("SNN_RMP_THREADS");
        assert_eq!(c1, c3);
        assert_eq!(c1, c16);
    }

    #[test]
    fn csv_dataset_spec_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = synth_blobs(3, 3, 6, 10, 4, 0.3).unwrap();
        let train_path = dir.path().join("train.csv");
        let test_path = dir.path().join("test.csv");
        crate::data::write_csv(&train_path, &train).unwrap();
        crate::data::write_csv(&test_path, &test).unwrap();
        let spec = DatasetSpec::Csv {
            train: train_path.to_str().unwrap().into(),
            test: test_path.to_str().unwrap().into(),
        };
        let (t2, s2) = load_datasets(&spec).unwrap();
        assert_eq!(t2.inputs, train.inputs);
        assert_eq!(s2.labels, test.labels);
    }

    #[test]
    fn mismatched_split_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let train_path = dir.path().join("train.csv");
        let test_path = dir.path().join("test.csv");
        std::fs::write(&train_path, "1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        std::fs::write(&test_path, "1.0,2.0,3.0,0\n4.0,5.0,6.0,1\n").unwrap();
        let spec = DatasetSpec::Csv {
            train: train_path.to_str().unwrap().into(),
            test: test_path.to_str().unwrap().into(),
        };
        assert!(matches!(load_datasets(&spec), Err(Error::Data(_))));
    }
}
