//! Checkpoints: one JSON header line, then a flat little-endian f64 payload.
//!
//! The header carries the full run configuration, the epoch counter, the
//! random generator state (as a decimal string, so 64-bit states survive
//! JSON), the per-epoch metric history, and a table of named tensors with
//! offsets into the payload. The payload is every parameter, normalizer
//! statistic, optimizer velocity, and standardization vector, concatenated
//! in canonical order. Everything needed to continue a run bit for bit is in
//! this one file. Writes go to a sibling temp file first and are renamed
//! into place, so a crash cannot leave a half-written checkpoint behind.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{apply_standardize, Dataset, FeatureStats};
use crate::error::{Error, Result};
use crate::network::{Layer, Network, OptimState};
use crate::rng::SeededRng;
use crate::train::{load_datasets, EpochMetrics, Trainer};

const FORMAT: &str = "snn-rmp-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f64 payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchInfo {
    input_shape: Vec<usize>,
    class_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    epoch: usize,
    rng_state: String,
    config: TrainConfig,
    arch: ArchInfo,
    history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

/// Enumerates every persisted tensor of a trainer in canonical order:
/// layer parameters and normalizer statistics first, then optimizer
/// velocities in parameter order, then standardization vectors.
fn visit_tensors<'a>(trainer: &'a Trainer, mut f: impl FnMut(String, Vec<usize>, &'a [f64])) {
    for (i, layer) in trainer.net.layers.iter().enumerate() {
        match layer {
            Layer::Dense { weight, bias } => {
                f(format!("layer{i}.weight"), weight.shape().to_vec(), weight.data());
                f(format!("layer{i}.bias"), bias.shape().to_vec(), bias.data());
            }
            Layer::Conv2d { kernels, .. } => {
                f(format!("layer{i}.kernels"), kernels.shape().to_vec(), kernels.data());
            }
            Layer::TdBN(bn) => {
                let c = bn.channels();
                f(format!("layer{i}.gamma"), vec![c], &bn.gamma);
                f(format!("layer{i}.beta"), vec![c], &bn.beta);
                f(format!("layer{i}.running_mean"), vec![c], &bn.running_mean);
                f(format!("layer{i}.running_var"), vec![c], &bn.running_var);
            }
            _ => {}
        }
    }
    let mut slot = 0usize;
    for (i, layer) in trainer.net.layers.iter().enumerate() {
        let mut vel = |name: String, shape: Vec<usize>| {
            f(name, shape, &trainer.opt.velocity[slot]);
            slot += 1;
        };
        match layer {
            Layer::Dense { weight, bias } => {
                vel(format!("opt.layer{i}.weight"), weight.shape().to_vec());
                vel(format!("opt.layer{i}.bias"), bias.shape().to_vec());
            }
            Layer::Conv2d { kernels, .. } => {
                vel(format!("opt.layer{i}.kernels"), kernels.shape().to_vec());
            }
            Layer::TdBN(bn) => {
                vel(format!("opt.layer{i}.gamma"), vec![bn.channels()]);
                vel(format!("opt.layer{i}.beta"), vec![bn.channels()]);
            }
            _ => {}
        }
    }
    if let Some(stats) = &trainer.stats {
        f("standardize.mean".into(), vec![stats.mean.len()], &stats.mean);
        f("standardize.std".into(), vec![stats.std.len()], &stats.std);
    }
}

/// Writes the trainer state to `path` atomically.
pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    visit_tensors(trainer, |name, shape, data| {
        entries.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
            len: data.len(),
        });
        payload.extend_from_slice(data);
    });
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        epoch: trainer.epoch,
        rng_state: trainer.rng.state().to_string(),
        config: trainer.cfg.clone(),
        arch: ArchInfo {
            input_shape: trainer.sample_shape.clone(),
            class_count: trainer.class_count,
        },
        history: trainer.history.clone(),
        tensors: entries,
    };
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let tmp = temp_sibling(path)?;
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(header_line.as_bytes())?;
        out.write_all(b"\n")?;
        for &v in &payload {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> Result<std::path::PathBuf> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    Ok(path.with_file_name(tmp_name))
}

/// Reads a checkpoint back into a trainer.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: no header line", path.display())))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: format is {:?}, expected {FORMAT:?}",
            path.display(),
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} is not supported (expected {VERSION})",
            path.display(),
            header.version
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: stored config invalid: {e}", path.display())))?;
    let rng_state: u64 = header.rng_state.parse().map_err(|_| {
        Error::Checkpoint(format!(
            "{}: rng_state {:?} is not a 64-bit integer",
            path.display(),
            header.rng_state
        ))
    })?;

    // Payload integrity: contiguous entries covering exactly the bytes after
    // the header line.
    let mut expected = 0usize;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {:?} at offset {} but {expected} expected",
                path.display(),
                e.name,
                e.offset
            )));
        }
        let shape_len: usize = e.shape.iter().product();
        if shape_len != e.len {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {:?} shape {:?} disagrees with element count {}",
                path.display(),
                e.name,
                e.shape,
                e.len
            )));
        }
        expected += e.len;
    }
    let body = &bytes[nl + 1..];
    if body.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: payload has {} bytes, header promises {}",
            path.display(),
            body.len(),
            expected * 8
        )));
    }
    let payload: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    // Rebuild the skeleton, then overwrite every tensor from the payload.
    let mut trainer = skeleton(&header)?;
    trainer.epoch = header.epoch;
    trainer.history = header.history;
    trainer.rng = SeededRng::from_state(rng_state);

    let index: HashMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    if index.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{}: duplicate tensor names",
            path.display()
        )));
    }
    let mut used: HashSet<String> = HashSet::new();
    fill_tensors(&mut trainer, &index, &payload, &mut used, path)?;
    if used.len() != header.tensors.len() {
        let extra: Vec<&str> = header
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !used.contains(*n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "{}: unexpected tensors {extra:?}",
            path.display()
        )));
    }
    Ok(trainer)
}

/// Builds an uninitialized trainer matching the header's architecture.
fn skeleton(header: &Header) -> Result<Trainer> {
    let cfg = header.config.clone();
    let mut throwaway = SeededRng::new(0);
    let bp = crate::network::BuildParams {
        neuron: crate::neuron::NeuronParams::new(cfg.tau, cfg.v_th)?,
        alpha: cfg.alpha,
        bn_eps: cfg.bn_eps,
        bn_momentum: cfg.bn_momentum,
        timesteps: cfg.timesteps,
    };
    let net = Network::build(
        &cfg.arch,
        &header.arch.input_shape,
        header.arch.class_count,
        &bp,
        &mut throwaway,
    )?;
    let opt = OptimState::new(&net, cfg.base_lr, cfg.momentum, cfg.epochs)?;
    let loss_cfg = crate::loss::LossConfig::new(cfg.p, cfg.k, cfg.epochs)?;
    let stats = if cfg.standardize {
        let features: usize = header.arch.input_shape.iter().product();
        Some(FeatureStats {
            mean: vec![0.0; features],
            std: vec![0.0; features],
        })
    } else {
        None
    };
    Ok(Trainer {
        net,
        opt,
        rng: SeededRng::new(cfg.seed),
        epoch: 0,
        sample_shape: header.arch.input_shape.clone(),
        class_count: header.arch.class_count,
        cfg,
        loss_cfg,
        rmp_enabled: true,
        history: Vec::new(),
        stats,
    })
}

/// Copies payload data into every expected tensor slot, in the same
/// canonical order [`visit_tensors`] uses for writing.
fn fill_tensors(
    trainer: &mut Trainer,
    index: &HashMap<&str, &TensorEntry>,
    payload: &[f64],
    used: &mut HashSet<String>,
    path: &Path,
) -> Result<()> {
    let mut take = |name: String, dst: &mut [f64], shape: &[usize]| -> Result<()> {
        let entry = index.get(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing tensor {name:?}", path.display()))
        })?;
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name:?} has shape {:?}, expected {shape:?}",
                path.display(),
                entry.shape
            )));
        }
        dst.copy_from_slice(&payload[entry.offset..entry.offset + entry.len]);
        used.insert(name);
        Ok(())
    };

    let layer_count = trainer.net.layers.len();
    for i in 0..layer_count {
        match &mut trainer.net.layers[i] {
            Layer::Dense { weight, bias } => {
                let shape = weight.shape().to_vec();
                take(format!("layer{i}.weight"), weight.data_mut(), &shape)?;
                let shape = bias.shape().to_vec();
                take(format!("layer{i}.bias"), bias.data_mut(), &shape)?;
            }
            Layer::Conv2d { kernels, .. } => {
                let shape = kernels.shape().to_vec();
                take(format!("layer{i}.kernels"), kernels.data_mut(), &shape)?;
            }
            Layer::TdBN(bn) => {
                let c = bn.channels();
                take(format!("layer{i}.gamma"), &mut bn.gamma, &[c])?;
                take(format!("layer{i}.beta"), &mut bn.beta, &[c])?;
                take(format!("layer{i}.running_mean"), &mut bn.running_mean, &[c])?;
                take(format!("layer{i}.running_var"), &mut bn.running_var, &[c])?;
            }
            _ => {}
        }
    }
    let mut slot = 0usize;
    for i in 0..layer_count {
        let names: Vec<(String, Vec<usize>)> = match &trainer.net.layers[i] {
            Layer::Dense { weight, bias } => vec![
                (format!("opt.layer{i}.weight"), weight.shape().to_vec()),
                (format!("opt.layer{i}.bias"), bias.shape().to_vec()),
            ],
            Layer::Conv2d { kernels, .. } => {
                vec![(format!("opt.layer{i}.kernels"), kernels.shape().to_vec())]
            }
            Layer::TdBN(bn) => vec![
                (format!("opt.layer{i}.gamma"), vec![bn.channels()]),
                (format!("opt.layer{i}.beta"), vec![bn.channels()]),
            ],
            _ => Vec::new(),
        };
        for (name, shape) in names {
            take(name, &mut trainer.opt.velocity[slot], &shape)?;
            slot += 1;
        }
    }
    if let Some(stats) = &mut trainer.stats {
        let f = stats.mean.len();
        take("standardize.mean".into(), &mut stats.mean, &[f])?;
        let f = stats.std.len();
        take("standardize.std".into(), &mut stats.std, &[f])?;
    }
    Ok(())
}

/// Loads a checkpoint and rebuilds its datasets, standardized with the
/// stored statistics.
pub fn load_with_data(path: &Path) -> Result<(Trainer, Dataset, Dataset)> {
    let trainer = load_trainer(path)?;
    let (mut train, mut test) = load_datasets(&trainer.cfg.dataset)?;
    if train.sample_shape() != trainer.sample_shape {
        return Err(Error::Data(format!(
            "dataset samples are {:?}, checkpoint was trained on {:?}",
            train.sample_shape(),
            trainer.sample_shape
        )));
    }
    if train.class_count != trainer.class_count {
        return Err(Error::Data(format!(
            "dataset has {} classes, checkpoint was trained on {}",
            train.class_count, trainer.class_count
        )));
    }
    if let Some(stats) = &trainer.stats {
        apply_standardize(&mut train, stats)?;
        apply_standardize(&mut test, stats)?;
    }
    Ok((trainer, train, test))
}
