//! Training orchestration: the pretraining step that wires the two-view
//! losses and the distillation branch with the correct stop-gradient
//! placement, the epoch loops, supervised fine-tuning, and the checkpoint
//! format.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::augment::{derive_stream, sample_view, AugmentationConfig, ViewSlot};
use crate::data::{batches, stratified_subsample, BatchMode, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_loss, cross_entropy, kl_divergence, normalize_similarity, propagate_closed_form,
    propagate_iterative, similarity_matrix, temperature_softmax, total_loss, LossWeights,
    PropagationMode, SoftTargets,
};
use crate::model::{
    images_to_tensor, init_networks, views_to_tensor, Encoder, EncoderConfig, MlpHeadConfig, Mode,
    NetworkSet,
};
use crate::raster::Image;
use crate::tensor::{backward, sgd_update, Scalar, Tensor};

/// Self-supervised pretraining parameters. Defaults are the desk-scale
/// protocol; the full-scale values (40 epochs, batch 256, view 112) are plain
/// config choices away.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// Distillation logit count.
    pub k: usize,
    pub ema_decay: f64,
    pub propagation: PropagationMode,
    pub seed: u64,
    pub augment: AugmentationConfig,
    pub encoder: EncoderConfig,
    pub head: MlpHeadConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 0.0004,
            weights: LossWeights::default(),
            k: 4,
            ema_decay: 0.996,
            propagation: PropagationMode::ClosedForm,
            seed: 0,
            augment: AugmentationConfig::default(),
            encoder: EncoderConfig::default(),
            head: MlpHeadConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Contract(format!(
                "pretraining batch size {} < 2",
                self.batch_size
            )));
        }
        if let PropagationMode::Iterative(0) = self.propagation {
            return Err(Error::Contract("iterative propagation needs t >= 1".into()));
        }
        Ok(())
    }
}

/// Loss values of one pretraining step.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: f64,
    pub cv: f64,
    pub cm: f64,
    pub skd: f64,
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: StepLosses,
}

/// Mutable training state: the networks, the step counter, and the loss log.
pub struct TrainState<S: Scalar> {
    pub networks: NetworkSet<S>,
    pub step: usize,
    pub loss_log: Vec<StepRecord>,
}

/// The full per-step loss graph, still attached for backward. `soft_targets`
/// is exposed so tests can probe the stop-gradient contract.
pub struct LossGraph<S: Scalar> {
    pub total: Tensor<S>,
    pub cv: Tensor<S>,
    pub cm: Tensor<S>,
    pub skd: Tensor<S>,
    pub soft_targets: SoftTargets<S>,
}

/// Build the losses for one batch of first/second views:
/// online predictions `q` and `q'`, detached target projection `z''`,
/// `L_CV = cos_loss(q, q')`, `L_CM = cos_loss(q', z'')`, and the
/// distillation term from detached affinities against the attached
/// temperature softmax.
pub fn pretrain_loss_graph<S: Scalar>(
    net: &mut NetworkSet<S>,
    first_views: &Tensor<S>,
    second_views: &Tensor<S>,
    weights: &LossWeights,
    propagation: PropagationMode,
) -> Result<LossGraph<S>> {
    // Online branch. The first-view features feed the projector, the
    // similarity graph, and the distillation head from a single encode.
    let y = net.encode_online(first_views, Mode::Train)?;
    let (_z, q) = net.project_predict_online(&y, Mode::Train)?;
    let y2 = net.encode_online(second_views, Mode::Train)?;
    let (_z2, q2) = net.project_predict_online(&y2, Mode::Train)?;

    // Target branch: batch-statistics normalization, output detached.
    let z_target = net.forward_target(second_views, Mode::Train)?;

    let cv = cosine_loss(&q, &q2)?;
    let cm = cosine_loss(&q2, &z_target)?;

    // Distillation branch: the affinity side is fully detached.
    let sim = normalize_similarity(&similarity_matrix(&y)?)?;
    let logits = net.skd_logits(&y, Mode::Train)?;
    let probs = temperature_softmax(&logits, weights.tau)?;
    let soft_targets = match propagation {
        PropagationMode::ClosedForm => propagate_closed_form(&sim, &probs, weights.omega)?,
        PropagationMode::Iterative(t) => propagate_iterative(&sim, &probs, weights.omega, t)?,
    };
    let skd = kl_divergence(&soft_targets, &probs)?;
    let total = total_loss(&cv, &cm, &skd, weights)?;
    Ok(LossGraph {
        total,
        cv,
        cm,
        skd,
        soft_targets,
    })
}

/// One optimization step on a batch of `(dataset_index, image)` pairs:
/// sample both views, build the loss graph, backpropagate, update the online
/// parameters with SGD, then EMA-update the target.
pub fn pretrain_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch: &[(usize, &Image)],
    epoch: usize,
    cfg: &PretrainConfig,
) -> Result<StepLosses> {
    if batch.len() < 2 {
        return Err(Error::Contract(format!(
            "pretraining batch of {} images; need at least 2",
            batch.len()
        )));
    }
    let step = state.step;
    let with_step = |e: Error| match e {
        Error::Numeric { context } => Error::Numeric {
            context: format!("step {step}: {context}"),
        },
        other => other,
    };

    let sample = |slot: ViewSlot| -> Result<Vec<crate::augment::View>> {
        batch
            .par_iter()
            .map(|&(idx, img)| {
                let mut rng = derive_stream(cfg.seed, epoch as u64, idx as u64, slot as u64);
                sample_view(img, &cfg.augment, &mut rng, idx, slot)
            })
            .collect()
    };
    let first = views_to_tensor::<S>(&sample(ViewSlot::First)?)?;
    let second = views_to_tensor::<S>(&sample(ViewSlot::Second)?)?;

    let graph = pretrain_loss_graph(&mut state.networks, &first, &second, &cfg.weights, cfg.propagation)
        .map_err(with_step)?;

    let mut grads = backward(&graph.total).map_err(with_step)?;
    {
        let params = state.networks.online_parameters();
        grads.ensure_zeros(params.iter().map(|p| p.value()));
    }
    sgd_update(
        state.networks.online_parameters_mut(),
        &grads,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    state.networks.ema_update()?;

    let losses = StepLosses {
        total: graph.total.item().to_f64().unwrap_or(f64::NAN),
        cv: graph.cv.item().to_f64().unwrap_or(f64::NAN),
        cm: graph.cm.item().to_f64().unwrap_or(f64::NAN),
        skd: graph.skd.item().to_f64().unwrap_or(f64::NAN),
    };
    state.step += 1;
    state.loss_log.push(StepRecord {
        step: state.step,
        epoch,
        losses,
    });
    Ok(losses)
}

/// Run the full pretraining loop over the dataset. The caller persists the
/// loss log and checkpoint with [`write_loss_csv`] and [`save_checkpoint`].
pub fn pretrain<S: Scalar>(ds: &Dataset, cfg: &PretrainConfig) -> Result<TrainState<S>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Contract("pretraining on an empty dataset".into()));
    }
    let networks = init_networks(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, cfg.seed)?;
    let mut state = TrainState {
        networks,
        step: 0,
        loss_log: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        for batch_indices in batches(
            ds.len(),
            cfg.batch_size,
            cfg.seed,
            epoch as u64,
            BatchMode::Pretrain,
        )? {
            let batch: Vec<(usize, &Image)> =
                batch_indices.iter().map(|&i| (i, &ds.images[i])).collect();
            pretrain_step(&mut state, &batch, epoch, cfg)?;
        }
    }
    Ok(state)
}

/// Loss log as CSV with the fixed header `step,epoch,L,L_CV,L_CM,L_SKD`.
pub fn write_loss_csv(log: &[StepRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,epoch,L,L_CV,L_CM,L_SKD\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.epoch, r.losses.total, r.losses.cv, r.losses.cm, r.losses.skd
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Whether fine-tuning updates the encoder or freezes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    LinearProbe,
}

/// Supervised fine-tuning parameters.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stratified fraction of training labels to use, in (0, 1].
    pub label_fraction: f64,
    pub mode: FinetuneMode,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 64,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 0.0004,
            label_fraction: 1.0,
            mode: FinetuneMode::Full,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Contract(format!(
                "label fraction {} outside (0, 1]",
                self.label_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size 0".into()));
        }
        Ok(())
    }
}

/// Encoder plus a linear classification head. The head starts at zero, so an
/// untrained classifier predicts the uniform distribution exactly.
pub struct Classifier<S: Scalar> {
    pub encoder: Encoder<S>,
    pub head: crate::model::LinearHead<S>,
    pub class_count: usize,
    frozen_encoder: bool,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(encoder: Encoder<S>, class_count: usize, frozen_encoder: bool) -> Result<Self> {
        let head = crate::model::LinearHead::zeros("classifier", encoder.feature_dim(), class_count)?;
        Ok(Classifier {
            encoder,
            head,
            class_count,
            frozen_encoder,
        })
    }

    /// Class logits for a raw image batch.
    pub fn logits(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let enc_mode = if self.frozen_encoder { Mode::Eval } else { mode };
        let y = self.encoder.forward(x, enc_mode)?;
        self.head.forward(&y)
    }

    /// Per-sample class probabilities over the whole dataset (eval mode).
    pub fn predict_proba(&mut self, ds: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(ds.len());
        for chunk in batches(ds.len(), batch_size.max(1), 0, 0, BatchMode::Eval)? {
            // Deterministic evaluation order.
            let mut sorted = chunk;
            sorted.sort_unstable();
            let images: Vec<&Image> = sorted.iter().map(|&i| &ds.images[i]).collect();
            let x = images_to_tensor::<S>(&images)?;
            let probs = self.logits(&x, Mode::Eval)?.softmax_last_dim()?;
            for (pos, &i) in sorted.iter().enumerate() {
                let row = probs.values()[pos * self.class_count..(pos + 1) * self.class_count]
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect();
                out.push((i, row));
            }
        }
        out.sort_by_key(|&(i, _)| i);
        Ok(out.into_iter().map(|(_, p)| p).collect())
    }
}

/// Record of one fine-tuning epoch.
#[derive(Clone, Debug)]
pub struct FinetuneEpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub report: Option<crate::metrics::EvalReport>,
}

/// Fine-tune a classifier on a stratified label subsample with softmax
/// cross-entropy. When `test` is provided, evaluates after every epoch.
pub fn finetune<S: Scalar>(
    ds_train: &Dataset,
    encoder: Encoder<S>,
    cfg: &FinetuneConfig,
    test: Option<(&Dataset, &str)>,
) -> Result<(Classifier<S>, Vec<FinetuneEpochRecord>)> {
    cfg.validate()?;
    let labeled = stratified_subsample(ds_train, cfg.label_fraction, cfg.seed)?;
    let frozen = cfg.mode == FinetuneMode::LinearProbe;
    let mut clf = Classifier::new(encoder, ds_train.class_count(), frozen)?;
    if frozen {
        for p in clf.encoder.params_mut() {
            p.freeze()?;
        }
    }
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch_indices in batches(
            labeled.len(),
            cfg.batch_size,
            cfg.seed,
            epoch as u64,
            BatchMode::Eval,
        )? {
            let images: Vec<&Image> = batch_indices.iter().map(|&i| &labeled.images[i]).collect();
            let labels: Vec<usize> = batch_indices.iter().map(|&i| labeled.labels[i]).collect();
            let x = images_to_tensor::<S>(&images)?;
            let logits = clf.logits(&x, Mode::Train)?;
            let loss = cross_entropy(&logits, &labels)?;
            let mut grads = backward(&loss)?;
            {
                let mut params: Vec<&crate::tensor::Parameter<S>> = clf.head.params();
                if !frozen {
                    params.extend(clf.encoder.params());
                }
                grads.ensure_zeros(params.iter().map(|p| p.value()));
            }
            let mut params = clf.head.params_mut();
            if !frozen {
                params.extend(clf.encoder.params_mut());
            }
            sgd_update(params, &grads, cfg.lr, cfg.momentum, cfg.weight_decay)?;
            epoch_loss += loss.item().to_f64().unwrap_or(f64::NAN);
            steps += 1;
        }
        let report = match test {
            Some((test_ds, positive)) => {
                Some(crate::metrics::evaluate(&mut clf, test_ds, positive)?)
            }
            None => None,
        };
        records.push(FinetuneEpochRecord {
            epoch,
            mean_loss: epoch_loss / steps.max(1) as f64,
            report,
        });
    }
    Ok((clf, records))
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
// magic "SKDCKPT1" | u32-LE record count | records of
// { u32-LE name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//   rank x u64-LE dims, raw little-endian f32 values }.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SKDCKPT1";

type Record = (String, Vec<usize>, Vec<f32>);

/// Serialize named tensors into the checkpoint container.
pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, values) in records {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "record {name}: {} values for dims {shape:?}",
                values.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(0u8); // dtype f32
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read back a checkpoint container; malformed input yields a
/// [`Error::Format`] carrying the byte offset of the problem.
pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format {
                offset: *off as u64,
                detail: format!("truncated: wanted {n} bytes, {} remain", bytes.len() - *off),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };

    if take(&mut off, 8)? != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic; not a checkpoint file".into(),
        });
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_off = off;
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec()).map_err(|_| {
            Error::Format {
                offset: name_off as u64,
                detail: "record name is not UTF-8".into(),
            }
        })?;
        let dtype = take(&mut off, 1)?[0];
        if dtype != 0 {
            return Err(Error::Format {
                offset: (off - 1) as u64,
                detail: format!("record {name}: unknown dtype tag {dtype}"),
            });
        }
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut off, numel * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, shape, values));
    }
    if off != bytes.len() {
        return Err(Error::Format {
            offset: off as u64,
            detail: format!("{} trailing bytes after last record", bytes.len() - off),
        });
    }
    Ok(records)
}

/// Persist every parameter and running statistic of a network set.
pub fn save_checkpoint(net: &NetworkSet<f32>, path: &Path) -> Result<()> {
    save_records(path, &net.export_state())
}

/// Rebuild a network set from config and restore a checkpoint into it. Shape
/// mismatches from a different configuration surface as format errors.
pub fn load_checkpoint(
    path: &Path,
    enc: &EncoderConfig,
    head: &MlpHeadConfig,
    k: usize,
    ema_decay: f64,
) -> Result<NetworkSet<f32>> {
    let records = load_records(path)?;
    let mut net = init_networks::<f32>(enc, head, k, ema_decay, 0)?;
    net.import_state(records)?;
    Ok(net)
}

/// Persist a fine-tuned classifier (encoder state plus head).
pub fn save_classifier(clf: &Classifier<f32>, path: &Path) -> Result<()> {
    let mut records = clf.encoder.export_state("encoder");
    records.extend(clf.head.export_state());
    save_records(path, &records)
}

/// Restore a classifier saved by [`save_classifier`].
pub fn load_classifier(
    path: &Path,
    enc_cfg: &EncoderConfig,
    class_count: usize,
) -> Result<Classifier<f32>> {
    let records = load_records(path)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let encoder = Encoder::<f32>::init(enc_cfg, "encoder", true, &mut rng)?;
    let mut clf = Classifier::new(encoder, class_count, false)?;
    let mut enc_records = Vec::new();
    let mut head_records = Vec::new();
    for r in records {
        if r.0.starts_with("classifier.") {
            head_records.push(r);
        } else {
            enc_records.push(r);
        }
    }
    clf.encoder.import_state("encoder", enc_records)?;
    clf.head.import_state(head_records)?;
    Ok(clf)
}

/// Mean loss of the first and last epochs in a loss log.
pub fn first_last_epoch_means(log: &[StepRecord]) -> Option<(f64, f64)> {
    let first_epoch = log.first()?.epoch;
    let last_epoch = log.last()?.epoch;
    let mean_of = |e: usize| {
        let xs: Vec<f64> = log
            .iter()
            .filter(|r| r.epoch == e)
            .map(|r| r.losses.total)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    Some((mean_of(first_epoch), mean_of(last_epoch)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::model::Mode;

    fn tiny_cfg(seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: 2,
            batch_size: 8,
            seed,
            augment: AugmentationConfig {
                view_size: 16,
                ..AugmentationConfig::default()
            },
            encoder: EncoderConfig {
                input_size: 16,
                ..EncoderConfig::default()
            },
            ..PretrainConfig::default()
        }
    }

    fn tiny_data(n_per_class: usize, seed: u64) -> Dataset {
        synthesize(&SyntheticSpec {
            n_per_class,
            image_size: 16,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn repeated_steps_on_one_batch_reduce_the_loss() {
        for seed in 0..3u64 {
            let ds = tiny_data(2, seed);
            let cfg = tiny_cfg(seed);
            let mut state = TrainState::<f32> {
                networks: init_networks(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, cfg.seed)
                    .unwrap(),
                step: 0,
                loss_log: Vec::new(),
            };
            let batch: Vec<(usize, &Image)> =
                ds.images.iter().enumerate().take(8).collect();
            let mut first = f64::NAN;
            let mut last = f64::NAN;
            for step in 0..200 {
                // A fixed batch: reuse epoch 0 so the views are frozen too.
                let losses = pretrain_step(&mut state, &batch, 0, &cfg).unwrap();
                if step == 0 {
                    first = losses.total;
                }
                last = losses.total;
            }
            assert!(
                last < first,
                "seed {seed}: loss went {first} -> {last} over 200 steps"
            );
        }
    }

    #[test]
    fn zero_epochs_keeps_the_initialization() {
        let ds = tiny_data(3, 0);
        let cfg = PretrainConfig {
            epochs: 0,
            ..tiny_cfg(7)
        };
        let state = pretrain::<f32>(&ds, &cfg).unwrap();
        let fresh =
            init_networks::<f32>(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, cfg.seed).unwrap();
        for (a, b) in state
            .networks
            .online_parameters()
            .iter()
            .zip(fresh.online_parameters())
        {
            assert_eq!(a.value().values(), b.value().values(), "{}", a.name());
        }
        assert!(state.loss_log.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic_per_seed() {
        let ds = tiny_data(3, 1);
        let cfg = tiny_cfg(11);
        let a = pretrain::<f32>(&ds, &cfg).unwrap();
        let b = pretrain::<f32>(&ds, &cfg).unwrap();
        assert_eq!(a.loss_log.len(), b.loss_log.len());
        for (x, y) in a.loss_log.iter().zip(&b.loss_log) {
            assert_eq!(x.losses.total, y.losses.total);
            assert_eq!(x.losses.skd, y.losses.skd);
        }
    }

    #[test]
    fn sigma_one_freezes_the_target_through_steps() {
        let ds = tiny_data(2, 2);
        let mut cfg = tiny_cfg(3);
        cfg.ema_decay = 1.0;
        let mut state = TrainState::<f32> {
            networks: init_networks(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, cfg.seed)
                .unwrap(),
            step: 0,
            loss_log: Vec::new(),
        };
        let before: Vec<Vec<f32>> = state
            .networks
            .target_parameters()
            .iter()
            .map(|p| p.value().values().to_vec())
            .collect();
        let batch: Vec<(usize, &Image)> = ds.images.iter().enumerate().take(8).collect();
        pretrain_step(&mut state, &batch, 0, &cfg).unwrap();
        for (p, old) in state.networks.target_parameters().iter().zip(&before) {
            assert_eq!(p.value().values(), old.as_slice(), "{} moved", p.name());
        }
    }

    #[test]
    fn untrained_head_starts_at_uniform_cross_entropy() {
        let ds = tiny_data(4, 5);
        let cfg = tiny_cfg(0);
        let net =
            init_networks::<f32>(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, 0).unwrap();
        let mut clf = Classifier::new(net.into_online_encoder(), 4, false).unwrap();
        let images: Vec<&Image> = ds.images.iter().collect();
        let x = images_to_tensor::<f32>(&images).unwrap();
        let logits = clf.logits(&x, Mode::Eval).unwrap();
        let ce = cross_entropy(&logits, &ds.labels).unwrap().item() as f64;
        assert!((ce - 4.0f64.ln()).abs() < 0.05, "initial ce {ce}");
    }

    #[test]
    fn separable_data_reaches_high_train_accuracy() {
        // Four constant brightness bands are linearly separable from pooled
        // conv features.
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4usize {
            for i in 0..20 {
                let v = 0.15 + 0.22 * c as f32 + 0.002 * (i % 5) as f32;
                images.push(Image::constant(16, 16, v));
                labels.push(c);
            }
        }
        let ds = Dataset {
            images,
            labels,
            class_names: (0..4).map(|c| format!("c{c}")).collect(),
        };
        // Small batches so the running statistics converge within the
        // 10-epoch budget.
        let cfg = FinetuneConfig {
            epochs: 10,
            lr: 0.1,
            batch_size: 16,
            ..FinetuneConfig::default()
        };
        let enc_cfg = EncoderConfig {
            input_size: 16,
            ..EncoderConfig::default()
        };
        let net = init_networks::<f32>(&enc_cfg, &MlpHeadConfig::default(), 4, 0.996, 0).unwrap();
        let (mut clf, records) = finetune(&ds, net.into_online_encoder(), &cfg, None).unwrap();
        assert_eq!(records.len(), 10);
        let probs = clf.predict_proba(&ds, 32).unwrap();
        let correct = probs
            .iter()
            .zip(&ds.labels)
            .filter(|(row, &label)| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0
                    == label
            })
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg(0);
        let net =
            init_networks::<f32>(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, 42).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let restored =
            load_checkpoint(&path, &cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay).unwrap();
        let a = net.export_state();
        let b = restored.export_state();
        assert_eq!(a.len(), b.len());
        for ((na, sa, va), (nb, sb, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            assert_eq!(va, vb, "values differ for {na}");
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg(0);
        let net = init_networks::<f32>(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path, &cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            Err(other) => panic!("expected format error, got {other:?}"),
            Ok(_) => panic!("corrupted checkpoint loaded"),
        }
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg(0);
        let net = init_networks::<f32>(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_records(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_config_names_the_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg(0);
        let net = init_networks::<f32>(&cfg.encoder, &cfg.head, cfg.k, cfg.ema_decay, 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let wider = EncoderConfig {
            conv_blocks: vec![(16, 1), (32, 2), (64, 2), (256, 2)],
            input_size: 16,
        };
        match load_checkpoint(&path, &wider, &cfg.head, cfg.k, cfg.ema_decay) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("dims"), "detail: {detail}")
            }
            Err(other) => panic!("expected format error, got {other:?}"),
            Ok(_) => panic!("mismatched checkpoint loaded"),
        }
    }

    #[test]
    fn classifier_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.ckpt");
        let enc_cfg = EncoderConfig {
            input_size: 16,
            ..EncoderConfig::default()
        };
        let ds = tiny_data(3, 9);
        let net = init_networks::<f32>(&enc_cfg, &MlpHeadConfig::default(), 4, 0.996, 5).unwrap();
        let (mut clf, _) = finetune(
            &ds,
            net.into_online_encoder(),
            &FinetuneConfig {
                epochs: 1,
                ..FinetuneConfig::default()
            },
            None,
        )
        .unwrap();
        save_classifier(&clf, &path).unwrap();
        let mut restored = load_classifier(&path, &enc_cfg, 4).unwrap();
        let a = clf.predict_proba(&ds, 16).unwrap();
        let b = restored.predict_proba(&ds, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_csv_has_the_documented_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let log = vec![StepRecord {
            step: 1,
            epoch: 0,
            losses: StepLosses {
                total: 1.5,
                cv: 0.5,
                cm: 0.5,
                skd: 0.03125,
            },
        }];
        write_loss_csv(&log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,epoch,L,L_CV,L_CM,L_SKD\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
