//! The three-network architecture: an online branch (encoder, projector,
//! predictor), an EMA target branch (encoder, projector), and a distillation
//! head that shares the online encoder's parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::View;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tensor::{batch_norm_eval, batch_norm_train, scalar_from, Parameter, Scalar, Tensor};

/// Batch-norm / statistics behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics; layers that track running statistics
    /// update them.
    Train,
    /// Normalize with the stored running statistics; rows are independent.
    Eval,
}

/// Convolutional encoder layout: 3x3 conv + batch norm + ReLU per block,
/// followed by global average pooling.
#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// (out_channels, stride) per block.
    pub conv_blocks: Vec<(usize, usize)>,
    /// Expected input side length in pixels.
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            conv_blocks: vec![(16, 1), (32, 2), (64, 2), (128, 2)],
            input_size: 112,
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.conv_blocks.last().map(|&(c, _)| c).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::Contract("encoder needs at least one block".into()));
        }
        if self.conv_blocks.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(Error::Contract("encoder channels and strides must be positive".into()));
        }
        if self.input_size < 8 {
            return Err(Error::Contract(format!("input size {} < 8", self.input_size)));
        }
        Ok(())
    }
}

/// MLP head layout: linear -> batch norm -> ReLU -> linear.
#[derive(Clone, Copy, Debug)]
pub struct MlpHeadConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for MlpHeadConfig {
    fn default() -> Self {
        MlpHeadConfig {
            hidden_dim: 256,
            output_dim: 64,
        }
    }
}

impl MlpHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Contract("mlp head dims must be positive".into()));
        }
        Ok(())
    }
}

const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;

fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, count: usize, bound: f64) -> Vec<S> {
    (0..count)
        .map(|_| scalar_from::<S>(rng.gen_range(-bound..bound)))
        .collect()
}

pub(crate) struct Conv2d<S: Scalar> {
    weight: Parameter<S>,
    stride: usize,
}

impl<S: Scalar> Conv2d<S> {
    fn init(
        name: String,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        let values = uniform_init::<S>(rng, out_ch * in_ch * 9, bound);
        let shape = [out_ch, in_ch, 3, 3];
        let weight = if trainable {
            Parameter::trainable(name, values, &shape)?
        } else {
            Parameter::frozen(name, values, &shape)?
        };
        Ok(Conv2d { weight, stride })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(self.weight.value(), self.stride, 1)
    }
}

pub(crate) struct BatchNorm<S: Scalar> {
    gamma: Parameter<S>,
    beta: Parameter<S>,
    running_mean: Vec<S>,
    running_var: Vec<S>,
    /// EMA-updated target layers receive their statistics from the online
    /// branch instead of tracking their own.
    track_stats: bool,
}

impl<S: Scalar> BatchNorm<S> {
    fn init(prefix: &str, channels: usize, trainable: bool) -> Result<Self> {
        let gamma_vals = vec![S::one(); channels];
        let beta_vals = vec![S::zero(); channels];
        let (gamma, beta) = if trainable {
            (
                Parameter::trainable(format!("{prefix}.gamma"), gamma_vals, &[channels])?,
                Parameter::trainable(format!("{prefix}.beta"), beta_vals, &[channels])?,
            )
        } else {
            (
                Parameter::frozen(format!("{prefix}.gamma"), gamma_vals, &[channels])?,
                Parameter::frozen(format!("{prefix}.beta"), beta_vals, &[channels])?,
            )
        };
        Ok(BatchNorm {
            gamma,
            beta,
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            track_stats: trainable,
        })
    }

    fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        match mode {
            Mode::Train => {
                let (out, mean, var) =
                    batch_norm_train(x, self.gamma.value(), self.beta.value(), BN_EPS)?;
                if self.track_stats {
                    let keep = scalar_from::<S>(BN_MOMENTUM);
                    let take = scalar_from::<S>(1.0 - BN_MOMENTUM);
                    for (r, &b) in self.running_mean.iter_mut().zip(&mean) {
                        *r = keep * *r + take * b;
                    }
                    for (r, &b) in self.running_var.iter_mut().zip(&var) {
                        *r = keep * *r + take * b;
                    }
                }
                Ok(out)
            }
            Mode::Eval => batch_norm_eval(
                x,
                self.gamma.value(),
                self.beta.value(),
                &self.running_mean,
                &self.running_var,
                BN_EPS,
            ),
        }
    }
}

pub(crate) struct Linear<S: Scalar> {
    weight: Parameter<S>,
    bias: Parameter<S>,
}

impl<S: Scalar> Linear<S> {
    fn init(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = uniform_init::<S>(rng, in_dim * out_dim, bound);
        let b = uniform_init::<S>(rng, out_dim, bound);
        let (weight, bias) = if trainable {
            (
                Parameter::trainable(format!("{prefix}.weight"), w, &[in_dim, out_dim])?,
                Parameter::trainable(format!("{prefix}.bias"), b, &[out_dim])?,
            )
        } else {
            (
                Parameter::frozen(format!("{prefix}.weight"), w, &[in_dim, out_dim])?,
                Parameter::frozen(format!("{prefix}.bias"), b, &[out_dim])?,
            )
        };
        Ok(Linear { weight, bias })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(self.weight.value())?.add(self.bias.value())
    }
}

/// Stack of conv blocks ending in global average pooling.
pub struct Encoder<S: Scalar> {
    blocks: Vec<(Conv2d<S>, BatchNorm<S>)>,
}

impl<S: Scalar> Encoder<S> {
    pub(crate) fn init(
        cfg: &EncoderConfig,
        prefix: &str,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.conv_blocks.len());
        let mut in_ch = 1;
        for (i, &(out_ch, stride)) in cfg.conv_blocks.iter().enumerate() {
            let conv = Conv2d::init(
                format!("{prefix}.block{i}.conv.weight"),
                in_ch,
                out_ch,
                stride,
                trainable,
                rng,
            )?;
            let bn = BatchNorm::init(&format!("{prefix}.block{i}.bn"), out_ch, trainable)?;
            blocks.push((conv, bn));
            in_ch = out_ch;
        }
        Ok(Encoder { blocks })
    }

    /// `[N,1,H,W] -> [N, feature_dim]`.
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for (conv, bn) in &mut self.blocks {
            h = bn.forward(&conv.forward(&h)?, mode)?.relu()?;
        }
        h.global_avg_pool()
    }

    pub(crate) fn params(&self) -> Vec<&Parameter<S>> {
        self.blocks
            .iter()
            .flat_map(|(c, b)| [&c.weight, &b.gamma, &b.beta])
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        self.blocks
            .iter_mut()
            .flat_map(|(c, b)| [&mut c.weight, &mut b.gamma, &mut b.beta])
            .collect()
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        self.blocks.iter_mut().map(|(_, b)| b).collect()
    }

    /// Channel count of the pooled output features.
    pub fn feature_dim(&self) -> usize {
        self.blocks
            .last()
            .map(|(_, b)| b.running_mean.len())
            .unwrap_or(0)
    }

    /// Structural state dump under `prefix`, independent of the names the
    /// encoder was constructed with.
    pub fn export_state(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            out.push((
                format!("{prefix}.block{i}.conv.weight"),
                conv.weight.shape().to_vec(),
                conv.weight.value().values().to_vec(),
            ));
            out.push((
                format!("{prefix}.block{i}.bn.gamma"),
                bn.gamma.shape().to_vec(),
                bn.gamma.value().values().to_vec(),
            ));
            out.push((
                format!("{prefix}.block{i}.bn.beta"),
                bn.beta.shape().to_vec(),
                bn.beta.value().values().to_vec(),
            ));
            out.push((
                format!("{prefix}.block{i}.bn.running_mean"),
                vec![bn.running_mean.len()],
                bn.running_mean.clone(),
            ));
            out.push((
                format!("{prefix}.block{i}.bn.running_var"),
                vec![bn.running_var.len()],
                bn.running_var.clone(),
            ));
        }
        out
    }

    /// Inverse of [`Encoder::export_state`]; every record must match an
    /// existing name and shape.
    pub fn import_state(
        &mut self,
        prefix: &str,
        records: Vec<(String, Vec<usize>, Vec<S>)>,
    ) -> Result<()> {
        use std::collections::HashMap;
        let mut map: HashMap<String, (Vec<usize>, Vec<S>)> =
            records.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        let expected = self.export_state(prefix);
        if map.len() != expected.len() {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "encoder state has {} records, expected {}",
                    map.len(),
                    expected.len()
                ),
            });
        }
        for (name, shape, _) in &expected {
            match map.get(name) {
                None => {
                    return Err(Error::Format {
                        offset: 0,
                        detail: format!("missing record {name}"),
                    })
                }
                Some((got, _)) if got != shape => {
                    return Err(Error::Format {
                        offset: 0,
                        detail: format!("record {name} has dims {got:?}, expected {shape:?}"),
                    })
                }
                _ => {}
            }
        }
        for (i, (conv, bn)) in self.blocks.iter_mut().enumerate() {
            let grab = |map: &mut HashMap<String, (Vec<usize>, Vec<S>)>, key: String| {
                map.remove(&key).expect("validated above").1
            };
            conv.weight
                .set_values(grab(&mut map, format!("{prefix}.block{i}.conv.weight")))?;
            bn.gamma
                .set_values(grab(&mut map, format!("{prefix}.block{i}.bn.gamma")))?;
            bn.beta
                .set_values(grab(&mut map, format!("{prefix}.block{i}.bn.beta")))?;
            bn.running_mean = grab(&mut map, format!("{prefix}.block{i}.bn.running_mean"));
            bn.running_var = grab(&mut map, format!("{prefix}.block{i}.bn.running_var"));
        }
        Ok(())
    }
}

/// Zero-initialized linear classification head (weights and bias start at
/// zero, so the untrained classifier outputs the uniform distribution).
pub struct LinearHead<S: Scalar> {
    weight: Parameter<S>,
    bias: Parameter<S>,
}

impl<S: Scalar> LinearHead<S> {
    pub fn zeros(prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(LinearHead {
            weight: Parameter::trainable(
                format!("{prefix}.weight"),
                vec![S::zero(); in_dim * out_dim],
                &[in_dim, out_dim],
            )?,
            bias: Parameter::trainable(
                format!("{prefix}.bias"),
                vec![S::zero(); out_dim],
                &[out_dim],
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(self.weight.value())?.add(self.bias.value())
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        self.params()
            .into_iter()
            .map(|p| {
                (
                    p.name().to_string(),
                    p.shape().to_vec(),
                    p.value().values().to_vec(),
                )
            })
            .collect()
    }

    pub fn import_state(&mut self, records: Vec<(String, Vec<usize>, Vec<S>)>) -> Result<()> {
        use std::collections::HashMap;
        let mut map: HashMap<String, (Vec<usize>, Vec<S>)> =
            records.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        for p in [&mut self.weight, &mut self.bias] {
            let (shape, values) = map.remove(p.name()).ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("missing record {}", p.name()),
            })?;
            if shape != p.shape() {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!(
                        "record {} has dims {shape:?}, expected {:?}",
                        p.name(),
                        p.shape()
                    ),
                });
            }
            p.set_values(values)?;
        }
        if !map.is_empty() {
            return Err(Error::Format {
                offset: 0,
                detail: "unexpected extra classifier records".into(),
            });
        }
        Ok(())
    }
}

/// Two-layer MLP head: linear -> batch norm -> ReLU -> linear.
pub struct Mlp<S: Scalar> {
    fc1: Linear<S>,
    bn: BatchNorm<S>,
    fc2: Linear<S>,
}

impl<S: Scalar> Mlp<S> {
    fn init(
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::init(&format!("{prefix}.fc1"), in_dim, hidden, trainable, rng)?,
            bn: BatchNorm::init(&format!("{prefix}.bn"), hidden, trainable)?,
            fc2: Linear::init(&format!("{prefix}.fc2"), hidden, out_dim, trainable, rng)?,
        })
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let h = self.bn.forward(&self.fc1.forward(x)?, mode)?.relu()?;
        self.fc2.forward(&h)
    }

    pub(crate) fn params(&self) -> Vec<&Parameter<S>> {
        vec![
            &self.fc1.weight,
            &self.fc1.bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        vec![&mut self.bn]
    }
}

/// The full three-network bundle. The distillation head reads features from
/// the same encoder object as the online projector: the weights are shared,
/// not copied.
pub struct NetworkSet<S: Scalar> {
    pub enc_cfg: EncoderConfig,
    pub head_cfg: MlpHeadConfig,
    /// Distillation logit count.
    pub k: usize,
    /// EMA decay sigma of the target update.
    pub ema_decay: f64,
    online_encoder: Encoder<S>,
    online_projector: Mlp<S>,
    online_predictor: Mlp<S>,
    skd_head: Mlp<S>,
    target_encoder: Encoder<S>,
    target_projector: Mlp<S>,
}

/// Build a network set: online weights are fan-in-scaled uniform draws from
/// the seed, the target starts as an exact copy of the online encoder and
/// projector, and momentum buffers are zero.
pub fn init_networks<S: Scalar>(
    enc: &EncoderConfig,
    head: &MlpHeadConfig,
    k: usize,
    ema_decay: f64,
    seed: u64,
) -> Result<NetworkSet<S>> {
    if k < 2 {
        return Err(Error::Contract(format!("logit count {k} < 2")));
    }
    if !(0.0..=1.0).contains(&ema_decay) {
        return Err(Error::Contract(format!("ema decay {ema_decay} outside [0, 1]")));
    }
    enc.validate()?;
    head.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = enc.feature_dim();
    let online_encoder = Encoder::init(enc, "online.encoder", true, &mut rng)?;
    let online_projector = Mlp::init(
        "online.projector",
        d,
        head.hidden_dim,
        head.output_dim,
        true,
        &mut rng,
    )?;
    let online_predictor = Mlp::init(
        "online.predictor",
        head.output_dim,
        head.hidden_dim,
        head.output_dim,
        true,
        &mut rng,
    )?;
    let skd_head = Mlp::init("skd_head", d, head.hidden_dim, k, true, &mut rng)?;

    let mut net = NetworkSet {
        enc_cfg: enc.clone(),
        head_cfg: *head,
        k,
        ema_decay,
        target_encoder: Encoder::init(enc, "target.encoder", false, &mut rng)?,
        target_projector: Mlp::init(
            "target.projector",
            d,
            head.hidden_dim,
            head.output_dim,
            false,
            &mut rng,
        )?,
        online_encoder,
        online_projector,
        online_predictor,
        skd_head,
    };
    // Exact copy, not a fresh draw.
    copy_online_to_target(&mut net)?;
    Ok(net)
}

fn copy_online_to_target<S: Scalar>(net: &mut NetworkSet<S>) -> Result<()> {
    let sources: Vec<Vec<S>> = net
        .online_encoder
        .params()
        .into_iter()
        .chain(net.online_projector.params())
        .map(|p| p.value().values().to_vec())
        .collect();
    let targets: Vec<&mut Parameter<S>> = net
        .target_encoder
        .params_mut()
        .into_iter()
        .chain(net.target_projector.params_mut())
        .collect();
    for (dst, src) in targets.into_iter().zip(sources) {
        dst.set_values(src)?;
    }
    let src_stats: Vec<(Vec<S>, Vec<S>)> = net
        .online_encoder
        .blocks
        .iter()
        .map(|(_, b)| (b.running_mean.clone(), b.running_var.clone()))
        .chain(std::iter::once((
            net.online_projector.bn.running_mean.clone(),
            net.online_projector.bn.running_var.clone(),
        )))
        .collect();
    let dst_bns: Vec<&mut BatchNorm<S>> = net
        .target_encoder
        .bns_mut()
        .into_iter()
        .chain(net.target_projector.bns_mut())
        .collect();
    for (bn, (m, v)) in dst_bns.into_iter().zip(src_stats) {
        bn.running_mean = m;
        bn.running_var = v;
    }
    Ok(())
}

impl<S: Scalar> NetworkSet<S> {
    /// Encoder features of the online branch; shared by the projector path
    /// and the distillation head.
    pub fn encode_online(&mut self, v: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        self.online_encoder.forward(v, mode)
    }

    /// Projection and prediction from precomputed online features.
    pub fn project_predict_online(
        &mut self,
        features: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let z = self.online_projector.forward(features, mode)?;
        let q = self.online_predictor.forward(&z, mode)?;
        Ok((z, q))
    }

    /// Full online pass: features, projections, predictions.
    pub fn forward_online(
        &mut self,
        v: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        let y = self.encode_online(v, mode)?;
        let (z, q) = self.project_predict_online(&y, mode)?;
        Ok((y, z, q))
    }

    /// Distillation logits from precomputed online features; gradients flow
    /// into both the head and the shared encoder.
    pub fn skd_logits(&mut self, features: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        self.skd_head.forward(features, mode)
    }

    /// Full distillation pass from raw views.
    pub fn forward_skd(&mut self, v: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let y = self.encode_online(v, mode)?;
        self.skd_logits(&y, mode)
    }

    /// Target projection of a view batch; always detached. `Mode::Train`
    /// normalizes with batch statistics (the target never tracks its own
    /// running statistics; it receives them through the EMA update).
    pub fn forward_target(&mut self, v: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let y = self.target_encoder.forward(v, mode)?;
        let z = self.target_projector.forward(&y, mode)?;
        Ok(z.detach())
    }

    /// All gradient-trained parameters: online encoder, projector, predictor,
    /// and the distillation head.
    pub fn online_parameters(&self) -> Vec<&Parameter<S>> {
        self.online_encoder
            .params()
            .into_iter()
            .chain(self.online_projector.params())
            .chain(self.online_predictor.params())
            .chain(self.skd_head.params())
            .collect()
    }

    pub fn online_parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = self.online_encoder.params_mut();
        v.extend(self.online_projector.params_mut());
        v.extend(self.online_predictor.params_mut());
        v.extend(self.skd_head.params_mut());
        v
    }

    pub fn target_parameters(&self) -> Vec<&Parameter<S>> {
        self.target_encoder
            .params()
            .into_iter()
            .chain(self.target_projector.params())
            .collect()
    }

    /// Detach the online encoder for downstream fine-tuning.
    pub fn into_online_encoder(self) -> Encoder<S> {
        self.online_encoder
    }

    pub fn online_encoder_mut(&mut self) -> &mut Encoder<S> {
        &mut self.online_encoder
    }

    /// EMA step: every target parameter and running statistic becomes
    /// `sigma * target + (1 - sigma) * online`. Creates no gradient edges.
    pub fn ema_update(&mut self) -> Result<()> {
        let sigma = scalar_from::<S>(self.ema_decay);
        let take = scalar_from::<S>(1.0 - self.ema_decay);
        let online_vals: Vec<(String, Vec<S>)> = self
            .online_encoder
            .params()
            .into_iter()
            .chain(self.online_projector.params())
            .map(|p| (p.name().to_string(), p.value().values().to_vec()))
            .collect();
        let targets: Vec<&mut Parameter<S>> = self
            .target_encoder
            .params_mut()
            .into_iter()
            .chain(self.target_projector.params_mut())
            .collect();
        if online_vals.len() != targets.len() {
            return Err(Error::Contract("online/target parameter count mismatch".into()));
        }
        for (dst, (name, src)) in targets.into_iter().zip(online_vals) {
            let online_suffix = name.strip_prefix("online.").unwrap_or(&name);
            let target_suffix = dst.name().strip_prefix("target.").unwrap_or(dst.name());
            if online_suffix != target_suffix {
                return Err(Error::Contract(format!(
                    "parameter name mismatch: online {name} vs target {}",
                    dst.name()
                )));
            }
            let blended: Vec<S> = dst
                .value()
                .values()
                .iter()
                .zip(&src)
                .map(|(&t, &o)| sigma * t + take * o)
                .collect();
            dst.set_values(blended)?;
        }

        let online_stats: Vec<(Vec<S>, Vec<S>)> = self
            .online_encoder
            .blocks
            .iter()
            .map(|(_, b)| (b.running_mean.clone(), b.running_var.clone()))
            .chain(std::iter::once((
                self.online_projector.bn.running_mean.clone(),
                self.online_projector.bn.running_var.clone(),
            )))
            .collect();
        let target_bns: Vec<&mut BatchNorm<S>> = self
            .target_encoder
            .bns_mut()
            .into_iter()
            .chain(self.target_projector.bns_mut())
            .collect();
        for (bn, (m, v)) in target_bns.into_iter().zip(online_stats) {
            for (t, &o) in bn.running_mean.iter_mut().zip(&m) {
                *t = sigma * *t + take * o;
            }
            for (t, &o) in bn.running_var.iter_mut().zip(&v) {
                *t = sigma * *t + take * o;
            }
        }
        Ok(())
    }

    /// Every named value in the set: parameters plus running statistics.
    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        for p in self.online_parameters().into_iter().chain(self.target_parameters()) {
            out.push((
                p.name().to_string(),
                p.shape().to_vec(),
                p.value().values().to_vec(),
            ));
        }
        let stats = [
            ("online.encoder", &self.online_encoder),
            ("target.encoder", &self.target_encoder),
        ];
        for (prefix, enc) in stats {
            for (i, (_, bn)) in enc.blocks.iter().enumerate() {
                out.push((
                    format!("{prefix}.block{i}.bn.running_mean"),
                    vec![bn.running_mean.len()],
                    bn.running_mean.clone(),
                ));
                out.push((
                    format!("{prefix}.block{i}.bn.running_var"),
                    vec![bn.running_var.len()],
                    bn.running_var.clone(),
                ));
            }
        }
        for (prefix, mlp) in [
            ("online.projector", &self.online_projector),
            ("online.predictor", &self.online_predictor),
            ("skd_head", &self.skd_head),
            ("target.projector", &self.target_projector),
        ] {
            out.push((
                format!("{prefix}.bn.running_mean"),
                vec![mlp.bn.running_mean.len()],
                mlp.bn.running_mean.clone(),
            ));
            out.push((
                format!("{prefix}.bn.running_var"),
                vec![mlp.bn.running_var.len()],
                mlp.bn.running_var.clone(),
            ));
        }
        out
    }

    /// Load named values exported by [`NetworkSet::export_state`]. Every
    /// entry must match an existing name and shape.
    pub fn import_state(
        &mut self,
        entries: impl IntoIterator<Item = (String, Vec<usize>, Vec<S>)>,
    ) -> Result<()> {
        use std::collections::HashMap;
        let mut map: HashMap<String, (Vec<usize>, Vec<S>)> = entries
            .into_iter()
            .map(|(n, s, v)| (n, (s, v)))
            .collect();

        let expected: Vec<(String, Vec<usize>)> = self
            .export_state()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for (name, shape) in &expected {
            let (got_shape, _) = map.get(name).ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("missing record {name}"),
            })?;
            if got_shape != shape {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("record {name} has dims {got_shape:?}, expected {shape:?}"),
                });
            }
        }
        if map.len() != expected.len() {
            let known: std::collections::HashSet<&String> =
                expected.iter().map(|(n, _)| n).collect();
            let extra = map
                .keys()
                .find(|k| !known.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Format {
                offset: 0,
                detail: format!("unexpected record {extra}"),
            });
        }

        for p in self.online_parameters_mut() {
            let (_, values) = map.remove(p.name()).expect("checked above");
            p.set_values(values)?;
        }
        let mut target_params: Vec<&mut Parameter<S>> = self.target_encoder.params_mut();
        target_params.extend(self.target_projector.params_mut());
        for p in target_params {
            let (_, values) = map.remove(p.name()).expect("checked above");
            p.set_values(values)?;
        }
        let mut stat_sinks: Vec<(String, &mut BatchNorm<S>)> = Vec::new();
        for (prefix, enc) in [
            ("online.encoder", &mut self.online_encoder),
            ("target.encoder", &mut self.target_encoder),
        ] {
            for (i, (_, bn)) in enc.blocks.iter_mut().enumerate() {
                stat_sinks.push((format!("{prefix}.block{i}.bn"), bn));
            }
        }
        for (prefix, mlp) in [
            ("online.projector", &mut self.online_projector),
            ("online.predictor", &mut self.online_predictor),
            ("skd_head", &mut self.skd_head),
            ("target.projector", &mut self.target_projector),
        ] {
            stat_sinks.push((format!("{prefix}.bn"), &mut mlp.bn));
        }
        for (prefix, bn) in stat_sinks {
            let (_, mean) = map.remove(&format!("{prefix}.running_mean")).expect("checked");
            let (_, var) = map.remove(&format!("{prefix}.running_var")).expect("checked");
            bn.running_mean = mean;
            bn.running_var = var;
        }
        Ok(())
    }
}

/// Stack views into an `[N, 1, s, s]` input tensor.
pub fn views_to_tensor<S: Scalar>(views: &[View]) -> Result<Tensor<S>> {
    if views.is_empty() {
        return Err(Error::Contract("empty view batch".into()));
    }
    let s = views[0].size;
    let mut values = Vec::with_capacity(views.len() * s * s);
    for v in views {
        if v.size != s {
            return Err(Error::Contract("mixed view sizes in one batch".into()));
        }
        values.extend(v.pixels.iter().map(|&p| scalar_from::<S>(p as f64)));
    }
    Tensor::new(values, &[views.len(), 1, s, s])
}

/// Stack raw images into an `[N, 1, H, W]` input tensor.
pub fn images_to_tensor<S: Scalar>(images: &[&Image]) -> Result<Tensor<S>> {
    if images.is_empty() {
        return Err(Error::Contract("empty image batch".into()));
    }
    let (h, w) = (images[0].height, images[0].width);
    let mut values = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Contract("mixed image sizes in one batch".into()));
        }
        values.extend(img.pixels.iter().map(|&p| scalar_from::<S>(p as f64)));
    }
    Tensor::new(values, &[images.len(), 1, h, w])
}
