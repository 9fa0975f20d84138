//! Primary network Θ (backbone + class head) with the auxiliary residual
//! block Λ (refinement map + pretext head).
//!
//! Λ reads the backbone's last feature map `f`. Its residual branch
//! `t = conv2(relu(conv1(f)))` is the refinement map: the primary head sees
//! `pool(f + t)`, the pretext head sees `pool(relu(f + t))`. With isolation
//! on, `t` is a constant for the primary loss and `f` is a constant for the
//! auxiliary loss, so neither loss reaches the other group's parameters.

mod arch;
pub mod checkpoint;

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv2d, Linear};
use crate::params::{Grads, Group, ParamSpec, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use arch::{Backbone, BackboneTrace};

/// Per-channel input normalization applied when images are batched.
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    DeskCnn,
    Resnet18,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk_cnn" => Ok(Profile::DeskCnn),
            "resnet18" => Ok(Profile::Resnet18),
            _ => Err(Error::Config(format!("unknown backbone profile `{s}`"))),
        }
    }
}

pub const DESK_CHANNELS: [usize; 4] = [16, 32, 64, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub profile: Profile,
    pub num_classes: usize,
    pub num_pretext: usize,
    pub isolation: bool,
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Stage widths for `desk_cnn`; defaults to [`DESK_CHANNELS`].
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub zero_init_refinement: bool,
    pub seed: u64,
    /// Externally supplied Θ weights.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

fn default_in_channels() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn desk(num_classes: usize, num_pretext: usize, input_size: usize, seed: u64) -> Self {
        ModelConfig {
            profile: Profile::DeskCnn,
            num_classes,
            num_pretext,
            isolation: true,
            input_size,
            in_channels: 3,
            channels: None,
            zero_init_refinement: true,
            seed,
            pretrained: None,
        }
    }
}

/// Training batch: inputs `N×C×H×W` with one label per item.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub primary_logits: Tensor<T>,
    pub pretext_logits: Option<Tensor<T>>,
    pub features_theta: Tensor<T>,
    pub features_lambda: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct AuxBlock {
    conv1: Conv2d,
    /// Final refinement convolution; its output is summed into the primary features.
    conv2: Conv2d,
    head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeosModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    aux: AuxBlock,
    primary_head: Linear,
    feature_shape: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSnapshot<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<T>>,
}

/// Parameter counts for the two ownership groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub theta: usize,
    pub lambda: usize,
    pub theta_names: Vec<String>,
    pub lambda_names: Vec<String>,
}

pub(crate) fn uniform<T: Scalar>(rng: &mut rng::Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect()
}

pub(crate) fn param_spec(name: &str, shape: &[usize], group: Group, head: bool) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        shape: shape.to_vec(),
        group,
        head,
        trainable: true,
    }
}

impl<T: Scalar> GeosModel<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        if config.num_classes == 0 || config.num_pretext == 0 {
            return Err(Error::Config("class and pretext counts must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut theta_rng = rng::rng(rng::derive_seed(config.seed, "theta-init"));
        let mut lambda_rng = rng::rng(rng::derive_seed(config.seed, "lambda-init"));

        let backbone = match config.profile {
            Profile::DeskCnn => {
                let widths = config.channels.clone().unwrap_or_else(|| DESK_CHANNELS.to_vec());
                if widths.is_empty() {
                    return Err(Error::Config("desk_cnn needs at least one stage".into()));
                }
                Backbone::desk(&mut params, &mut theta_rng, config.in_channels, &widths)
            }
            Profile::Resnet18 => {
                if config.channels.is_some() {
                    return Err(Error::Config("resnet18 has fixed stage widths".into()));
                }
                Backbone::resnet18(&mut params, &mut theta_rng, config.in_channels)
            }
        };
        let (cf, hf, wf) = backbone.output_shape(config.input_size, config.input_size);
        if hf == 0 || wf == 0 {
            return Err(Error::Config(format!("input size {} is too small", config.input_size)));
        }

        let primary_head = {
            let bound = 1.0 / (cf as f64).sqrt();
            let w = params.register(
                param_spec("fc.weight", &[config.num_classes, cf], Group::Theta, true),
                uniform(&mut theta_rng, config.num_classes * cf, bound),
            );
            let b = params.register(
                param_spec("fc.bias", &[config.num_classes], Group::Theta, true),
                vec![T::zero(); config.num_classes],
            );
            Linear {
                weight: w,
                bias: b,
                fan_in: cf,
                fan_out: config.num_classes,
            }
        };

        let aux = {
            let bound = 1.0 / ((cf * 9) as f64).sqrt();
            let conv = |params: &mut ParamStore<T>, rng: &mut rng::Rng, name: &str, zero: bool| {
                let n = cf * cf * 9;
                let init = if zero { vec![T::zero(); n] } else { uniform(rng, n, bound) };
                let w = params.register(param_spec(&format!("{name}.weight"), &[cf, cf, 3, 3], Group::Lambda, false), init);
                let b = params.register(
                    param_spec(&format!("{name}.bias"), &[cf], Group::Lambda, false),
                    vec![T::zero(); cf],
                );
                Conv2d {
                    weight: w,
                    bias: Some(b),
                    cin: cf,
                    cout: cf,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                }
            };
            let conv1 = conv(&mut params, &mut lambda_rng, "block.conv1", false);
            let conv2 = conv(&mut params, &mut lambda_rng, "block.conv2", config.zero_init_refinement);
            let hb = 1.0 / (cf as f64).sqrt();
            let hw = params.register(
                param_spec("aux_fc.weight", &[config.num_pretext, cf], Group::Lambda, true),
                uniform(&mut lambda_rng, config.num_pretext * cf, hb),
            );
            let hbias = params.register(
                param_spec("aux_fc.bias", &[config.num_pretext], Group::Lambda, true),
                vec![T::zero(); config.num_pretext],
            );
            AuxBlock {
                conv1,
                conv2,
                head: Linear {
                    weight: hw,
                    bias: hbias,
                    fan_in: cf,
                    fan_out: config.num_pretext,
                },
            }
        };

        let mut model = GeosModel {
            config,
            params,
            backbone,
            aux,
            primary_head,
            feature_shape: (cf, hf, wf),
        };
        if let Some(path) = model.config.pretrained.clone() {
            checkpoint::load_pretrained_theta(&mut model, &path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn isolation(&self) -> bool {
        self.config.isolation
    }

    pub fn set_isolation(&mut self, on: bool) {
        self.config.isolation = on;
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature_shape
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_pretext(&self) -> usize {
        self.config.num_pretext
    }

    pub fn grads(&self) -> Grads<T> {
        Grads::zeros_like(&self.params)
    }

    pub fn param_report(&self) -> ParamReport {
        let names = |g: Group| {
            self.params
                .group_ids(g)
                .map(|id| self.params.spec(id).qualified_name())
                .collect::<Vec<_>>()
        };
        ParamReport {
            theta: self.params.count(Group::Theta),
            lambda: self.params.count(Group::Lambda),
            theta_names: names(Group::Theta),
            lambda_names: names(Group::Lambda),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        match x.shape() {
            [n, c, h, w] if *n > 0 && *c == self.config.in_channels && *h == s && *w == s => Ok(()),
            other => Err(Error::Shape(format!(
                "expected N×{}×{s}×{s} input, got {other:?}",
                self.config.in_channels
            ))),
        }
    }

    fn refine(&self, f: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut a1 = self.aux.conv1.forward(&self.params, f);
        nn::relu_inplace(&mut a1);
        let t = self.aux.conv2.forward(&self.params, &a1);
        (a1, t)
    }

    /// Backward through Λ's trunk from the gradient at `t`; returns the gradient at `f` when asked.
    fn refine_backward(
        &self,
        f: &Tensor<T>,
        a1: &Tensor<T>,
        dt: &Tensor<T>,
        grads: &mut Grads<T>,
        need_df: bool,
    ) -> Option<Tensor<T>> {
        let da1 = self
            .aux
            .conv2
            .backward(&self.params, a1, dt, grads, true)
            .expect("requested");
        let da1 = nn::relu_backward(a1, da1);
        self.aux.conv1.backward(&self.params, f, &da1, grads, need_df)
    }

    fn heads(&self, f: &Tensor<T>, t: &Tensor<T>, pretext: bool) -> (Tensor<T>, Option<Tensor<T>>) {
        let s = f.add(t);
        let primary = self.primary_head.forward(&self.params, &nn::global_avg_pool(&s));
        let pre = pretext.then(|| {
            let mut u = s;
            nn::relu_inplace(&mut u);
            self.aux.head.forward(&self.params, &nn::global_avg_pool(&u))
        });
        (primary, pre)
    }

    /// Inference on ordered images: primary logits from `f + t`.
    pub fn forward_primary(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let f = self.backbone.forward(&self.params, x);
        let (_, t) = self.refine(&f);
        let (primary_logits, _) = self.heads(&f, &t, false);
        Ok(ForwardOutput {
            primary_logits,
            pretext_logits: None,
            features_theta: f,
            features_lambda: t,
        })
    }

    /// Inference on transformed images: pretext logits from Λ over `Θ(x̃)`.
    pub fn forward_auxiliary(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let f = self.backbone.forward(&self.params, x);
        let (_, t) = self.refine(&f);
        let (primary_logits, pretext) = self.heads(&f, &t, true);
        Ok(ForwardOutput {
            primary_logits,
            pretext_logits: pretext,
            features_theta: f,
            features_lambda: t,
        })
    }

    /// Backbone-only logits: the primary head applied to `pool(f)` without Λ.
    pub fn forward_backbone_only(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let f = self.backbone.forward(&self.params, x);
        Ok(self.primary_head.forward(&self.params, &nn::global_avg_pool(&f)))
    }

    /// Primary cross-entropy and its gradients accumulated into `grads`.
    ///
    /// Under isolation the gradient stops at the sum node on Λ's side.
    pub fn accumulate_primary(&self, batch: &Batch<T>, grads: &mut Grads<T>) -> Result<T> {
        self.check_input(&batch.inputs)?;
        let (f, trace) = self.backbone.forward_traced(&self.params, &batch.inputs);
        let (a1, t) = self.refine(&f);
        let s = f.add(&t);
        let pooled = nn::global_avg_pool(&s);
        let logits = self.primary_head.forward(&self.params, &pooled);
        let (loss, dlogits) = nn::cross_entropy(&logits, &batch.labels, T::one());
        let dpooled = self
            .primary_head
            .backward(&self.params, &pooled, &dlogits, grads, true)
            .expect("requested");
        let ds = nn::global_avg_pool_backward(s.shape(), &dpooled);
        let mut df = ds.clone();
        if !self.config.isolation {
            if let Some(extra) = self.refine_backward(&f, &a1, &ds, grads, true) {
                df.add_assign(&extra);
            }
        }
        self.backbone.backward(&self.params, trace, df, grads);
        Ok(loss)
    }

    /// Auxiliary cross-entropy scaled by `scale`, gradients accumulated into `grads`.
    ///
    /// Under isolation Λ's input is a constant, so Θ receives nothing.
    pub fn accumulate_auxiliary(&self, batch: &Batch<T>, scale: T, grads: &mut Grads<T>) -> Result<T> {
        self.check_input(&batch.inputs)?;
        let isolate = self.config.isolation;
        let (f, trace) = if isolate {
            (self.backbone.forward(&self.params, &batch.inputs), None)
        } else {
            let (f, tr) = self.backbone.forward_traced(&self.params, &batch.inputs);
            (f, Some(tr))
        };
        let (a1, t) = self.refine(&f);
        let mut u = f.add(&t);
        nn::relu_inplace(&mut u);
        let pooled = nn::global_avg_pool(&u);
        let logits = self.aux.head.forward(&self.params, &pooled);
        let (loss, dlogits) = nn::cross_entropy(&logits, &batch.labels, scale);
        let dpooled = self
            .aux
            .head
            .backward(&self.params, &pooled, &dlogits, grads, true)
            .expect("requested");
        let du = nn::global_avg_pool_backward(u.shape(), &dpooled);
        let dpre = nn::relu_backward(&u, du);
        let dconv = self.refine_backward(&f, &a1, &dpre, grads, !isolate);
        if let (Some(trace), Some(dconv)) = (trace, dconv) {
            let mut df = dpre;
            df.add_assign(&dconv);
            self.backbone.backward(&self.params, trace, df, grads);
        }
        Ok(loss)
    }

    /// Auxiliary loss of a batch whose backbone features are already known.
    /// Used by test-time adaptation, where Θ is fixed and features can be reused.
    pub(crate) fn auxiliary_from_features(
        &self,
        f: &Tensor<T>,
        labels: &[usize],
        grads: Option<&mut Grads<T>>,
    ) -> T {
        let (a1, t) = self.refine(f);
        let mut u = f.add(&t);
        nn::relu_inplace(&mut u);
        let pooled = nn::global_avg_pool(&u);
        let logits = self.aux.head.forward(&self.params, &pooled);
        let (loss, dlogits) = nn::cross_entropy(&logits, labels, T::one());
        if let Some(grads) = grads {
            let dpooled = self
                .aux
                .head
                .backward(&self.params, &pooled, &dlogits, grads, true)
                .expect("requested");
            let du = nn::global_avg_pool_backward(u.shape(), &dpooled);
            let dpre = nn::relu_backward(&u, du);
            self.refine_backward(f, &a1, &dpre, grads, false);
        }
        loss
    }

    pub(crate) fn backbone_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.backbone.forward(&self.params, x))
    }

    pub fn snapshot_lambda(&self) -> LambdaSnapshot<T> {
        let ids: Vec<_> = self.params.group_ids(Group::Lambda).collect();
        LambdaSnapshot {
            specs: ids.iter().map(|&id| self.params.spec(id).clone()).collect(),
            values: ids.iter().map(|&id| self.params.value(id).to_vec()).collect(),
        }
    }

    pub fn restore_lambda(&mut self, snap: &LambdaSnapshot<T>) -> Result<()> {
        let ids: Vec<_> = self.params.group_ids(Group::Lambda).collect();
        if ids.len() != snap.specs.len()
            || ids.iter().zip(&snap.specs).any(|(&id, s)| self.params.spec(id) != s)
        {
            return Err(Error::Snapshot("auxiliary block architecture differs from the snapshot".into()));
        }
        for (&id, v) in ids.iter().zip(&snap.values) {
            self.params.value_mut(id).copy_from_slice(v);
        }
        Ok(())
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> GeosModel<U> {
        GeosModel {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            aux: self.aux.clone(),
            primary_head: self.primary_head.clone(),
            feature_shape: self.feature_shape,
        }
    }
}

impl<T: Scalar> LambdaSnapshot<T> {
    pub fn bits_eq(&self, other: &LambdaSnapshot<T>) -> bool {
        self.specs == other.specs
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.bits() == y.bits()))
    }
}

/// Stack images into a normalized `N×C×H×W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image<f32>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        for ch in 0..c {
            let (mean, std) = if c == 3 { (INPUT_MEAN[ch], INPUT_STD[ch]) } else { (0.5, 0.25) };
            for y in 0..h {
                for x in 0..w {
                    data.push(T::from_f64_lossy(((img.pixel(y, x)[ch] - mean) / std) as f64));
                }
            }
        }
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}
