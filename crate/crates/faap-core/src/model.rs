//! Deployed classifiers: training flavors, freezing, and inference.
//!
//! A deployed model is explicitly split into a feature extractor `g` (the
//! convolutional trunk, ending at the last spatial feature block) and a label
//! predictor `f` (pooling plus a linear head). Downstream code only ever
//! needs those two stages; `predict` is literally `f(g(x))`.
//!
//! Four training flavors produce subjects with different degrees of bias:
//!
//! * `Normal` — plain cross-entropy on the target label; absorbs whatever
//!   spurious correlation the data carries.
//! * `FairAdversarial` — a protected-attribute head is trained on pooled
//!   features while the trunk receives its gradient reversed, scrubbing
//!   attribute information out of the representation.
//! * `UnfairLabelFlip` — normal training on a label-flipped dataset.
//! * `UnfairReversedGradient` — the fair setup with the reversal sign
//!   flipped, actively pulling attribute information into the features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{flip_labels, DatasetSplit};
use crate::error::CoreError;
use crate::metrics::PredictionRecord;
use crate::nn::adam::Adam;
use crate::nn::loss::cross_entropy_mean;
use crate::nn::{Block, Net};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// How a deployed subject was produced, with its flavor-specific knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainFlavor {
    Normal,
    FairAdversarial { adversary_weight: f64 },
    UnfairLabelFlip { flip_rate: f64 },
    UnfairReversedGradient { adversary_weight: f64 },
}

impl TrainFlavor {
    pub fn name(&self) -> &'static str {
        match self {
            TrainFlavor::Normal => "normal",
            TrainFlavor::FairAdversarial { .. } => "fair",
            TrainFlavor::UnfairLabelFlip { .. } => "lf",
            TrainFlavor::UnfairReversedGradient { .. } => "rg",
        }
    }

    /// Gradient-reversal coefficient applied to the adversary's gradient as
    /// it enters the trunk: negative unlearns the attribute, positive learns
    /// it harder.
    fn reversal(&self) -> Option<f64> {
        match self {
            TrainFlavor::FairAdversarial { adversary_weight } => Some(-adversary_weight),
            TrainFlavor::UnfairReversedGradient { adversary_weight } => Some(*adversary_weight),
            _ => None,
        }
    }
}

/// Architecture and optimization knobs for deployed-model training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Channel widths of the three conv stages.
    pub widths: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Hidden width of the adversary head used by fair/rg flavors.
    pub adversary_hidden: usize,
    /// Validation accuracy must reach 0.5 + margin, else `NonConvergence`.
    pub convergence_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            widths: [8, 16, 32],
            epochs: 3,
            batch_size: 64,
            learning_rate: 5e-4,
            adversary_hidden: 16,
            convergence_margin: 0.1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), CoreError> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidConfig("stage widths must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Provenance carried by every trained model.
#[derive(Debug, Clone)]
pub struct ModelMeta {
    pub flavor: TrainFlavor,
    pub seed: u64,
    pub dataset_id: String,
}

/// A classifier split into feature extractor `g` and label predictor `f`.
#[derive(Debug, Clone)]
pub struct DeployedModel {
    extractor: Net,
    head: Net,
    params_g: Vec<f64>,
    params_f: Vec<f64>,
    frozen: bool,
    pub meta: ModelMeta,
}

fn residual_block(c: usize, h: usize, w: usize) -> Block {
    let body = Net::new(
        &[c, h, w],
        vec![
            Block::Conv { in_c: c, out_c: c, kernel: 3, stride: 1, pad: 1 },
            Block::Relu,
            Block::Conv { in_c: c, out_c: c, kernel: 3, stride: 1, pad: 1 },
        ],
    )
    .expect("residual body shapes are static");
    Block::Residual(alloc::boxed::Box::new(body))
}

/// Residual trunk: three stages at 1×, 2×, 4× downsampling.
pub fn extractor_net(input: &[usize], widths: [usize; 3]) -> Result<Net, CoreError> {
    let [c, h, w] = match *input {
        [c, h, w] => [c, h, w],
        _ => return Err(CoreError::ShapeMismatch(format!("expected [c,h,w], got {input:?}"))),
    };
    let [w1, w2, w3] = widths;
    Net::new(
        &[c, h, w],
        vec![
            Block::Conv { in_c: c, out_c: w1, kernel: 3, stride: 1, pad: 1 },
            Block::Relu,
            residual_block(w1, h, w),
            Block::Relu,
            Block::Conv { in_c: w1, out_c: w2, kernel: 3, stride: 2, pad: 1 },
            Block::Relu,
            residual_block(w2, h.div_ceil(2), w.div_ceil(2)),
            Block::Relu,
            Block::Conv { in_c: w2, out_c: w3, kernel: 3, stride: 2, pad: 1 },
            Block::Relu,
            residual_block(w3, h.div_ceil(4), w.div_ceil(4)),
            Block::Relu,
        ],
    )
}

/// Label predictor: pooled features to a 2-class score vector.
pub fn head_net(feature_shape: &[usize]) -> Result<Net, CoreError> {
    let c = feature_shape[0];
    Net::new(
        feature_shape,
        vec![Block::GlobalAvgPool, Block::Linear { in_dim: c, out_dim: 2 }],
    )
}

fn adversary_net(feature_shape: &[usize], hidden: usize) -> Result<Net, CoreError> {
    let c = feature_shape[0];
    Net::new(
        feature_shape,
        vec![
            Block::GlobalAvgPool,
            Block::Linear { in_dim: c, out_dim: hidden },
            Block::LeakyRelu { slope: 0.2 },
            Block::Linear { in_dim: hidden, out_dim: 2 },
        ],
    )
}

/// Map a {-1,+1} label to a class index.
pub fn class_index(label: i8) -> usize {
    if label == 1 { 1 } else { 0 }
}

/// Map a class index back to a {-1,+1} label.
pub fn index_label(idx: usize) -> i8 {
    if idx == 1 { 1 } else { -1 }
}

/// Stack sample images `[c,h,w]` into a batch `[n,c,h,w]`.
pub fn batch_images(samples: &[&crate::data::LabeledSample]) -> Tensor {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}

/// FNV-1a over the raw bits of a parameter vector.
pub fn params_checksum(params: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in params {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

impl DeployedModel {
    /// Assemble a model from its parts (checkpoint loading, tests).
    pub fn from_parts(
        extractor: Net,
        head: Net,
        params_g: Vec<f64>,
        params_f: Vec<f64>,
        frozen: bool,
        meta: ModelMeta,
    ) -> Result<Self, CoreError> {
        if params_g.len() != extractor.n_params() || params_f.len() != head.n_params() {
            return Err(CoreError::ShapeMismatch("parameter vectors do not fit nets".into()));
        }
        if extractor.output_shape() != head.input_shape() {
            return Err(CoreError::ShapeMismatch("extractor output does not feed head".into()));
        }
        Ok(DeployedModel { extractor, head, params_g, params_f, frozen, meta })
    }

    pub fn extractor(&self) -> &Net {
        &self.extractor
    }

    pub fn head(&self) -> &Net {
        &self.head
    }

    pub fn params_g(&self) -> &[f64] {
        &self.params_g
    }

    pub fn params_f(&self) -> &[f64] {
        &self.params_f
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn input_shape(&self) -> &[usize] {
        self.extractor.input_shape()
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.extractor.output_shape()
    }

    /// Checksum over all parameters; equality before/after an operation is
    /// the freeze invariant.
    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params_g) ^ params_checksum(&self.params_f).rotate_left(1)
    }

    fn check_images(&self, images: &Tensor) -> Result<usize, CoreError> {
        let shape = images.shape();
        if shape.len() != 4 || &shape[1..] != self.input_shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "batch {shape:?} does not match model input {:?}",
                self.input_shape()
            )));
        }
        Ok(shape[0])
    }

    /// Latent representations `r = g(x)` for a `[n,c,h,w]` batch.
    pub fn extract_features(&self, images: &Tensor) -> Result<Tensor, CoreError> {
        self.check_images(images)?;
        Ok(self.extractor.infer(&self.params_g, images))
    }

    /// Scores `f(r)` for a feature batch.
    pub fn scores_from_features(&self, features: &Tensor) -> Tensor {
        self.head.infer(&self.params_f, features)
    }

    /// Deterministic inference: 2-class scores and {-1,+1} labels.
    ///
    /// Ties break toward -1 so repeated audits agree bit for bit.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Vec<i8>), CoreError> {
        let features = self.extract_features(images)?;
        let scores = self.scores_from_features(&features);
        let labels = scores
            .data()
            .chunks_exact(2)
            .map(|s| if s[1] > s[0] { 1 } else { -1 })
            .collect();
        Ok((scores, labels))
    }

    /// Run the model over a split and join predictions with ground truth.
    pub fn prediction_records(
        &self,
        split: &DatasetSplit,
        batch_size: usize,
    ) -> Result<Vec<PredictionRecord>, CoreError> {
        let mut records = Vec::with_capacity(split.len());
        for chunk in split.samples.chunks(batch_size.max(1)) {
            let refs: Vec<&crate::data::LabeledSample> = chunk.iter().collect();
            let batch = batch_images(&refs);
            let (_, labels) = self.predict(&batch)?;
            for (s, &pred) in chunk.iter().zip(labels.iter()) {
                records.push(PredictionRecord::new(s.y, s.z, pred)?);
            }
        }
        Ok(records)
    }

    /// Accuracy over a split, batched.
    pub fn accuracy_on(&self, split: &DatasetSplit, batch_size: usize) -> Result<f64, CoreError> {
        let records = self.prediction_records(split, batch_size)?;
        crate::metrics::accuracy(&records)
    }
}

/// Train a deployed model of the given flavor and freeze it.
///
/// `validation` is used only for the convergence check; pass the validation
/// split of the same dataset.
pub fn train_deployed(
    dataset: &DatasetSplit,
    validation: &DatasetSplit,
    flavor: TrainFlavor,
    config: &TrainConfig,
    seed: u64,
) -> Result<DeployedModel, CoreError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::EmptyInput);
    }

    // LF is normal training on a flipped dataset.
    let flipped;
    let train_split = match flavor {
        TrainFlavor::UnfairLabelFlip { flip_rate } => {
            flipped = flip_labels(dataset, flip_rate, seed ^ 0x1f1f)?;
            &flipped
        }
        _ => dataset,
    };

    let input_shape = train_split.image_shape().to_vec();
    let extractor = extractor_net(&input_shape, config.widths)?;
    let head = head_net(extractor.output_shape())?;
    let adversary = adversary_net(extractor.output_shape(), config.adversary_hidden)?;

    let mut init_rng = Stream::new(seed);
    let mut params_g = extractor.init_params(&mut init_rng);
    let mut params_f = head.init_params(&mut init_rng);
    let mut params_a = adversary.init_params(&mut init_rng);

    let mut opt_g = Adam::new(config.learning_rate, params_g.len());
    let mut opt_f = Adam::new(config.learning_rate, params_f.len());
    let mut opt_a = Adam::new(config.learning_rate, params_a.len());

    let reversal = flavor.reversal();
    let mut order_rng = Stream::new(seed ^ 0x0bad_5eed);
    let n = train_split.len();

    for _epoch in 0..config.epochs {
        let perm = order_rng.permutation(n);
        for batch_idx in perm.chunks(config.batch_size) {
            let samples: Vec<&crate::data::LabeledSample> =
                batch_idx.iter().map(|&i| &train_split.samples[i]).collect();
            let x = batch_images(&samples);
            let y01: Vec<usize> = samples.iter().map(|s| class_index(s.y)).collect();

            let (features, trace_g) = extractor.forward(&params_g, &x);
            let (logits_y, trace_f) = head.forward(&params_f, &features);
            let (loss_y, dlogits_y) = cross_entropy_mean(&logits_y, &y01);
            if !loss_y.is_finite() {
                return Err(CoreError::NonFiniteLoss { iteration: 0 });
            }

            let mut grad_f = vec![0.0; params_f.len()];
            let mut dfeatures = head.backward(&params_f, &trace_f, &dlogits_y, &mut grad_f);

            if let Some(coeff) = reversal {
                let z01: Vec<usize> = samples.iter().map(|s| class_index(s.z)).collect();
                let (logits_z, trace_a) = adversary.forward(&params_a, &features);
                let (_, dlogits_z) = cross_entropy_mean(&logits_z, &z01);
                let mut grad_a = vec![0.0; params_a.len()];
                let dfeat_adv = adversary.backward(&params_a, &trace_a, &dlogits_z, &mut grad_a);
                // The head itself always learns to predict z; only the trunk
                // sees the (possibly reversed) gradient.
                for (d, a) in dfeatures.data_mut().iter_mut().zip(dfeat_adv.data()) {
                    *d += coeff * a;
                }
                opt_a.step(&mut params_a, &grad_a);
            }

            let mut grad_g = vec![0.0; params_g.len()];
            extractor.backward(&params_g, &trace_g, &dfeatures, &mut grad_g);
            opt_f.step(&mut params_f, &grad_f);
            opt_g.step(&mut params_g, &grad_g);
        }
    }

    let model = DeployedModel {
        extractor,
        head,
        params_g,
        params_f,
        frozen: true,
        meta: ModelMeta {
            flavor,
            seed,
            dataset_id: format!("{}-seed{}", dataset.name.as_str(), dataset.seed),
        },
    };

    let required = 0.5 + config.convergence_margin;
    let val_acc = model.accuracy_on(validation, config.batch_size)?;
    if val_acc < required {
        return Err(CoreError::NonConvergence { accuracy: val_acc, required });
    }
    Ok(model)
}
