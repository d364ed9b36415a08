//! The minimax core: perturbation generator, latent discriminator, losses,
//! and the alternating training loop.
//!
//! A generator `G` maps an image to a bounded additive perturbation; the
//! perturbed image x̂ = clamp(x + clamp(G(x), ±ε), 0, 1) satisfies
//! ‖x̂ − x‖∞ ≤ ε and stays in pixel range by construction. A discriminator
//! `D` reads the frozen extractor's latent block g(x̂) and predicts the
//! protected attribute. Each iteration first descends D on its
//! cross-entropy, then descends G on
//!
//!   L_G = −L_D − α·H(D(g(x̂))) + β·J(f(g(x̂)), y),
//!
//! which pushes latents toward the attribute decision boundary (maximum
//! discriminator confusion, entropy capped at ln 2) while keeping the label
//! prediction intact. The deployed model's parameters are never touched; a
//! checksum before and after training enforces that.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::DatasetSplit;
use crate::error::CoreError;
use crate::model::{batch_images, class_index, DeployedModel};
use crate::nn::adam::Adam;
use crate::nn::loss::{cross_entropy_mean, entropy_mean};
use crate::nn::{Block, Net, Trace};
use crate::rng::Stream;
use crate::tensor::Tensor;

const GENERATOR_SALT: u64 = 0x6e6e_0001;
const DISCRIMINATOR_SALT: u64 = 0xd15c_0002;
const ORDER_SALT: u64 = 0x0f0f_0003;

/// Hyperparameters of the minimax loop.
#[derive(Debug, Clone)]
pub struct FaapConfig {
    /// Entropy-regularizer weight; used only in generator updates.
    pub alpha: f64,
    /// Target-task weight in the generator loss.
    pub beta: f64,
    /// Discriminator learning rate.
    pub eta_d: f64,
    /// Generator learning rate.
    pub eta_g: f64,
    /// Number of alternating iterations.
    pub iterations: usize,
    /// Batch size per iteration.
    pub batch_size: usize,
    /// L∞ perturbation budget in pixel units.
    pub epsilon: f64,
    /// Channel widths of the generator encoder stages.
    pub gen_widths: [usize; 2],
    /// Hidden width of the discriminator head.
    pub disc_hidden: usize,
    /// Train with the target-task term only (diagnostic ablation); the
    /// fairness term is dropped from the generator objective.
    pub target_only: bool,
}

impl Default for FaapConfig {
    fn default() -> Self {
        FaapConfig {
            alpha: 0.1,
            beta: 1.0,
            eta_d: 1e-3,
            eta_g: 1e-3,
            iterations: 500,
            batch_size: 32,
            epsilon: 0.05,
            gen_widths: [8, 16],
            disc_hidden: 16,
            target_only: false,
        }
    }
}

impl FaapConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.alpha < 0.0 {
            return Err(CoreError::InvalidConfig("alpha must be non-negative".into()));
        }
        if self.beta <= 0.0 {
            return Err(CoreError::InvalidConfig("beta must be positive".into()));
        }
        if self.eta_d <= 0.0 || self.eta_g <= 0.0 {
            return Err(CoreError::InvalidConfig("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be positive".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(CoreError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Clamp composition shared by every perturbation path: the raw perturbation
/// is clamped to ±ε first, then the pixel sum to [0, 1]. The range clamp can
/// only shrink the deviation, so both constraints hold simultaneously.
pub fn apply_perturbation(x: &Tensor, raw_delta: &Tensor, epsilon: f64) -> Tensor {
    assert_eq!(x.shape(), raw_delta.shape());
    let data = x
        .data()
        .iter()
        .zip(raw_delta.data().iter())
        .map(|(&px, &d)| (px + d.clamp(-epsilon, epsilon)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Image-to-perturbation network with an ε-bounded output head.
#[derive(Debug, Clone)]
pub struct PerturbationGenerator {
    net: Net,
    params: Vec<f64>,
    epsilon: f64,
}

/// Encoder / residual / decoder trunk ending in a tanh head. The tanh output
/// is scaled by ε, so the raw perturbation is already inside the budget; the
/// hard clamp in [`apply_perturbation`] stays as a guarantee, not a hope.
fn generator_net(input: &[usize], widths: [usize; 2]) -> Result<Net, CoreError> {
    let [c, h, w] = match *input {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "expected [c,h,w], got {input:?}"
            )))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::ShapeMismatch(
            "generator requires even spatial dimensions".into(),
        ));
    }
    let [w1, w2] = widths;
    let res_body = Net::new(
        &[w2, h / 2, w / 2],
        vec![
            Block::Conv { in_c: w2, out_c: w2, kernel: 3, stride: 1, pad: 1 },
            Block::LeakyRelu { slope: 0.2 },
            Block::Conv { in_c: w2, out_c: w2, kernel: 3, stride: 1, pad: 1 },
        ],
    )?;
    Net::new(
        &[c, h, w],
        vec![
            Block::Conv { in_c: c, out_c: w1, kernel: 3, stride: 1, pad: 1 },
            Block::LeakyRelu { slope: 0.2 },
            Block::Conv { in_c: w1, out_c: w2, kernel: 3, stride: 2, pad: 1 },
            Block::LeakyRelu { slope: 0.2 },
            Block::Residual(Box::new(res_body)),
            Block::LeakyRelu { slope: 0.2 },
            Block::Upsample2x,
            Block::Conv { in_c: w2, out_c: w1, kernel: 3, stride: 1, pad: 1 },
            Block::LeakyRelu { slope: 0.2 },
            Block::Conv { in_c: w1, out_c: c, kernel: 3, stride: 1, pad: 1 },
            Block::Tanh,
        ],
    )
}

/// Forward cache for one perturbation pass, consumed by the backward path.
pub struct PerturbCache {
    trace: Trace,
    /// 1 where the pixel-range clamp passed the gradient, 0 where it clipped.
    mask: Vec<f64>,
}

impl PerturbationGenerator {
    /// Freshly initialized generator for the given image shape.
    pub fn init(input_shape: &[usize], config: &FaapConfig, seed: u64) -> Result<Self, CoreError> {
        config.validate()?;
        let net = generator_net(input_shape, config.gen_widths)?;
        let mut rng = Stream::new(seed ^ GENERATOR_SALT);
        let mut params = net.init_params(&mut rng);
        // Start near the identity map: a small final conv keeps the initial
        // perturbation well inside the budget.
        let last_conv = net.n_blocks() - 2;
        for v in &mut params[net.param_range(last_conv)] {
            *v *= 0.05;
        }
        Ok(PerturbationGenerator { net, params, epsilon: config.epsilon })
    }

    pub fn from_parts(net: Net, params: Vec<f64>, epsilon: f64) -> Result<Self, CoreError> {
        if params.len() != net.n_params() {
            return Err(CoreError::ShapeMismatch("parameter vector does not fit net".into()));
        }
        if net.output_shape() != net.input_shape() {
            return Err(CoreError::ShapeMismatch(
                "generator must map images to same-shape perturbations".into(),
            ));
        }
        Ok(PerturbationGenerator { net, params, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    fn check_batch(&self, images: &Tensor) -> Result<usize, CoreError> {
        let shape = images.shape();
        if shape.len() != 4 || &shape[1..] != self.input_shape() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "batch {shape:?} does not match generator input {:?}",
                self.input_shape()
            )));
        }
        Ok(shape[0])
    }

    /// Perturb a `[n,c,h,w]` batch: x̂ = clamp(x + clamp(G(x), ±ε), 0, 1).
    pub fn perturb(&self, images: &Tensor) -> Result<Tensor, CoreError> {
        self.check_batch(images)?;
        let raw = self.net.infer(&self.params, images);
        let delta = raw.map(|v| v * self.epsilon);
        Ok(apply_perturbation(images, &delta, self.epsilon))
    }

    /// Perturb while keeping what the backward pass needs.
    fn perturb_train(&self, images: &Tensor) -> Result<(Tensor, PerturbCache), CoreError> {
        self.check_batch(images)?;
        let (raw, trace) = self.net.forward(&self.params, images);
        let mut mask = vec![0.0; images.len()];
        let mut out = vec![0.0; images.len()];
        for i in 0..images.len() {
            let delta = (raw.data()[i] * self.epsilon).clamp(-self.epsilon, self.epsilon);
            let v = images.data()[i] + delta;
            if v > 0.0 && v < 1.0 {
                mask[i] = 1.0;
            }
            out[i] = v.clamp(0.0, 1.0);
        }
        let xhat = Tensor::from_vec(images.shape(), out);
        Ok((xhat, PerturbCache { trace, mask }))
    }

    /// Backpropagate dL/dx̂ through the clamp and the network, accumulating
    /// parameter gradients into `grad`.
    fn backward(&self, cache: &PerturbCache, dxhat: &Tensor, grad: &mut [f64]) {
        let draw_data: Vec<f64> = dxhat
            .data()
            .iter()
            .zip(cache.mask.iter())
            .map(|(&g, &m)| g * m * self.epsilon)
            .collect();
        let draw = Tensor::from_vec(dxhat.shape(), draw_data);
        self.net.backward(&self.params, &cache.trace, &draw, grad);
    }
}

/// Attribute discriminator over latent feature blocks: pooled features into
/// a 2-layer classifier head.
#[derive(Debug, Clone)]
pub struct AttributeDiscriminator {
    net: Net,
    params: Vec<f64>,
}

fn discriminator_net(feature_shape: &[usize], hidden: usize) -> Result<Net, CoreError> {
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

impl AttributeDiscriminator {
    pub fn init(feature_shape: &[usize], hidden: usize, seed: u64) -> Result<Self, CoreError> {
        let net = discriminator_net(feature_shape, hidden)?;
        let mut rng = Stream::new(seed ^ DISCRIMINATOR_SALT);
        let params = net.init_params(&mut rng);
        Ok(AttributeDiscriminator { net, params })
    }

    pub fn from_parts(net: Net, params: Vec<f64>) -> Result<Self, CoreError> {
        if params.len() != net.n_params() {
            return Err(CoreError::ShapeMismatch("parameter vector does not fit net".into()));
        }
        Ok(AttributeDiscriminator { net, params })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Class probabilities over z for a feature batch; rows sum to 1.
    pub fn probabilities(&self, features: &Tensor) -> Tensor {
        let logits = self.net.infer(&self.params, features);
        crate::nn::loss::softmax(&logits)
    }
}

/// Mean cross-entropy of D(g(x̂)) against z.
pub fn discriminator_loss(
    disc: &AttributeDiscriminator,
    model: &DeployedModel,
    xhat: &Tensor,
    z: &[i8],
) -> Result<f64, CoreError> {
    let features = model.extract_features(xhat)?;
    Ok(discriminator_loss_on_features(disc, &features, z))
}

fn targets_of(z: &[i8]) -> Vec<usize> {
    z.iter().map(|&v| class_index(v)).collect()
}

pub fn discriminator_loss_on_features(
    disc: &AttributeDiscriminator,
    features: &Tensor,
    z: &[i8],
) -> f64 {
    let logits = disc.net.infer(&disc.params, features);
    cross_entropy_mean(&logits, &targets_of(z)).0
}

/// Generator fairness term: −L_D − α·mean H(D(g(x̂))).
pub fn fairness_loss(
    disc: &AttributeDiscriminator,
    model: &DeployedModel,
    xhat: &Tensor,
    z: &[i8],
    alpha: f64,
) -> Result<f64, CoreError> {
    if alpha < 0.0 {
        return Err(CoreError::InvalidConfig("alpha must be non-negative".into()));
    }
    let features = model.extract_features(xhat)?;
    Ok(fairness_loss_on_features(disc, &features, z, alpha))
}

pub fn fairness_loss_on_features(
    disc: &AttributeDiscriminator,
    features: &Tensor,
    z: &[i8],
    alpha: f64,
) -> f64 {
    let logits = disc.net.infer(&disc.params, features);
    let (ce, _) = cross_entropy_mean(&logits, &targets_of(z));
    let (h, _) = entropy_mean(&logits);
    -ce - alpha * h
}

/// Target-label preservation term: mean cross-entropy of f(g(x̂)) against y.
pub fn target_loss(model: &DeployedModel, xhat: &Tensor, y: &[i8]) -> Result<f64, CoreError> {
    let features = model.extract_features(xhat)?;
    let logits = model.scores_from_features(&features);
    Ok(cross_entropy_mean(&logits, &targets_of(y)).0)
}

/// Total generator loss: fairness term plus β times the target term.
pub fn generator_total_loss(
    disc: &AttributeDiscriminator,
    model: &DeployedModel,
    xhat: &Tensor,
    y: &[i8],
    z: &[i8],
    alpha: f64,
    beta: f64,
) -> Result<f64, CoreError> {
    Ok(fairness_loss(disc, model, xhat, z, alpha)? + beta * target_loss(model, xhat, y)?)
}

/// One line of the per-iteration training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_d: f64,
    pub l_g_fair: f64,
    pub l_g_t: f64,
    pub l_g: f64,
}

/// One frozen model's forward state on a perturbed batch.
struct ModelPass<'a> {
    model: &'a DeployedModel,
    features: Tensor,
    trace_g: Trace,
}

fn forward_passes<'a>(models: &[&'a DeployedModel], xhat: &Tensor) -> Vec<ModelPass<'a>> {
    models
        .iter()
        .map(|model| {
            let (features, trace_g) = model.extractor().forward(model.params_g(), xhat);
            ModelPass { model, features, trace_g }
        })
        .collect()
}

/// Discriminator cross-entropy on a feature batch with its parameter
/// gradient. This is the exact computation of the discriminator update step.
fn disc_ce_gradient(
    disc: &AttributeDiscriminator,
    features: &Tensor,
    z01: &[usize],
) -> (f64, Vec<f64>) {
    let (logits, trace) = disc.net.forward(&disc.params, features);
    let (l_d, dlogits) = cross_entropy_mean(&logits, z01);
    let mut grad = vec![0.0; disc.params.len()];
    disc.net.backward(&disc.params, &trace, &dlogits, &mut grad);
    (l_d, grad)
}

/// Generator objective over precomputed model passes, returning the mean
/// fairness and target terms and the gradient w.r.t. the perturbed batch.
/// This one code path serves both the training loop and the standalone
/// gradient surface.
fn generator_objective(
    passes: &[ModelPass<'_>],
    discs: &[AttributeDiscriminator],
    y01: &[usize],
    z01: &[usize],
    alpha: f64,
    beta: f64,
    fair_weight: f64,
) -> Result<(f64, f64, Tensor), CoreError> {
    let k = passes.len() as f64;
    let mut l_fair_mean = 0.0;
    let mut l_t_mean = 0.0;
    let mut dxhat_total: Option<Tensor> = None;

    for (pass, disc) in passes.iter().zip(discs.iter()) {
        let (logits_d, trace_d) = disc.net.forward(&disc.params, &pass.features);
        let (ce, dl_ce) = cross_entropy_mean(&logits_d, z01);
        let (h, dl_h) = entropy_mean(&logits_d);
        let l_fair = -ce - alpha * h;
        let mut dlogits_fair = Tensor::zeros(dl_ce.shape());
        for i in 0..dlogits_fair.len() {
            dlogits_fair.data_mut()[i] =
                fair_weight * (-dl_ce.data()[i] - alpha * dl_h.data()[i]);
        }
        let mut disc_scratch = vec![0.0; disc.params.len()];
        let dfeat_fair = disc.net.backward(&disc.params, &trace_d, &dlogits_fair, &mut disc_scratch);

        let model = pass.model;
        let (logits_f, trace_f) = model.head().forward(model.params_f(), &pass.features);
        let (l_t, mut dlogits_t) = cross_entropy_mean(&logits_f, y01);
        dlogits_t.scale(beta);
        let mut head_scratch = vec![0.0; model.params_f().len()];
        let dfeat_t = model.head().backward(model.params_f(), &trace_f, &dlogits_t, &mut head_scratch);

        if !l_fair.is_finite() || !l_t.is_finite() {
            return Err(CoreError::NonFiniteLoss { iteration: 0 });
        }

        let mut dfeatures = dfeat_fair;
        dfeatures.add_assign(&dfeat_t);
        let mut trunk_scratch = vec![0.0; model.params_g().len()];
        let mut dxhat =
            model.extractor().backward(model.params_g(), &pass.trace_g, &dfeatures, &mut trunk_scratch);
        dxhat.scale(1.0 / k);
        match &mut dxhat_total {
            Some(t) => t.add_assign(&dxhat),
            None => dxhat_total = Some(dxhat),
        }
        l_fair_mean += l_fair / k;
        l_t_mean += l_t / k;
    }
    Ok((l_fair_mean, l_t_mean, dxhat_total.expect("at least one model")))
}

/// L_D = J(D(g(x̂)), z) and its analytic gradient w.r.t. D's parameters.
pub fn discriminator_loss_gradient(
    disc: &AttributeDiscriminator,
    model: &DeployedModel,
    xhat: &Tensor,
    z: &[i8],
) -> Result<(f64, Vec<f64>), CoreError> {
    let features = model.extract_features(xhat)?;
    Ok(disc_ce_gradient(disc, &features, &targets_of(z)))
}

/// The pieces of the generator objective at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLosses {
    pub l_fair: f64,
    pub l_t: f64,
    /// `fair_weight · l_fair + beta · l_t`, the quantity the gradient is of.
    pub total: f64,
}

/// Generator objective and its analytic gradient w.r.t. G's parameters,
/// back through the clamp, the frozen extractor, the discriminator and the
/// label head. `fair_weight`/`beta` scale the two terms, so the component
/// gradients are available as (1, 0) and (0, 1).
pub fn generator_loss_gradient(
    generator: &PerturbationGenerator,
    disc: &AttributeDiscriminator,
    model: &DeployedModel,
    x: &Tensor,
    y: &[i8],
    z: &[i8],
    alpha: f64,
    beta: f64,
    fair_weight: f64,
) -> Result<(GeneratorLosses, Vec<f64>), CoreError> {
    if alpha < 0.0 {
        return Err(CoreError::InvalidConfig("alpha must be non-negative".into()));
    }
    let (xhat, cache) = generator.perturb_train(x)?;
    let passes = forward_passes(&[model], &xhat);
    let discs = core::slice::from_ref(disc);
    let (l_fair, l_t, dxhat) =
        generator_objective(&passes, discs, &targets_of(y), &targets_of(z), alpha, beta, fair_weight)?;
    let mut grad = vec![0.0; generator.params.len()];
    generator.backward(&cache, &dxhat, &mut grad);
    let total = fair_weight * l_fair + beta * l_t;
    Ok((GeneratorLosses { l_fair, l_t, total }, grad))
}

/// Result of a training run: the generator, the final discriminator state
/// per model, and the loss trace.
pub struct FaapOutcome {
    pub generator: PerturbationGenerator,
    pub discriminators: Vec<AttributeDiscriminator>,
    pub trace: Vec<LossRecord>,
}

/// Cycling seeded batch sampler over a split.
struct BatchSampler {
    perm: Vec<usize>,
    pos: usize,
    rng: Stream,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = Stream::new(seed ^ ORDER_SALT);
        let perm = rng.permutation(n);
        BatchSampler { perm, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.pos >= self.perm.len() {
            let n = self.perm.len();
            self.perm = self.rng.permutation(n);
            self.pos = 0;
        }
        let end = (self.pos + size).min(self.perm.len());
        let batch = self.perm[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// Train a perturbation generator against one frozen deployed model.
pub fn train_faap(
    model: &DeployedModel,
    dataset: &DatasetSplit,
    config: &FaapConfig,
    seed: u64,
) -> Result<FaapOutcome, CoreError> {
    train_faap_multi(&[model], dataset, config, seed)
}

/// Train against a surrogate ensemble: one discriminator per model, losses
/// averaged uniformly across models for the generator update.
pub fn train_faap_ensemble(
    models: &[&DeployedModel],
    dataset: &DatasetSplit,
    config: &FaapConfig,
    seed: u64,
) -> Result<FaapOutcome, CoreError> {
    if models.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    if models.len() < 2 {
        return Err(CoreError::TooFewSamples { got: models.len(), need: 2 });
    }
    train_faap_multi(models, dataset, config, seed)
}

fn train_faap_multi(
    models: &[&DeployedModel],
    dataset: &DatasetSplit,
    config: &FaapConfig,
    seed: u64,
) -> Result<FaapOutcome, CoreError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let input_shape = models[0].input_shape().to_vec();
    for m in models {
        if !m.frozen() {
            return Err(CoreError::FrozenViolation);
        }
        if m.input_shape() != input_shape {
            return Err(CoreError::ShapeMismatch(
                "ensemble models must share the input shape".into(),
            ));
        }
    }
    if dataset.image_shape() != input_shape {
        return Err(CoreError::ShapeMismatch(alloc::format!(
            "dataset images {:?} do not match model input {:?}",
            dataset.image_shape(),
            input_shape
        )));
    }

    let checksums: Vec<u64> = models.iter().map(|m| m.checksum()).collect();
    let k = models.len() as f64;

    let mut generator = PerturbationGenerator::init(&input_shape, config, seed)?;
    // Identical init across ensemble members keeps a duplicated-model
    // ensemble exactly equivalent to single-model training.
    let mut discs: Vec<AttributeDiscriminator> = models
        .iter()
        .map(|m| AttributeDiscriminator::init(m.feature_shape(), config.disc_hidden, seed))
        .collect::<Result<_, _>>()?;

    let mut opt_g = Adam::new(config.eta_g, generator.params.len());
    let mut opt_ds: Vec<Adam> =
        discs.iter().map(|d| Adam::new(config.eta_d, d.params.len())).collect();

    let mut sampler = BatchSampler::new(dataset.len(), seed);
    let mut trace = Vec::with_capacity(config.iterations);
    // The fairness term leaves the generator objective in the ablation mode.
    let fair_weight = if config.target_only { 0.0 } else { 1.0 };

    for iteration in 0..config.iterations {
        let idx = sampler.next_batch(config.batch_size);
        let samples: Vec<&crate::data::LabeledSample> =
            idx.iter().map(|&i| &dataset.samples[i]).collect();
        let x = batch_images(&samples);
        let y01: Vec<usize> = samples.iter().map(|s| class_index(s.y)).collect();
        let z01: Vec<usize> = samples.iter().map(|s| class_index(s.z)).collect();

        let (xhat, gen_cache) = generator.perturb_train(&x)?;
        let passes = forward_passes(models, &xhat);

        // Discriminator steps first: plain cross-entropy descent, α plays no
        // role here.
        let mut l_d_mean = 0.0;
        for (m_idx, pass) in passes.iter().enumerate() {
            let (l_d, grad_d) = disc_ce_gradient(&discs[m_idx], &pass.features, &z01);
            if !l_d.is_finite() {
                return Err(CoreError::NonFiniteLoss { iteration });
            }
            opt_ds[m_idx].step(&mut discs[m_idx].params, &grad_d);
            l_d_mean += l_d / k;
        }

        // Generator step against the just-updated discriminators, on the
        // same batch and the same perturbed inputs.
        let (l_fair_mean, l_t_mean, dxhat) = generator_objective(
            &passes,
            &discs,
            &y01,
            &z01,
            config.alpha,
            config.beta,
            fair_weight,
        )
        .map_err(|e| match e {
            CoreError::NonFiniteLoss { .. } => CoreError::NonFiniteLoss { iteration },
            other => other,
        })?;
        let mut grad_gen = vec![0.0; generator.params.len()];
        generator.backward(&gen_cache, &dxhat, &mut grad_gen);
        opt_g.step(&mut generator.params, &grad_gen);

        trace.push(LossRecord {
            iteration,
            l_d: l_d_mean,
            l_g_fair: l_fair_mean,
            l_g_t: l_t_mean,
            l_g: fair_weight * l_fair_mean + config.beta * l_t_mean,
        });
    }

    for (model, &before) in models.iter().zip(checksums.iter()) {
        if model.checksum() != before {
            return Err(CoreError::FrozenViolation);
        }
    }

    Ok(FaapOutcome { generator, discriminators: discs, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_planted_bias_dataset, BiasSpec};
    use crate::model::{extractor_net, head_net, DeployedModel, ModelMeta, TrainFlavor};

    fn small_config() -> FaapConfig {
        FaapConfig {
            iterations: 2,
            batch_size: 8,
            gen_widths: [4, 6],
            disc_hidden: 8,
            ..FaapConfig::default()
        }
    }

    fn tiny_model(seed: u64) -> DeployedModel {
        let extractor = extractor_net(&[3, 16, 16], [4, 6, 8]).unwrap();
        let head = head_net(extractor.output_shape()).unwrap();
        let mut rng = Stream::new(seed);
        let params_g = extractor.init_params(&mut rng);
        let params_f = head.init_params(&mut rng);
        DeployedModel::from_parts(
            extractor,
            head,
            params_g,
            params_f,
            true,
            ModelMeta { flavor: TrainFlavor::Normal, seed, dataset_id: "test".into() },
        )
        .unwrap()
    }

    fn tiny_split(n: usize, seed: u64) -> DatasetSplit {
        let spec = BiasSpec {
            correlation: 0.5,
            positive_rate: 0.5,
            group_rate: 0.5,
            n,
            cue_strength: 1.0,
        };
        generate_planted_bias_dataset(&spec, 16, seed).unwrap().faap_train
    }

    #[test]
    fn clamp_composition_examples() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.5, 0.99]);
        let raw = Tensor::from_vec(&[1, 1, 2], vec![0.08, 0.05]);
        let xhat = apply_perturbation(&x, &raw, 0.05);
        // 0.08 clamps to 0.05; 0.99 + 0.05 clamps to 1.0.
        assert!((xhat.data()[0] - 0.55).abs() < 1e-15);
        assert_eq!(xhat.data()[1], 1.0);
    }

    #[test]
    fn zero_generator_is_identity() {
        let config = small_config();
        let g = PerturbationGenerator::init(&[3, 16, 16], &config, 1).unwrap();
        let zeroed =
            PerturbationGenerator::from_parts(g.net.clone(), vec![0.0; g.params.len()], 0.05)
                .unwrap();
        let mut rng = Stream::new(2);
        let x = Tensor::from_vec(&[2, 3, 16, 16], (0..2 * 768).map(|_| rng.uniform()).collect());
        let xhat = zeroed.perturb(&x).unwrap();
        assert_eq!(xhat, x);
    }

    #[test]
    fn fresh_generator_stays_within_budget_and_near_identity() {
        let config = small_config();
        let g = PerturbationGenerator::init(&[3, 16, 16], &config, 3).unwrap();
        let mut rng = Stream::new(4);
        let x = Tensor::from_vec(&[4, 3, 16, 16], (0..4 * 768).map(|_| rng.uniform()).collect());
        let xhat = g.perturb(&x).unwrap();
        let dev = xhat.max_abs_diff(&x);
        assert!(dev <= 0.05 + 1e-12, "budget violated: {dev}");
        assert!(xhat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn analytic_loss_values() {
        // A zeroed discriminator outputs uniform probabilities.
        let model = tiny_model(5);
        let net = discriminator_net(model.feature_shape(), 8).unwrap();
        let disc = AttributeDiscriminator { params: vec![0.0; net.n_params()], net };
        let mut rng = Stream::new(6);
        let x = Tensor::from_vec(&[4, 3, 16, 16], (0..4 * 768).map(|_| rng.uniform()).collect());
        let z = [1, -1, 1, -1];
        let ln2 = core::f64::consts::LN_2;

        let l_d = discriminator_loss(&disc, &model, &x, &z).unwrap();
        assert!((l_d - ln2).abs() < 1e-12);

        // α = 0: exactly −L_D.
        let f0 = fairness_loss(&disc, &model, &x, &z, 0.0).unwrap();
        assert!((f0 + l_d).abs() < 1e-12);

        // α = 1 with uniform D: −ln2 − ln2.
        let f1 = fairness_loss(&disc, &model, &x, &z, 1.0).unwrap();
        assert!((f1 + 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn target_loss_uniform_head_is_ln2() {
        let extractor = extractor_net(&[3, 16, 16], [4, 6, 8]).unwrap();
        let head = head_net(extractor.output_shape()).unwrap();
        let mut rng = Stream::new(7);
        let params_g = extractor.init_params(&mut rng);
        let params_f = vec![0.0; head.n_params()];
        let model = DeployedModel::from_parts(
            extractor,
            head,
            params_g,
            params_f,
            true,
            ModelMeta { flavor: TrainFlavor::Normal, seed: 7, dataset_id: "t".into() },
        )
        .unwrap();
        let x = Tensor::from_vec(&[2, 3, 16, 16], (0..2 * 768).map(|_| rng.uniform()).collect());
        let l_t = target_loss(&model, &x, &[1, -1]).unwrap();
        assert!((l_t - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_affine_in_beta() {
        let model = tiny_model(8);
        let disc = AttributeDiscriminator::init(model.feature_shape(), 8, 1).unwrap();
        let mut rng = Stream::new(9);
        let x = Tensor::from_vec(&[4, 3, 16, 16], (0..4 * 768).map(|_| rng.uniform()).collect());
        let y = [1, 1, -1, -1];
        let z = [1, -1, 1, -1];
        let alpha = 0.1;
        let at = |beta: f64| generator_total_loss(&disc, &model, &x, &y, &z, alpha, beta).unwrap();
        let (l1, l2, l3) = (at(0.5), at(1.0), at(2.0));
        // Affine in β: slope between any two points is the target loss.
        let s12 = (l2 - l1) / 0.5;
        let s23 = (l3 - l2) / 1.0;
        assert!((s12 - s23).abs() < 1e-9, "{s12} vs {s23}");
        let fair = fairness_loss(&disc, &model, &x, &z, alpha).unwrap();
        assert!((l2 - (fair + s23)).abs() < 1e-9);
    }

    #[test]
    fn zero_iterations_returns_initialized_generator() {
        let model = tiny_model(10);
        let split = tiny_split(64, 11);
        let config = FaapConfig { iterations: 0, ..small_config() };
        let out = train_faap(&model, &split, &config, 1).unwrap();
        assert!(out.trace.is_empty());
        let fresh = PerturbationGenerator::init(&[3, 16, 16], &config, 1).unwrap();
        assert_eq!(out.generator.params(), fresh.params());
    }

    #[test]
    fn training_trace_is_bit_reproducible() {
        let model = tiny_model(12);
        let split = tiny_split(64, 13);
        let config = FaapConfig { iterations: 3, ..small_config() };
        let a = train_faap(&model, &split, &config, 5).unwrap();
        let b = train_faap(&model, &split, &config, 5).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.generator.params(), b.generator.params());
    }

    #[test]
    fn deployed_model_untouched_by_training() {
        let model = tiny_model(14);
        let before = model.checksum();
        let split = tiny_split(64, 15);
        let _ = train_faap(&model, &split, &small_config(), 2).unwrap();
        assert_eq!(model.checksum(), before);
    }

    #[test]
    fn unfrozen_model_is_rejected() {
        let extractor = extractor_net(&[3, 16, 16], [4, 6, 8]).unwrap();
        let head = head_net(extractor.output_shape()).unwrap();
        let mut rng = Stream::new(1);
        let pg = extractor.init_params(&mut rng);
        let pf = head.init_params(&mut rng);
        let model = DeployedModel::from_parts(
            extractor,
            head,
            pg,
            pf,
            false,
            ModelMeta { flavor: TrainFlavor::Normal, seed: 1, dataset_id: "t".into() },
        )
        .unwrap();
        let split = tiny_split(32, 1);
        assert!(matches!(
            train_faap(&model, &split, &small_config(), 1),
            Err(CoreError::FrozenViolation)
        ));
    }

    #[test]
    fn discriminator_step_ignores_alpha() {
        let model = tiny_model(16);
        let split = tiny_split(64, 17);
        let one_iter = |alpha: f64| {
            let config = FaapConfig { iterations: 1, alpha, ..small_config() };
            train_faap(&model, &split, &config, 9).unwrap()
        };
        let a = one_iter(0.0);
        let b = one_iter(1.0);
        let c = one_iter(10.0);
        // Bit-identical discriminator loss and parameter updates.
        assert_eq!(a.trace[0].l_d, b.trace[0].l_d);
        assert_eq!(b.trace[0].l_d, c.trace[0].l_d);
        assert_eq!(a.discriminators[0].params(), b.discriminators[0].params());
        assert_eq!(b.discriminators[0].params(), c.discriminators[0].params());
        // The generator, by contrast, does see α.
        assert_ne!(a.generator.params(), c.generator.params());
    }

    #[test]
    fn duplicated_ensemble_equals_single_model_run() {
        let model = tiny_model(18);
        let split = tiny_split(64, 19);
        let config = FaapConfig { iterations: 3, ..small_config() };
        let single = train_faap(&model, &split, &config, 4).unwrap();
        let double = train_faap_ensemble(&[&model, &model], &split, &config, 4).unwrap();
        assert_eq!(single.generator.params(), double.generator.params());
        for (s, d) in single.trace.iter().zip(double.trace.iter()) {
            assert!((s.l_d - d.l_d).abs() < 1e-12);
            assert!((s.l_g - d.l_g).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_needs_at_least_two_models() {
        let model = tiny_model(20);
        let split = tiny_split(32, 21);
        assert!(matches!(
            train_faap_ensemble(&[], &split, &small_config(), 1),
            Err(CoreError::EmptyInput)
        ));
        assert!(matches!(
            train_faap_ensemble(&[&model], &split, &small_config(), 1),
            Err(CoreError::TooFewSamples { got: 1, need: 2 })
        ));
    }

    #[test]
    fn budget_holds_for_mid_training_snapshots() {
        let model = tiny_model(22);
        let split = tiny_split(64, 23);
        let mut rng = Stream::new(24);
        let x = Tensor::from_vec(&[8, 3, 16, 16], (0..8 * 768).map(|_| rng.uniform()).collect());
        for iters in [0, 1, 2, 4] {
            let config = FaapConfig { iterations: iters, ..small_config() };
            let out = train_faap(&model, &split, &config, 7).unwrap();
            let xhat = out.generator.perturb(&x).unwrap();
            assert!(xhat.max_abs_diff(&x) <= 0.05 + 1e-6);
            assert!(xhat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
