//! Finite-difference checks of the four training losses on a miniature
//! model: the discriminator loss w.r.t. D's parameters and the generator
//! objective (fairness term, target term, total) w.r.t. G's parameters,
//! back through the perturbation clamp and the frozen extractor.

use faap_core::faap::{
    discriminator_loss, discriminator_loss_gradient, fairness_loss, generator_loss_gradient,
    generator_total_loss, target_loss, AttributeDiscriminator, FaapConfig, PerturbationGenerator,
};
use faap_core::model::{DeployedModel, ModelMeta, TrainFlavor};
use faap_core::nn::{Block, Net};
use faap_core::rng::Stream;
use faap_core::Tensor;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

/// Miniature frozen subject: 2-conv extractor, linear head, 8×8 inputs.
fn miniature_model(seed: u64) -> DeployedModel {
    let extractor = Net::new(
        &[3, 8, 8],
        vec![
            Block::Conv { in_c: 3, out_c: 4, kernel: 3, stride: 1, pad: 1 },
            Block::Tanh,
            Block::Conv { in_c: 4, out_c: 6, kernel: 3, stride: 2, pad: 1 },
            Block::Tanh,
        ],
    )
    .unwrap();
    let head = Net::new(
        &[6, 4, 4],
        vec![Block::GlobalAvgPool, Block::Linear { in_dim: 6, out_dim: 2 }],
    )
    .unwrap();
    let mut rng = Stream::new(seed);
    let params_g = extractor.init_params(&mut rng);
    let params_f = head.init_params(&mut rng);
    DeployedModel::from_parts(
        extractor,
        head,
        params_g,
        params_f,
        true,
        ModelMeta { flavor: TrainFlavor::Normal, seed, dataset_id: "miniature".into() },
    )
    .unwrap()
}

fn config() -> FaapConfig {
    FaapConfig { gen_widths: [4, 6], disc_hidden: 6, ..FaapConfig::default() }
}

/// Interior pixels keep x̂ away from the 0/1 clamp so the loss is smooth.
fn interior_batch(n: usize, seed: u64) -> Tensor {
    let mut rng = Stream::new(seed);
    Tensor::from_vec(
        &[n, 3, 8, 8],
        (0..n * 3 * 8 * 8).map(|_| rng.uniform_in(0.2, 0.8)).collect(),
    )
}

fn labels(n: usize, seed: u64) -> (Vec<i8>, Vec<i8>) {
    let mut rng = Stream::new(seed);
    let y = (0..n).map(|_| if rng.chance(0.5) { 1 } else { -1 }).collect();
    let z = (0..n).map(|_| if rng.chance(0.5) { 1 } else { -1 }).collect();
    (y, z)
}

fn directional_check(
    analytic_grad: &[f64],
    loss_at: impl Fn(&[f64]) -> f64,
    params: &[f64],
    rng: &mut Stream,
    what: &str,
    directions: usize,
) {
    for dir in 0..directions {
        let d: Vec<f64> = (0..params.len()).map(|_| rng.normal()).collect();
        let analytic: f64 = analytic_grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        let mut plus = params.to_vec();
        let mut minus = params.to_vec();
        for i in 0..params.len() {
            plus[i] += STEP * d[i];
            minus[i] -= STEP * d[i];
        }
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel < REL_TOL,
            "{what} direction {dir}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {rel:.2e})"
        );
    }
}

#[test]
fn discriminator_loss_gradient_matches_finite_differences() {
    let model = miniature_model(1);
    let disc = AttributeDiscriminator::init(model.feature_shape(), 6, 2).unwrap();
    let x = interior_batch(4, 3);
    let (_, z) = labels(4, 4);

    let (l_d, grad) = discriminator_loss_gradient(&disc, &model, &x, &z).unwrap();
    assert!(l_d > 0.0);

    let mut rng = Stream::new(5);
    directional_check(
        &grad,
        |p| {
            let d = AttributeDiscriminator::from_parts(disc.net().clone(), p.to_vec()).unwrap();
            discriminator_loss(&d, &model, &x, &z).unwrap()
        },
        disc.params(),
        &mut rng,
        "L_D",
        10,
    );
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let model = miniature_model(6);
    let disc = AttributeDiscriminator::init(model.feature_shape(), 6, 7).unwrap();
    let generator = PerturbationGenerator::init(&[3, 8, 8], &config(), 8).unwrap();
    let x = interior_batch(4, 9);
    let (y, z) = labels(4, 10);
    let alpha = 0.1;
    let beta = 1.0;

    let loss_with = |p: &[f64], fair_w: f64, beta_w: f64| {
        let g = PerturbationGenerator::from_parts(generator.net().clone(), p.to_vec(), 0.05)
            .unwrap();
        let xhat = g.perturb(&x).unwrap();
        fair_w * fairness_loss(&disc, &model, &xhat, &z, alpha).unwrap()
            + beta_w * target_loss(&model, &xhat, &y).unwrap()
    };

    // L_G^fair alone.
    let (_, grad_fair) =
        generator_loss_gradient(&generator, &disc, &model, &x, &y, &z, alpha, 0.0, 1.0).unwrap();
    let mut rng = Stream::new(11);
    directional_check(&grad_fair, |p| loss_with(p, 1.0, 0.0), generator.params(), &mut rng, "L_G_fair", 8);

    // L_G^T alone.
    let (_, grad_t) =
        generator_loss_gradient(&generator, &disc, &model, &x, &y, &z, alpha, 1.0, 0.0).unwrap();
    directional_check(&grad_t, |p| loss_with(p, 0.0, 1.0), generator.params(), &mut rng, "L_G_T", 8);

    // Full objective.
    let (losses, grad_total) =
        generator_loss_gradient(&generator, &disc, &model, &x, &y, &z, alpha, beta, 1.0).unwrap();
    directional_check(
        &grad_total,
        |p| loss_with(p, 1.0, beta),
        generator.params(),
        &mut rng,
        "L_G",
        8,
    );

    // Loss bookkeeping agrees with the standalone loss surface.
    let xhat = generator.perturb(&x).unwrap();
    let total = generator_total_loss(&disc, &model, &xhat, &y, &z, alpha, beta).unwrap();
    assert!((losses.total - total).abs() < 1e-12);
}
