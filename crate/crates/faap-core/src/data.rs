//! Dataset types, the planted-bias synthetic generator, and label flipping.
//!
//! Synthetic images carry two spatially disjoint visual cues: the target
//! label is rendered as a bright/dark square patch (faint on a fraction of
//! samples, so a classifier gains from side information), and the protected
//! attribute as a red/blue color band along the bottom. The correlation
//! between the two is set by [`BiasSpec::correlation`], which gives ground
//! truth for bias measurement: a model that leans on the color band shows up
//! as an error-rate gap on the correlation-free test split.
//!
//! Every sample is produced from its own RNG stream keyed by `(seed, index)`,
//! so generation is order-independent and regenerable bit-exactly. Pixels are
//! quantized to the 8-bit grid at creation, which makes the in-memory dataset
//! identical to one round-tripped through image files.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::Stream;
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Fraction of samples whose label cue is rendered too faint to read.
pub const AMBIGUOUS_FRACTION: f64 = 0.25;

/// Channel shift of the protected-attribute color band at `cue_strength` 1.
pub const GROUP_CUE_SHIFT: f64 = 0.12;

/// Brightness offset of the label patch at full contrast.
pub const LABEL_CUE_CONTRAST: f64 = 0.35;

const SPLIT_SALT: u64 = 0x9a17_0000_0000_5017;
const FLIP_SALT: u64 = 0xf11b_f11b;

/// One image with its target label and protected attribute.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// Stable identity used for split disjointness and on-disk naming.
    pub id: String,
    /// Pixels `[c, h, w]` in [0, 1].
    pub image: Tensor,
    /// Target label in {-1, +1}.
    pub y: i8,
    /// Protected attribute in {-1, +1}.
    pub z: i8,
}

/// The four roles a split plays in the experiment protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    DeployedTrain,
    FaapTrain,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::DeployedTrain => "deployed_train",
            SplitName::FaapTrain => "faap_train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

/// An ordered collection of samples with the seed that produced it.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<LabeledSample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[c, h, w]` of the first sample; splits hold uniform shapes.
    pub fn image_shape(&self) -> &[usize] {
        self.samples[0].image.shape()
    }
}

/// The full split set used by one experiment.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub deployed_train: DatasetSplit,
    pub faap_train: DatasetSplit,
    pub validation: DatasetSplit,
    pub test: DatasetSplit,
}

impl SplitSet {
    pub fn splits(&self) -> [&DatasetSplit; 4] {
        [&self.deployed_train, &self.faap_train, &self.validation, &self.test]
    }
}

/// Requested joint distribution of (y, z) plus rendering knobs.
#[derive(Debug, Clone, Copy)]
pub struct BiasSpec {
    /// Pearson correlation between y and z in the training distribution.
    pub correlation: f64,
    /// P(y = +1).
    pub positive_rate: f64,
    /// P(z = +1).
    pub group_rate: f64,
    /// Training-pool size (halved into deployed/faap splits).
    pub n: usize,
    /// Scales how visibly z is rendered; 0 removes the cue entirely.
    pub cue_strength: f64,
}

/// Joint probability table over (y, z) in {-1,+1}².
#[derive(Debug, Clone, Copy)]
struct JointTable {
    /// P(+1,+1), P(+1,-1), P(-1,+1), P(-1,-1).
    cells: [f64; 4],
}

impl JointTable {
    fn from_spec(rho: f64, p: f64, q: f64) -> Result<JointTable, CoreError> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(CoreError::InvalidSpec(format!("correlation {rho} outside [-1,1]")));
        }
        for (name, v) in [("positive_rate", p), ("group_rate", q)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::InvalidSpec(format!("{name} {v} outside [0,1]")));
            }
        }
        let s = (p * (1.0 - p) * q * (1.0 - q)).sqrt();
        let cells = [
            p * q + rho * s,
            p * (1.0 - q) - rho * s,
            (1.0 - p) * q - rho * s,
            (1.0 - p) * (1.0 - q) + rho * s,
        ];
        if cells.iter().any(|&c| c < -1e-12) {
            return Err(CoreError::InvalidSpec(format!(
                "joint table not realizable: rho={rho}, p={p}, q={q} gives {cells:?}"
            )));
        }
        Ok(JointTable { cells: cells.map(|c| c.max(0.0)) })
    }

    fn draw(&self, rng: &mut Stream) -> (i8, i8) {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, &c) in self.cells.iter().enumerate() {
            acc += c;
            if u < acc {
                return [(1, 1), (1, -1), (-1, 1), (-1, -1)][i];
            }
        }
        (-1, -1)
    }
}

/// Bounding box (row0, col0, row1, col1), half-open, of the label-cue patch.
pub fn label_cue_box(image_size: usize) -> (usize, usize, usize, usize) {
    let start = image_size / 8;
    let side = 7 * image_size / 16;
    (start, start, start + side, start + side)
}

/// Rows (half-open) of the protected-attribute color band.
pub fn group_cue_rows(image_size: usize) -> (usize, usize) {
    (image_size - image_size / 4 - 2, image_size - 2)
}

/// Quantize to the 8-bit pixel grid, clamped to [0, 1].
fn quantize(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    (v * 255.0).round() / 255.0
}

fn render_sample(y: i8, z: i8, image_size: usize, cue_strength: f64, rng: &mut Stream) -> Tensor {
    let s = image_size;
    let mut img = Tensor::zeros(&[3, s, s]);
    let (r0, c0, r1, c1) = label_cue_box(s);
    let (band0, band1) = group_cue_rows(s);

    // Faint-cue samples force the classifier to look for side information.
    let contrast = if rng.chance(AMBIGUOUS_FRACTION) {
        rng.uniform_in(0.0, 0.15)
    } else {
        rng.uniform_in(0.8, 1.0)
    };
    let patch = y as f64 * contrast * LABEL_CUE_CONTRAST;
    let band = z as f64 * cue_strength * GROUP_CUE_SHIFT;

    let data = img.data_mut();
    for ch in 0..3 {
        for row in 0..s {
            for col in 0..s {
                let mut v = 0.5 + rng.uniform_in(-0.05, 0.05);
                if row >= r0 && row < r1 && col >= c0 && col < c1 {
                    v += patch;
                }
                if row >= band0 && row < band1 {
                    // Red shifts up and blue down for z=+1, mirrored for z=-1.
                    match ch {
                        0 => v += band,
                        2 => v -= band,
                        _ => {}
                    }
                }
                data[(ch * s + row) * s + col] = quantize(v);
            }
        }
    }
    img
}

fn generate_block(
    table: &JointTable,
    count: usize,
    image_size: usize,
    cue_strength: f64,
    seed: u64,
    index_base: u64,
    id_prefix: &str,
) -> Vec<LabeledSample> {
    (0..count)
        .map(|i| {
            let mut rng = Stream::for_sample(seed, index_base + i as u64);
            let (y, z) = table.draw(&mut rng);
            LabeledSample {
                id: format!("{id_prefix}-{i:06}"),
                image: render_sample(y, z, image_size, cue_strength, &mut rng),
                y,
                z,
            }
        })
        .collect()
}

/// Generate the four-split planted-bias dataset.
///
/// Training-pool samples follow the requested joint distribution and are
/// halved (seeded shuffle) into deployed-model and perturbation-training
/// splits; the validation split follows the same distribution; the test
/// split is generated with zero correlation so unfair behavior is measurable.
pub fn generate_planted_bias_dataset(
    spec: &BiasSpec,
    image_size: usize,
    seed: u64,
) -> Result<SplitSet, CoreError> {
    if spec.n < 2 {
        return Err(CoreError::InvalidSpec("training pool needs at least 2 samples".into()));
    }
    if spec.cue_strength < 0.0 {
        return Err(CoreError::InvalidSpec("cue_strength must be non-negative".into()));
    }
    if image_size < 16 {
        return Err(CoreError::InvalidSpec("image_size must be at least 16".into()));
    }
    let table = JointTable::from_spec(spec.correlation, spec.positive_rate, spec.group_rate)?;
    let balanced = JointTable::from_spec(0.0, spec.positive_rate, spec.group_rate)?;

    let n_val = (spec.n / 8).max(128);
    let n_test = (spec.n / 2).max(512);

    let train = generate_block(&table, spec.n, image_size, spec.cue_strength, seed, 0, "train");
    let val = generate_block(
        &table,
        n_val,
        image_size,
        spec.cue_strength,
        seed,
        spec.n as u64,
        "val",
    );
    let test = generate_block(
        &balanced,
        n_test,
        image_size,
        spec.cue_strength,
        seed,
        (spec.n + n_val) as u64,
        "test",
    );

    let (deployed_train, faap_train) = split_training_pool(train, seed);
    Ok(SplitSet {
        deployed_train,
        faap_train,
        validation: DatasetSplit { name: SplitName::Validation, samples: val, seed },
        test: DatasetSplit { name: SplitName::Test, samples: test, seed },
    })
}

fn split_training_pool(pool: Vec<LabeledSample>, seed: u64) -> (DatasetSplit, DatasetSplit) {
    let mut rng = Stream::new(seed ^ SPLIT_SALT);
    let perm = rng.permutation(pool.len());
    let half = pool.len() / 2;
    let mut taken: Vec<Option<LabeledSample>> = pool.into_iter().map(Some).collect();
    let mut deployed = Vec::with_capacity(half);
    let mut faap = Vec::with_capacity(taken.len() - half);
    for (slot, &idx) in perm.iter().enumerate() {
        let sample = taken[idx].take().expect("permutation visits each index once");
        if slot < half {
            deployed.push(sample);
        } else {
            faap.push(sample);
        }
    }
    (
        DatasetSplit { name: SplitName::DeployedTrain, samples: deployed, seed },
        DatasetSplit { name: SplitName::FaapTrain, samples: faap, seed },
    )
}

/// Empirical Pearson correlation of (y, z) over a sample list.
pub fn empirical_correlation(samples: &[LabeledSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mean_y: f64 = samples.iter().map(|s| s.y as f64).sum::<f64>() / n;
    let mean_z: f64 = samples.iter().map(|s| s.z as f64).sum::<f64>() / n;
    let cov: f64 =
        samples.iter().map(|s| (s.y as f64 - mean_y) * (s.z as f64 - mean_z)).sum::<f64>() / n;
    let var_y: f64 = samples.iter().map(|s| (s.y as f64 - mean_y).powi(2)).sum::<f64>() / n;
    let var_z: f64 = samples.iter().map(|s| (s.z as f64 - mean_z).powi(2)).sum::<f64>() / n;
    if var_y == 0.0 || var_z == 0.0 {
        return 0.0;
    }
    cov / (var_y * var_z).sqrt()
}

/// Flip target labels to strengthen the y–z correlation.
///
/// Uniform flipping would add noise rather than bias, so only samples whose
/// (y, z) pair opposes the split's majority correlation are eligible; each
/// eligible label flips independently with probability `flip_rate`.
pub fn flip_labels(
    split: &DatasetSplit,
    flip_rate: f64,
    seed: u64,
) -> Result<DatasetSplit, CoreError> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(CoreError::InvalidConfig(format!("flip_rate {flip_rate} outside [0,1]")));
    }
    let majority: i32 = if empirical_correlation(&split.samples) < 0.0 { -1 } else { 1 };
    let samples = split
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut out = s.clone();
            if (s.y * s.z) as i32 != majority {
                let mut rng = Stream::for_sample(seed ^ FLIP_SALT, i as u64);
                if rng.chance(flip_rate) {
                    out.y = -out.y;
                }
            }
            out
        })
        .collect();
    Ok(DatasetSplit { name: split.name, samples, seed })
}

/// Partition `n` sample indices into the four-split protocol: a test
/// fraction, a validation fraction, and the rest halved into deployed-model
/// and perturbation-training splits. Deterministic in `seed`; the four parts
/// are disjoint and exhaustive.
pub fn partition_indices(
    n: usize,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<[Vec<usize>; 4], CoreError> {
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(CoreError::InvalidConfig(format!(
            "invalid split fractions: val={val_fraction}, test={test_fraction}"
        )));
    }
    let mut rng = Stream::new(seed ^ 0xcafe_0001);
    let perm = rng.permutation(n);
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_train = n - n_test - n_val;
    let half = n_train / 2;
    Ok([
        perm[..half].to_vec(),
        perm[half..n_train].to_vec(),
        perm[n_train..n_train + n_val].to_vec(),
        perm[n_train + n_val..].to_vec(),
    ])
}
