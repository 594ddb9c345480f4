//! The backdoor decoder: a small CNN deliberately overfit to one image.
//!
//! Training repeats full-batch steps on a single (secret image, bit planes)
//! pair until thresholding the sigmoid outputs reproduces every bit. Off the
//! secret view the outputs are near-chance, which is the point: the mapping
//! only exists at the keyed viewpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::codec::{decoding_accuracy, BitPlanes, CodecError};
use crate::img::Image;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ExtractorError {
    #[error("bad extractor config: {0}")]
    BadConfig(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Network geometry. `depth_planes` is the number of bit planes D the output
/// head predicts; every hidden size has a default matching the reference
/// architecture.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ExtractorConfig {
    pub depth_planes: usize,
    pub height: usize,
    pub width: usize,
    pub pool: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub fc_hidden: usize,
}

/// Per-stage spatial sizes implied by a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    pub conv1_hw: (usize, usize),
    pub pool_hw: (usize, usize),
    pub conv2_hw: (usize, usize),
    pub flat: usize,
    pub out: usize,
}

impl ExtractorConfig {
    /// 64x64 bit planes with 3x3 pooling: the size used throughout tests.
    pub fn desk(depth_planes: usize) -> Self {
        Self {
            depth_planes,
            height: 64,
            width: 64,
            pool: 3,
            conv1_channels: 64,
            conv2_channels: 128,
            fc_hidden: 256,
        }
    }

    /// 180x180 planes with 9x9 pooling.
    pub fn full_scale(depth_planes: usize) -> Self {
        Self {
            depth_planes,
            height: 180,
            width: 180,
            pool: 9,
            conv1_channels: 64,
            conv2_channels: 128,
            fc_hidden: 256,
        }
    }

    /// Walks the feature shapes stage by stage, failing if any collapses.
    pub fn dims(&self) -> Result<FeatureDims, ExtractorError> {
        let bad = |msg: String| Err(ExtractorError::BadConfig(msg));
        if self.depth_planes == 0 {
            return bad("depth_planes must be at least 1".into());
        }
        if self.pool == 0 || self.conv1_channels == 0 || self.conv2_channels == 0
            || self.fc_hidden == 0
        {
            return bad("zero-sized stage".into());
        }
        let conv = |h: usize, w: usize, k: usize| -> Option<(usize, usize)> {
            (h >= k && w >= k).then(|| (h - k + 1, w - k + 1))
        };
        let Some(c1) = conv(self.height, self.width, 5) else {
            return bad(format!("{}x{} too small for the 5x5 conv", self.height, self.width));
        };
        if c1.0 < self.pool || c1.1 < self.pool {
            return bad(format!("conv1 output {c1:?} smaller than pool {}", self.pool));
        }
        let pool = (
            (c1.0 - self.pool) / self.pool + 1,
            (c1.1 - self.pool) / self.pool + 1,
        );
        let Some(c2) = conv(pool.0, pool.1, 3) else {
            return bad(format!("pooled map {pool:?} too small for the 3x3 conv"));
        };
        Ok(FeatureDims {
            conv1_hw: c1,
            pool_hw: pool,
            conv2_hw: c2,
            flat: self.conv2_channels * c2.0 * c2.1,
            out: self.depth_planes * self.height * self.width,
        })
    }
}

/// Weights in a fixed order: conv1 (k, b), conv2 (k, b), fc_hidden (w, b),
/// output head (w, b).
#[derive(Clone, Debug)]
pub struct ExtractorParams {
    pub config: ExtractorConfig,
    params: Vec<Tensor<f32>>,
}

impl ExtractorParams {
    /// Layers start at U(+-1/sqrt(fan_in)) with zero biases; the output
    /// head gets an extra 0.25 gain. The head scale is load-bearing: a
    /// zero head converges in one optimizer step (each logit's first move
    /// lands on the correct side of the threshold), while a full-scale
    /// head starts logits so large that flipping the worst one takes tens
    /// of thousands of epochs at the default learning rate. 0.25 puts
    /// epochs-to-exact in the hundreds, where overfit dynamics are
    /// actually observable.
    pub fn init(config: ExtractorConfig, seed: u64) -> Result<Self, ExtractorError> {
        let dims = config.dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = |shape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng| {
            let s = (gain / (fan_in as f64).sqrt()) as f32;
            Tensor::rand_uniform(shape, -s, s, rng)
        };
        let params = vec![
            uniform(vec![config.conv1_channels, 3, 5, 5], 3 * 25, 1.0, &mut rng),
            Tensor::zeros(vec![config.conv1_channels]),
            uniform(
                vec![config.conv2_channels, config.conv1_channels, 3, 3],
                config.conv1_channels * 9,
                1.0,
                &mut rng,
            ),
            Tensor::zeros(vec![config.conv2_channels]),
            uniform(vec![config.fc_hidden, dims.flat], dims.flat, 1.0, &mut rng),
            Tensor::zeros(vec![config.fc_hidden]),
            uniform(
                vec![dims.out, config.fc_hidden],
                config.fc_hidden,
                0.25,
                &mut rng,
            ),
            Tensor::zeros(vec![dims.out]),
        ];
        Ok(Self { config, params })
    }

    pub fn from_params(
        config: ExtractorConfig,
        params: Vec<Tensor<f32>>,
    ) -> Result<Self, ExtractorError> {
        let dims = config.dims()?;
        let want: Vec<Vec<usize>> = vec![
            vec![config.conv1_channels, 3, 5, 5],
            vec![config.conv1_channels],
            vec![config.conv2_channels, config.conv1_channels, 3, 3],
            vec![config.conv2_channels],
            vec![config.fc_hidden, dims.flat],
            vec![config.fc_hidden],
            vec![dims.out, config.fc_hidden],
            vec![dims.out],
        ];
        if params.len() != want.len() {
            return Err(ExtractorError::BadConfig(format!(
                "expected {} tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for (i, (t, w)) in params.iter().zip(&want).enumerate() {
            if t.shape() != w.as_slice() {
                return Err(ExtractorError::BadConfig(format!(
                    "tensor {i}: shape {:?} does not match {:?}",
                    t.shape(),
                    w
                )));
            }
            if !t.all_finite() {
                return Err(ExtractorError::BadConfig(format!("tensor {i}: non-finite value")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }
}

fn check_image(config: &ExtractorConfig, image: &Image) -> Result<(), ExtractorError> {
    if image.width() != config.width || image.height() != config.height {
        return Err(ExtractorError::DimMismatch(format!(
            "image {}x{} does not match extractor input {}x{}",
            image.width(),
            image.height(),
            config.width,
            config.height
        )));
    }
    Ok(())
}

fn forward_graph(
    tape: &mut Tape<f32>,
    ids: &[NodeId],
    image: NodeId,
    config: &ExtractorConfig,
    dims: &FeatureDims,
) -> Result<NodeId, TensorError> {
    let c1 = tape.conv2d(image, ids[0], ids[1], 1, 0)?;
    let r1 = tape.relu(c1);
    let p = tape.maxpool2d(r1, config.pool, config.pool)?;
    let c2 = tape.conv2d(p, ids[2], ids[3], 1, 0)?;
    let r2 = tape.relu(c2);
    let flat = tape.reshape(r2, vec![dims.flat])?;
    let h_lin = tape.linear(flat, ids[4], ids[5])?;
    let h = tape.relu(h_lin);
    let out_lin = tape.linear(h, ids[6], ids[7])?;
    Ok(tape.sigmoid(out_lin))
}

/// Bit probabilities for an image, shaped [D, H, W].
pub fn extractor_forward(
    params: &ExtractorParams,
    image: &Image,
) -> Result<Tensor<f32>, ExtractorError> {
    check_image(&params.config, image)?;
    let dims = params.config.dims()?;
    let mut tape: Tape<f32> = Tape::new();
    let ids: Vec<NodeId> = params
        .params
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let img = tape.constant(image.to_tensor());
    let probs = forward_graph(&mut tape, &ids, img, &params.config, &dims)?;
    Ok(tape.value(probs).clone().reshaped(vec![
        params.config.depth_planes,
        params.config.height,
        params.config.width,
    ])?)
}

fn threshold(probs: &[f32]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

/// Hard decisions: probability at least one half reads as a one.
pub fn extract_bits(params: &ExtractorParams, image: &Image) -> Result<BitPlanes, ExtractorError> {
    let probs = extractor_forward(params, image)?;
    Ok(BitPlanes::from_raw_bits(
        threshold(probs.data()),
        params.config.depth_planes,
        params.config.height,
        params.config.width,
    )?)
}

#[derive(Clone, Debug)]
pub struct ExtractorTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop as soon as thresholded accuracy hits 1.0 instead of running all
    /// epochs.
    pub stop_when_exact: bool,
}

impl Default for ExtractorTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-5,
            seed: 0,
            stop_when_exact: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub loss: f64,
    pub acc: f64,
}

pub struct ExtractorTraining {
    pub params: ExtractorParams,
    pub trace: Vec<EpochStats>,
    /// Update steps taken before the network first reproduced every bit.
    pub first_exact_epoch: Option<usize>,
}

/// Overfits the extractor to a single (image, planes) pair with full-batch
/// Adam steps on the mean squared error of Fig-style bit probabilities.
pub fn train_extractor(
    secret_image: &Image,
    planes: &BitPlanes,
    config: &ExtractorConfig,
    opts: &ExtractorTrainOptions,
) -> Result<ExtractorTraining, ExtractorError> {
    let state = ExtractorParams::init(config.clone(), opts.seed)?;
    train_extractor_from(state, secret_image, planes, opts)
}

/// Warm-start variant: continue (or begin) training from explicit weights.
pub fn train_extractor_from(
    mut state: ExtractorParams,
    secret_image: &Image,
    planes: &BitPlanes,
    opts: &ExtractorTrainOptions,
) -> Result<ExtractorTraining, ExtractorError> {
    let config = state.config.clone();
    let config = &config;
    check_image(config, secret_image)?;
    if planes.depth() != config.depth_planes
        || planes.height() != config.height
        || planes.width() != config.width
    {
        return Err(ExtractorError::DimMismatch(format!(
            "planes {}x{}x{} do not match extractor output {}x{}x{}",
            planes.depth(),
            planes.height(),
            planes.width(),
            config.depth_planes,
            config.height,
            config.width
        )));
    }
    if opts.epochs == 0 {
        return Err(ExtractorError::BadConfig("epochs must be at least 1".into()));
    }
    let dims = config.dims()?;
    let mut adam: Adam<f32> = Adam::new(AdamConfig::with_lr(opts.lr))?;
    let image_tensor = secret_image.to_tensor();
    let target_bits = planes.bits().to_vec();
    let target_tensor = Tensor::new(vec![dims.out], planes.to_f32_vec()).expect("plane dims");

    let mut trace = Vec::new();
    let mut first_exact = None;
    for epoch in 0..opts.epochs {
        let mut tape: Tape<f32> = Tape::new();
        let ids: Vec<NodeId> = state
            .params
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let img = tape.constant(image_tensor.clone());
        let probs = forward_graph(&mut tape, &ids, img, config, &dims)?;
        let target = tape.constant(target_tensor.clone());
        let loss = tape.mse(probs, target)?;

        let loss_value = f64::from(tape.value(loss).data()[0]);
        if !loss_value.is_finite() {
            return Err(ExtractorError::Diverged { epoch });
        }
        let bits = threshold(tape.value(probs).data());
        let acc = decoding_accuracy(&bits, &target_bits)?;
        trace.push(EpochStats {
            loss: loss_value,
            acc,
        });
        if acc == 1.0 {
            if first_exact.is_none() {
                first_exact = Some(epoch);
            }
            if opts.stop_when_exact {
                break;
            }
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                tape.take_grad(id)
                    .unwrap_or_else(|| Tensor::zeros(state.params[i].shape().to_vec()))
            })
            .collect();
        adam.step(state.params_mut(), &grads)?;
    }

    Ok(ExtractorTraining {
        params: state,
        trace,
        first_exact_epoch: first_exact,
    })
}
