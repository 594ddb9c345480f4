//! The learned scene: frequency-encoded inputs, twin coarse/fine MLPs, and
//! the photometric training loop that fits them to posed images.
//!
//! Each network maps an encoded position through a relu trunk; density reads
//! off the trunk alone (so it cannot depend on view direction), while color
//! passes the trunk features plus the encoded direction through one more
//! hidden layer into a sigmoid head.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::dataset::PosedImage;
use crate::render::{hierarchical_resample, stratified_ts, FieldEval, Ray};
use crate::tape::{NodeId, Tape};
use crate::tensor::{par_gemm, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("bad field input: {0}")]
    BadInput(String),
    #[error("bad field parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture knobs shared by the coarse and fine networks.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    pub l_pos: usize,
    pub l_dir: usize,
    pub depth: usize,
    pub width: usize,
    pub include_raw_input: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            l_pos: 10,
            l_dir: 4,
            depth: 4,
            width: 128,
            include_raw_input: true,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.depth < 1 {
            return Err(FieldError::BadParams("depth must be at least 1".into()));
        }
        if self.width < 8 {
            return Err(FieldError::BadParams(format!(
                "width {} below minimum 8",
                self.width
            )));
        }
        Ok(())
    }

    fn per_coord(&self, l: usize) -> usize {
        usize::from(self.include_raw_input) + 2 * l
    }

    pub fn pos_dim(&self) -> usize {
        3 * self.per_coord(self.l_pos)
    }

    pub fn dir_dim(&self) -> usize {
        3 * self.per_coord(self.l_dir)
    }

    fn color_hidden(&self) -> usize {
        self.width / 2
    }
}

/// Frequency encoding of one coordinate vector: per coordinate, the raw
/// value (optional) followed by sin/cos pairs at octave frequencies
/// 2^k * pi for k in 0..L. Octaves above the first come from the
/// angle-doubling identities rather than fresh sin/cos calls; the libm
/// calls would otherwise dominate training time.
pub fn positional_encode(p: &[f64], l: usize, include_raw: bool) -> Vec<f64> {
    let per = usize::from(include_raw) + 2 * l;
    let mut out = Vec::with_capacity(p.len() * per);
    for &v in p {
        if include_raw {
            out.push(v);
        }
        if l == 0 {
            continue;
        }
        let (mut s, mut c) = (PI * v).sin_cos();
        out.push(s);
        out.push(c);
        for _ in 1..l {
            (s, c) = (2.0 * s * c, 1.0 - 2.0 * s * s);
            out.push(s);
            out.push(c);
        }
    }
    out
}

/// Batch encoding into a network input matrix. `points` is xyz-interleaved,
/// length 3N; the result is [N, 3 * (raw + 2L)] in f32.
fn encode_batch(points: &[f64], l: usize, include_raw: bool) -> Tensor<f32> {
    let n = points.len() / 3;
    let per = usize::from(include_raw) + 2 * l;
    let dim = 3 * per;
    let mut out = vec![0.0f32; n * dim];
    for i in 0..n {
        let (xyz, row) = (
            &points[3 * i..3 * i + 3],
            &mut out[i * dim..(i + 1) * dim],
        );
        let mut at = 0;
        for &v in xyz {
            if include_raw {
                row[at] = v as f32;
                at += 1;
            }
            if l == 0 {
                continue;
            }
            let (mut s, mut c) = (PI * v).sin_cos();
            row[at] = s as f32;
            row[at + 1] = c as f32;
            at += 2;
            for _ in 1..l {
                (s, c) = (2.0 * s * c, 1.0 - 2.0 * s * s);
                row[at] = s as f32;
                row[at + 1] = c as f32;
                at += 2;
            }
        }
    }
    Tensor::new(vec![n, dim], out).expect("encode dims are consistent")
}

/// One network's weights, flat in a fixed order: trunk (w, b) pairs, then
/// the density head, the color hidden layer, and the color output head.
#[derive(Clone, Debug)]
pub struct Mlp {
    depth: usize,
    params: Vec<Tensor<f32>>,
}

impl Mlp {
    pub fn init(config: &FieldConfig, rng: &mut ChaCha8Rng) -> Mlp {
        let mut params = Vec::new();
        let mut push_layer = |out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng| {
            let s = (6.0 / in_dim as f64).sqrt() as f32;
            params.push(Tensor::rand_uniform(vec![out_dim, in_dim], -s, s, rng));
            params.push(Tensor::zeros(vec![out_dim]));
        };
        push_layer(config.width, config.pos_dim(), rng);
        for _ in 1..config.depth {
            push_layer(config.width, config.width, rng);
        }
        push_layer(1, config.width, rng);
        push_layer(config.color_hidden(), config.width + config.dir_dim(), rng);
        push_layer(3, config.color_hidden(), rng);
        Mlp {
            depth: config.depth,
            params,
        }
    }

    /// Rebuilds a network from externally stored tensors, checking the
    /// layout against the config.
    pub fn from_params(config: &FieldConfig, params: Vec<Tensor<f32>>) -> Result<Mlp, FieldError> {
        config.validate()?;
        let want = Self::expected_shapes(config);
        if params.len() != want.len() {
            return Err(FieldError::BadParams(format!(
                "expected {} tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for (i, (t, shape)) in params.iter().zip(&want).enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(FieldError::BadParams(format!(
                    "tensor {i}: shape {:?} does not match {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.all_finite() {
                return Err(FieldError::BadParams(format!("tensor {i}: non-finite value")));
            }
        }
        Ok(Mlp {
            depth: config.depth,
            params,
        })
    }

    fn expected_shapes(config: &FieldConfig) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut layer = |out: usize, inp: usize| {
            shapes.push(vec![out, inp]);
            shapes.push(vec![out]);
        };
        layer(config.width, config.pos_dim());
        for _ in 1..config.depth {
            layer(config.width, config.width);
        }
        layer(1, config.width);
        layer(config.color_hidden(), config.width + config.dir_dim());
        layer(3, config.color_hidden());
        shapes
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    fn sigma_at(&self) -> usize {
        2 * self.depth
    }

    /// Registers every parameter as a differentiable leaf; ids line up with
    /// [`Mlp::params`].
    fn register_leaves(&self, tape: &mut Tape<f32>) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect()
    }

    /// Forward pass on the tape. `x_enc` is [N, pos_dim], `d_enc` is
    /// [N, dir_dim]; returns (sigma [N,1], rgb [N,3]).
    fn forward_tape(
        &self,
        tape: &mut Tape<f32>,
        ids: &[NodeId],
        x_enc: NodeId,
        d_enc: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let mut h = x_enc;
        for i in 0..self.depth {
            let lin = tape.linear(h, ids[2 * i], ids[2 * i + 1])?;
            h = tape.relu(lin);
        }
        let s = self.sigma_at();
        let sigma_lin = tape.linear(h, ids[s], ids[s + 1])?;
        let sigma = tape.relu(sigma_lin);
        let cat = tape.concat_cols(h, d_enc)?;
        let ch_lin = tape.linear(cat, ids[s + 2], ids[s + 3])?;
        let ch = tape.relu(ch_lin);
        let rgb_lin = tape.linear(ch, ids[s + 4], ids[s + 5])?;
        let rgb = tape.sigmoid(rgb_lin);
        Ok((sigma, rgb))
    }

    /// Same computation without gradient bookkeeping. Returns rgb (3N,
    /// interleaved) and sigma (N).
    fn forward_inference(&self, x_enc: &Tensor<f32>, d_enc: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
        fn linear(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
            let (n, k) = (x.shape()[0], x.shape()[1]);
            let out = w.shape()[0];
            let mut y = vec![0.0f32; n * out];
            par_gemm(
                n,
                k,
                out,
                x.data(),
                k as isize,
                1,
                w.data(),
                1,
                k as isize,
                0.0,
                &mut y,
            );
            let bias = b.data();
            for r in 0..n {
                for c in 0..out {
                    y[r * out + c] += bias[c];
                }
            }
            Tensor::new(vec![n, out], y).expect("gemm output dims")
        }
        fn relu_inplace(t: &mut Tensor<f32>) {
            for v in t.data_mut() {
                *v = v.max(0.0);
            }
        }

        let n = x_enc.shape()[0];
        let mut h = linear(x_enc, &self.params[0], &self.params[1]);
        relu_inplace(&mut h);
        for i in 1..self.depth {
            h = linear(&h, &self.params[2 * i], &self.params[2 * i + 1]);
            relu_inplace(&mut h);
        }
        let s = self.sigma_at();
        let sigma_t = linear(&h, &self.params[s], &self.params[s + 1]);
        let sigma: Vec<f32> = sigma_t.data().iter().map(|v| v.max(0.0)).collect();

        let dirs = d_enc.data();
        let dir_dim = d_enc.shape()[1];
        let width = h.shape()[1];
        let mut cat = vec![0.0f32; n * (width + dir_dim)];
        for r in 0..n {
            cat[r * (width + dir_dim)..r * (width + dir_dim) + width]
                .copy_from_slice(&h.data()[r * width..(r + 1) * width]);
            cat[r * (width + dir_dim) + width..(r + 1) * (width + dir_dim)]
                .copy_from_slice(&dirs[r * dir_dim..(r + 1) * dir_dim]);
        }
        let cat = Tensor::new(vec![n, width + dir_dim], cat).expect("concat dims");
        let mut ch = linear(&cat, &self.params[s + 2], &self.params[s + 3]);
        relu_inplace(&mut ch);
        let rgb_lin = linear(&ch, &self.params[s + 4], &self.params[s + 5]);
        let rgb = rgb_lin
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        (rgb, sigma)
    }
}

/// Both networks plus the architecture they share.
#[derive(Clone, Debug)]
pub struct FieldParams {
    pub coarse: Mlp,
    pub fine: Mlp,
    pub config: FieldConfig,
}

impl FieldParams {
    pub fn init(config: FieldConfig, seed: u64) -> Result<FieldParams, FieldError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FieldParams {
            coarse: Mlp::init(&config, &mut rng),
            fine: Mlp::init(&config, &mut rng),
            config,
        })
    }

    pub fn coarse_eval(&self) -> MlpFieldEval<'_> {
        MlpFieldEval {
            mlp: &self.coarse,
            config: &self.config,
        }
    }

    pub fn fine_eval(&self) -> MlpFieldEval<'_> {
        MlpFieldEval {
            mlp: &self.fine,
            config: &self.config,
        }
    }
}

/// Adapter exposing one network to the volume renderer.
pub struct MlpFieldEval<'a> {
    mlp: &'a Mlp,
    config: &'a FieldConfig,
}

impl FieldEval for MlpFieldEval<'_> {
    fn eval_batch(&self, positions: &[f64], dirs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x_enc = encode_batch(positions, self.config.l_pos, self.config.include_raw_input);
        let d_enc = encode_batch(dirs, self.config.l_dir, self.config.include_raw_input);
        let (rgb, sigma) = self.mlp.forward_inference(&x_enc, &d_enc);
        (
            rgb.into_iter().map(f64::from).collect(),
            sigma.into_iter().map(f64::from).collect(),
        )
    }
}

/// Color and density of one network at a single point.
pub fn field_eval(
    mlp: &Mlp,
    config: &FieldConfig,
    x: [f64; 3],
    d: [f64; 3],
) -> Result<([f64; 3], f64), FieldError> {
    if !(x.iter().all(|v| v.is_finite()) && d.iter().all(|v| v.is_finite())) {
        return Err(FieldError::BadInput("non-finite input point".into()));
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(FieldError::BadInput(format!(
            "direction norm {norm} is not 1"
        )));
    }
    let eval = MlpFieldEval { mlp, config };
    let (rgb, sigma) = eval.eval_batch(&x, &d);
    Ok(([rgb[0], rgb[1], rgb[2]], sigma[0]))
}

/// Transmittance-weighted compositing on the tape, mirroring the inference
/// renderer's quadrature. `sigma` is [R,S], `rgb` is [R*S,3], `delta` the
/// per-sample segment lengths [R,S]. Returns (weights [R,S], colors [R,3]).
fn quadrature_on_tape(
    tape: &mut Tape<f32>,
    sigma: NodeId,
    rgb: NodeId,
    delta: NodeId,
    background: [f32; 3],
) -> Result<(NodeId, NodeId), TensorError> {
    let sd = tape.mul(sigma, delta)?;
    let neg_sd = tape.affine_scalar(sd, -1.0, 0.0);
    let seg_trans = tape.exp(neg_sd);
    let alpha = tape.affine_scalar(seg_trans, -1.0, 1.0);
    let cum = tape.cumsum_exclusive_rows(neg_sd)?;
    let trans = tape.exp(cum);
    let weights = tape.mul(trans, alpha)?;
    let colors = tape.composite(weights, rgb, background)?;
    Ok((weights, colors))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub iters: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub seed: u64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f32; 3],
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iters: 5000,
            batch_rays: 1024,
            lr: 5e-4,
            seed: 0,
            n_coarse: 64,
            n_fine: 64,
            near: 2.0,
            far: 6.0,
            background: [1.0, 1.0, 1.0],
        }
    }
}

pub struct FieldTraining {
    pub params: FieldParams,
    pub loss_trace: Vec<f64>,
}

struct RayBatch {
    positions: Vec<f64>,
    dirs: Vec<f64>,
    deltas: Vec<f32>,
}

fn gather_samples(rays: &[&Ray], ts_per_ray: &[Vec<f64>], t_far: f64) -> RayBatch {
    let s = ts_per_ray[0].len();
    let mut positions = Vec::with_capacity(rays.len() * s * 3);
    let mut dirs = Vec::with_capacity(rays.len() * s * 3);
    let mut deltas = Vec::with_capacity(rays.len() * s);
    for (ray, ts) in rays.iter().zip(ts_per_ray) {
        for (i, &t) in ts.iter().enumerate() {
            for c in 0..3 {
                positions.push(ray.origin[c] + t * ray.direction[c]);
                dirs.push(ray.direction[c]);
            }
            let next = if i + 1 < ts.len() { ts[i + 1] } else { t_far };
            deltas.push((next - t) as f32);
        }
    }
    RayBatch {
        positions,
        dirs,
        deltas,
    }
}

/// Fits coarse and fine networks to the dataset by minimizing the summed
/// coarse + fine photometric error on random ray batches.
pub fn train_field(
    dataset: &[PosedImage],
    config: &FieldConfig,
    opts: &TrainOptions,
) -> Result<FieldTraining, FieldError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(FieldError::BadInput("dataset is empty".into()));
    }
    if opts.iters == 0 || opts.batch_rays == 0 {
        return Err(FieldError::BadInput("iters and batch_rays must be positive".into()));
    }
    if opts.n_coarse < 2 {
        return Err(FieldError::BadInput("n_coarse must be at least 2".into()));
    }

    let mut all_rays: Vec<Ray> = Vec::new();
    let mut all_targets: Vec<[f32; 3]> = Vec::new();
    for view in dataset {
        all_rays.extend(view.rays(opts.near, opts.far));
        for y in 0..view.image.height() {
            for x in 0..view.image.width() {
                all_targets.push(view.image.get(x, y));
            }
        }
    }

    let mut params = FieldParams::init(config.clone(), opts.seed)?;
    let adam_cfg = AdamConfig::with_lr(opts.lr);
    let mut adam_coarse: Adam<f32> = Adam::new(adam_cfg)?;
    let mut adam_fine: Adam<f32> = Adam::new(adam_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut loss_trace = Vec::with_capacity(opts.iters);

    for iter in 0..opts.iters {
        let batch: Vec<usize> = (0..opts.batch_rays)
            .map(|_| rand::Rng::random_range(&mut rng, 0..all_rays.len()))
            .collect();
        let rays: Vec<&Ray> = batch.iter().map(|&i| &all_rays[i]).collect();
        let r = rays.len();
        let coarse_ts: Vec<Vec<f64>> = rays
            .iter()
            .map(|ray| stratified_ts(ray, opts.n_coarse, Some(&mut rng)))
            .collect();
        let coarse_batch = gather_samples(&rays, &coarse_ts, opts.far);

        let mut tape: Tape<f32> = Tape::new();
        let coarse_ids = params.coarse.register_leaves(&mut tape);
        let fine_ids = params.fine.register_leaves(&mut tape);

        let x_enc = tape.constant(encode_batch(
            &coarse_batch.positions,
            config.l_pos,
            config.include_raw_input,
        ));
        let d_enc = tape.constant(encode_batch(
            &coarse_batch.dirs,
            config.l_dir,
            config.include_raw_input,
        ));
        let (sigma_c, rgb_c) = params.coarse.forward_tape(&mut tape, &coarse_ids, x_enc, d_enc)?;
        let sigma_rs = tape.reshape(sigma_c, vec![r, opts.n_coarse])?;
        let delta_c = tape.constant(
            Tensor::new(vec![r, opts.n_coarse], coarse_batch.deltas.clone())
                .expect("delta dims"),
        );
        let (weights_c, comp_c) =
            quadrature_on_tape(&mut tape, sigma_rs, rgb_c, delta_c, opts.background)?;

        let mut target_flat = Vec::with_capacity(3 * r);
        for &i in &batch {
            target_flat.extend_from_slice(&all_targets[i]);
        }
        let target = tape.constant(Tensor::new(vec![r, 3], target_flat).expect("target dims"));
        let loss_c = tape.mse(comp_c, target)?;

        let n_union = opts.n_coarse + opts.n_fine;
        let weight_rows = tape.value(weights_c).data().to_vec();
        let union_ts: Vec<Vec<f64>> = rays
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut edges = coarse_ts[i].clone();
                edges.push(opts.far);
                let w: Vec<f64> = weight_rows
                    [i * opts.n_coarse..(i + 1) * opts.n_coarse]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let fine = hierarchical_resample(&edges, &w, opts.n_fine, Some(&mut rng));
                let mut merged = coarse_ts[i].clone();
                merged.extend(fine);
                merged.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                merged
            })
            .collect();
        let fine_batch = gather_samples(&rays, &union_ts, opts.far);
        let xf_enc = tape.constant(encode_batch(
            &fine_batch.positions,
            config.l_pos,
            config.include_raw_input,
        ));
        let df_enc = tape.constant(encode_batch(
            &fine_batch.dirs,
            config.l_dir,
            config.include_raw_input,
        ));
        let (sigma_f, rgb_f) = params.fine.forward_tape(&mut tape, &fine_ids, xf_enc, df_enc)?;
        let sigma_fs = tape.reshape(sigma_f, vec![r, n_union])?;
        let delta_f = tape.constant(
            Tensor::new(vec![r, n_union], fine_batch.deltas.clone()).expect("delta dims"),
        );
        let (_, comp_f) = quadrature_on_tape(&mut tape, sigma_fs, rgb_f, delta_f, opts.background)?;
        let loss_f = tape.mse(comp_f, target)?;

        let loss = tape.add(loss_c, loss_f)?;
        let loss_value = f64::from(tape.value(loss).data()[0]);
        if !loss_value.is_finite() {
            return Err(FieldError::BadParams(format!(
                "loss diverged to {loss_value} at iteration {iter}"
            )));
        }
        loss_trace.push(loss_value);
        tape.backward(loss)?;

        let grads = |tape: &mut Tape<f32>, ids: &[NodeId], mlp: &Mlp| -> Vec<Tensor<f32>> {
            ids.iter()
                .enumerate()
                .map(|(i, &id)| {
                    tape.take_grad(id)
                        .unwrap_or_else(|| Tensor::zeros(mlp.params()[i].shape().to_vec()))
                })
                .collect()
        };
        let g_coarse = grads(&mut tape, &coarse_ids, &params.coarse);
        let g_fine = grads(&mut tape, &fine_ids, &params.fine);
        adam_coarse.step(params.coarse.params_mut(), &g_coarse)?;
        adam_fine.step(params.fine.params_mut(), &g_fine)?;
    }

    Ok(FieldTraining {
        params,
        loss_trace,
    })
}
