//! Shared helpers for integration tests: a central finite-difference gradient
//! checker and the catalogue of autodiff primitives it runs against.
#![allow(dead_code)]

use nerfstego::tape::{NodeId, Tape};
use nerfstego::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

/// Builds the scalar loss from leaves the harness registered. Any randomness
/// (targets, constants) must be captured at construction so repeated calls see
/// identical graphs.
pub type LossBuilder = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: LossBuilder,
}

/// Compares reverse-mode gradients against central finite differences and
/// returns the worst relative error over every element of every input.
///
/// Each element's discrepancy is normalized by the largest gradient magnitude
/// seen in the same tensor (an infinity-norm relative error). A per-element
/// quotient would be ill-posed: wherever the true derivative passes near
/// zero, central differencing at a fixed step leaves pure truncation noise in
/// the numerator and nothing meaningful in the denominator.
pub fn max_gradient_error(case: &GradCase) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = (case.build)(&mut tape, &ids);
    tape.backward(loss).expect("loss must be scalar");
    let grads: Vec<Tensor<f64>> = ids
        .iter()
        .zip(&case.inputs)
        .map(|(&id, input)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()))
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = (case.build)(&mut tape, &ids);
        tape.value(loss).data()[0]
    };

    let mut worst = 0.0f64;
    for (pi, input) in case.inputs.iter().enumerate() {
        let mut fd_grad = vec![0.0f64; input.numel()];
        for (ei, slot) in fd_grad.iter_mut().enumerate() {
            let mut plus = case.inputs.clone();
            plus[pi].data_mut()[ei] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[pi].data_mut()[ei] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let analytic = grads[pi].data();
        let scale = analytic
            .iter()
            .chain(&fd_grad)
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
            .max(1e-10);
        for (&a, &f) in analytic.iter().zip(&fd_grad) {
            worst = worst.max((a - f).abs() / scale);
        }
    }
    worst
}

/// Values with pairwise spacing well above the finite-difference step and a
/// guard band around zero, so kinked ops (relu, maxpool) keep their active
/// branch under perturbation. Shuffled so position carries no order.
pub fn kink_safe_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..n)
        .map(|i| {
            let magnitude = 0.02 + 0.013 * (i / 2) as f64;
            if i % 2 == 0 {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    vals
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

fn grid(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, kink_safe_values(n, rng)).unwrap()
}

/// Shifts hidden-layer biases until every relu preactivation sits clear of
/// zero, so finite differencing never crosses the kink.
fn widen_relu_band(x: &Tensor<f64>, w: &Tensor<f64>, b: &mut Tensor<f64>) {
    let rows = x.shape()[0];
    let in_dim = x.shape()[1];
    let units = w.shape()[0];
    for u in 0..units {
        loop {
            let mut ok = true;
            for r in 0..rows {
                let mut pre = b.data()[u];
                for j in 0..in_dim {
                    pre += x.data()[r * in_dim + j] * w.data()[u * in_dim + j];
                }
                if pre.abs() < 0.02 {
                    ok = false;
                    break;
                }
            }
            if ok {
                break;
            }
            b.data_mut()[u] += 0.045;
        }
    }
}

/// One gradient-check case per autodiff primitive, plus two deep compositions
/// mirroring the real networks (an MLP and the volume-rendering chain).
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<GradCase> = Vec::new();

    cases.push(GradCase {
        name: "relu",
        inputs: vec![grid(vec![3, 7], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.relu(ids[0]);
            t.sum(y)
        }),
    });

    cases.push(GradCase {
        name: "sigmoid",
        inputs: vec![uniform(vec![4, 5], -3.0, 3.0, &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.sigmoid(ids[0]);
            t.sum(y)
        }),
    });

    cases.push(GradCase {
        name: "exp",
        inputs: vec![uniform(vec![2, 9], -2.0, 0.5, &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.exp(ids[0]);
            t.sum(y)
        }),
    });

    cases.push(GradCase {
        name: "affine_scalar",
        inputs: vec![uniform(vec![6], -1.0, 1.0, &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.affine_scalar(ids[0], -1.7, 0.3);
            t.sum(y)
        }),
    });

    {
        let target = uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "add_sub_mul",
            inputs: vec![
                uniform(vec![3, 4], -1.0, 1.0, &mut rng),
                uniform(vec![3, 4], -1.0, 1.0, &mut rng),
                uniform(vec![3, 4], -1.0, 1.0, &mut rng),
            ],
            build: Box::new(move |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                let d = t.sub(s, ids[2]).unwrap();
                let p = t.mul(d, ids[1]).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(p, tgt).unwrap()
            }),
        });
    }

    {
        let target = uniform(vec![5, 3], -1.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "linear",
            inputs: vec![
                uniform(vec![5, 7], -1.0, 1.0, &mut rng),
                uniform(vec![3, 7], -0.5, 0.5, &mut rng),
                uniform(vec![3], -0.5, 0.5, &mut rng),
            ],
            build: Box::new(move |t, ids| {
                let y = t.linear(ids[0], ids[1], ids[2]).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(y, tgt).unwrap()
            }),
        });
    }

    cases.push(GradCase {
        name: "linear_vector_input",
        inputs: vec![
            uniform(vec![6], -1.0, 1.0, &mut rng),
            uniform(vec![4, 6], -0.5, 0.5, &mut rng),
            uniform(vec![4], -0.5, 0.5, &mut rng),
        ],
        build: Box::new(|t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2]).unwrap();
            t.sum(y)
        }),
    });

    for (name, stride, padding) in [
        ("conv2d_s1_p0", 1usize, 0usize),
        ("conv2d_s2_p1", 2, 1),
    ] {
        let h_out = (6 + 2 * padding - 3) / stride + 1;
        let target = uniform(vec![3, h_out, h_out], -1.0, 1.0, &mut rng);
        cases.push(GradCase {
            name,
            inputs: vec![
                uniform(vec![2, 6, 6], -1.0, 1.0, &mut rng),
                uniform(vec![3, 2, 3, 3], -0.5, 0.5, &mut rng),
                uniform(vec![3], -0.5, 0.5, &mut rng),
            ],
            build: Box::new(move |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], stride, padding).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(y, tgt).unwrap()
            }),
        });
    }

    cases.push(GradCase {
        name: "maxpool2d",
        inputs: vec![grid(vec![2, 6, 6], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.maxpool2d(ids[0], 2, 2).unwrap();
            t.sum(y)
        }),
    });

    {
        let target = uniform(vec![3, 7], -1.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "concat_cols",
            inputs: vec![
                uniform(vec![3, 4], -1.0, 1.0, &mut rng),
                uniform(vec![3, 3], -1.0, 1.0, &mut rng),
            ],
            build: Box::new(move |t, ids| {
                let y = t.concat_cols(ids[0], ids[1]).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(y, tgt).unwrap()
            }),
        });
    }

    {
        let target = uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "cumsum_exclusive_rows",
            inputs: vec![uniform(vec![3, 5], -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, ids| {
                let y = t.cumsum_exclusive_rows(ids[0]).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(y, tgt).unwrap()
            }),
        });
    }

    {
        let target = uniform(vec![4, 1], -1.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "row_sum",
            inputs: vec![uniform(vec![4, 6], -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, ids| {
                let y = t.row_sum(ids[0]).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(y, tgt).unwrap()
            }),
        });
    }

    {
        let target = uniform(vec![3, 3], 0.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "composite",
            inputs: vec![
                uniform(vec![3, 4], 0.0, 0.3, &mut rng),
                uniform(vec![12, 3], 0.0, 1.0, &mut rng),
            ],
            build: Box::new(move |t, ids| {
                let y = t.composite(ids[0], ids[1], [1.0, 1.0, 1.0]).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(y, tgt).unwrap()
            }),
        });
    }

    cases.push(GradCase {
        name: "mse_both_sides",
        inputs: vec![
            uniform(vec![4, 4], -1.0, 1.0, &mut rng),
            uniform(vec![4, 4], -1.0, 1.0, &mut rng),
        ],
        build: Box::new(|t, ids| t.mse(ids[0], ids[1]).unwrap()),
    });

    cases.push(GradCase {
        name: "reshape",
        inputs: vec![uniform(vec![2, 6], -1.0, 1.0, &mut rng)],
        build: Box::new(|t, ids| {
            let r = t.reshape(ids[0], vec![3, 4]).unwrap();
            let s = t.sigmoid(r);
            t.sum(s)
        }),
    });

    {
        let x = uniform(vec![4, 6], -1.0, 1.0, &mut rng);
        let w1 = uniform(vec![8, 6], -0.4, 0.4, &mut rng);
        let mut b1 = uniform(vec![8], -0.2, 0.2, &mut rng);
        widen_relu_band(&x, &w1, &mut b1);
        let w2 = uniform(vec![3, 8], -0.4, 0.4, &mut rng);
        let b2 = uniform(vec![3], -0.2, 0.2, &mut rng);
        let target = uniform(vec![4, 3], 0.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "mlp_chain",
            inputs: vec![x, w1, b1, w2, b2],
            build: Box::new(move |t, ids| {
                let h = t.linear(ids[0], ids[1], ids[2]).unwrap();
                let h = t.relu(h);
                let y = t.linear(h, ids[3], ids[4]).unwrap();
                let y = t.sigmoid(y);
                let tgt = t.constant(target.clone());
                t.mse(y, tgt).unwrap()
            }),
        });
    }

    {
        // The exact graph used when training the field: raw densities through
        // relu, transmittance from the exclusive cumulative optical depth,
        // alpha-blend against a white background.
        let rays = 3usize;
        let samples = 5usize;
        let sigma_raw = grid(vec![rays, samples], &mut rng);
        let rgb_raw = uniform(vec![rays * samples, 3], -2.0, 2.0, &mut rng);
        let delta = uniform(vec![rays, samples], 0.05, 0.4, &mut rng);
        let target = uniform(vec![rays, 3], 0.0, 1.0, &mut rng);
        cases.push(GradCase {
            name: "render_chain",
            inputs: vec![sigma_raw, rgb_raw],
            build: Box::new(move |t, ids| {
                let sigma = t.relu(ids[0]);
                let d = t.constant(delta.clone());
                let optical = t.mul(sigma, d).unwrap();
                let neg_optical = t.affine_scalar(optical, -1.0, 0.0);
                let alpha_c = t.exp(neg_optical);
                let alpha = t.affine_scalar(alpha_c, -1.0, 1.0);
                let depth_before = t.cumsum_exclusive_rows(optical).unwrap();
                let neg_depth = t.affine_scalar(depth_before, -1.0, 0.0);
                let trans = t.exp(neg_depth);
                let w = t.mul(trans, alpha).unwrap();
                let rgb = t.sigmoid(ids[1]);
                let out = t.composite(w, rgb, [1.0, 1.0, 1.0]).unwrap();
                let tgt = t.constant(target.clone());
                t.mse(out, tgt).unwrap()
            }),
        });
    }

    cases
}
