//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients additively into every node
//! that requires them. The intended lifecycle is one fresh tape per training
//! step: register parameters as gradient leaves, run the forward pass, call
//! backward once, read the leaf gradients, drop the tape. Gradients accumulate
//! across repeated backward calls on the same tape; nothing is cleared
//! implicitly.
//!
//! Inputs whose subgraph contains no gradient leaf skip all gradient
//! bookkeeping, so the same forward code serves inference.

use crate::tensor::{par_gemm, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

enum Op<T> {
    Leaf,
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    /// y = mul·x + add, elementwise with scalar constants. Only the slope is
    /// needed again in the backward pass.
    AffineScalar {
        x: NodeId,
        mul: T,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        dims: ConvDims,
        /// im2col matrix [h_out·w_out, c_in·k·k], kept for the backward pass.
        cols: Vec<T>,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
        cols_a: usize,
        cols_b: usize,
    },
    CumsumExclRows {
        x: NodeId,
    },
    RowSum {
        x: NodeId,
    },
    /// Volume compositing: out[r,c] = Σ_s w[r,s]·rgb[r·S+s,c] + (1−Σ_s w)·bg[c].
    Composite {
        w: NodeId,
        rgb: NodeId,
        background: [T; 3],
        samples: usize,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Registers an input tensor. Gradient leaves get a gradient buffer after
    /// backward; constants never do.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Sigmoid { x })
    }

    /// Elementwise e^x. Callers keep x bounded above (renderer feeds −σ·δ ≤ 0).
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Exp { x })
    }

    /// y = mul·x + add elementwise.
    pub fn affine_scalar(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| mul * v + add).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::AffineScalar { x, mul })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, "mul")
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
    ) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dim {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = match op {
            "add" => va.iter().zip(vb).map(|(&x, &y)| x + y).collect(),
            "sub" => va.iter().zip(vb).map(|(&x, &y)| x - y).collect(),
            _ => va.iter().zip(vb).map(|(&x, &y)| x * y).collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let rg = self.needs(&[a, b]);
        let node_op = match op {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(value, rg, node_op))
    }

    /// y = x·Wᵀ + b. Accepts x as a vector [in] or a batch [N, in];
    /// w is [out, in], b is [out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (rows, in_dim, vector_input) = match xs.as_slice() {
            [n] => (1usize, *n, true),
            [r, n] => (*r, *n, false),
            _ => {
                return Err(TensorError::Dim {
                    op: "linear",
                    detail: format!("input shape {xs:?} is not a vector or matrix"),
                })
            }
        };
        let (out_dim_w, in_dim_w) = match ws.as_slice() {
            [o, i] => (*o, *i),
            _ => {
                return Err(TensorError::Dim {
                    op: "linear",
                    detail: format!("weight shape {ws:?} is not a matrix"),
                })
            }
        };
        if in_dim_w != in_dim || bs != [out_dim_w] {
            return Err(TensorError::Dim {
                op: "linear",
                detail: format!("x {xs:?} · wᵀ {ws:?} + b {bs:?}"),
            });
        }
        let out = out_dim_w;
        let mut data = vec![T::zero(); rows * out];
        par_gemm(
            rows,
            in_dim,
            out,
            self.value(x).data(),
            in_dim as isize,
            1,
            self.value(w).data(),
            1,
            in_dim as isize,
            T::zero(),
            &mut data,
        );
        let bias = self.value(b).data();
        for row in data.chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let shape = if vector_input { vec![out] } else { vec![rows, out] };
        let value = Tensor::new(shape, data).unwrap();
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, rg, Op::Linear { x, w, b, rows }))
    }

    /// Cross-correlation (no kernel flip): x [C_in,H,W], kernels
    /// [C_out,C_in,K,K], bias [C_out]; output [C_out,H',W'] with
    /// H' = floor((H+2p−K)/stride)+1.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        let bs = self.shape(bias).to_vec();
        let (c_in, h, w) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(TensorError::Dim {
                    op: "conv2d",
                    detail: format!("input shape {xs:?} is not C×H×W"),
                })
            }
        };
        let (c_out, kc_in, k) = match ks.as_slice() {
            [o, c, k1, k2] if k1 == k2 => (*o, *c, *k1),
            _ => {
                return Err(TensorError::Dim {
                    op: "conv2d",
                    detail: format!("kernel shape {ks:?} is not C_out×C_in×K×K"),
                })
            }
        };
        if kc_in != c_in {
            return Err(TensorError::Dim {
                op: "conv2d",
                detail: format!("input has {c_in} channels, kernels expect {kc_in}"),
            });
        }
        if bs != [c_out] {
            return Err(TensorError::Dim {
                op: "conv2d",
                detail: format!("bias shape {bs:?}, expected [{c_out}]"),
            });
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::Dim {
                op: "conv2d",
                detail: format!("kernel {k} exceeds padded input {h}×{w} (pad {padding})"),
            });
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let dims = ConvDims {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        };
        let cols = im2col(self.value(x).data(), dims);
        let patch = c_in * k * k;
        let npix = h_out * w_out;
        let mut data = vec![T::zero(); c_out * npix];
        // out[C_out, H'W'] = kernels[C_out, patch] · colsᵀ[patch, H'W']
        par_gemm(
            c_out,
            patch,
            npix,
            self.value(kernels).data(),
            patch as isize,
            1,
            &cols,
            1,
            patch as isize,
            T::zero(),
            &mut data,
        );
        let bv = self.value(bias).data();
        for (o, row) in data.chunks_mut(npix).enumerate() {
            let b = bv[o];
            for v in row {
                *v += b;
            }
        }
        let value = Tensor::new(vec![c_out, h_out, w_out], data).unwrap();
        let rg = self.needs(&[x, kernels, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                k: kernels,
                b: bias,
                dims,
                cols,
            },
        ))
    }

    /// Floor-mode max pooling; gradient routes to the first maximum in each
    /// window.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(TensorError::Dim {
                    op: "maxpool2d",
                    detail: format!("input shape {xs:?} is not C×H×W"),
                })
            }
        };
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(TensorError::Dim {
                op: "maxpool2d",
                detail: format!("window {k} stride {stride} on {h}×{w}"),
            });
        }
        let h_out = (h - k) / stride + 1;
        let w_out = (w - k) / stride + 1;
        let input = self.value(x).data();
        let mut data = vec![T::zero(); c * h_out * w_out];
        let mut argmax = vec![0usize; c * h_out * w_out];
        for ci in 0..c {
            let plane = ci * h * w;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best_idx = plane + oy * stride * w + ox * stride;
                    let mut best = input[best_idx];
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = plane + (oy * stride + ky) * w + ox * stride + kx;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = ci * h_out * w_out + oy * w_out + ox;
                    data[out_idx] = best;
                    argmax[out_idx] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![c, h_out, w_out], data).unwrap();
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::MaxPool2d { x, argmax }))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ra, ca) = match sa.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::Dim {
                    op: "concat_cols",
                    detail: format!("{sa:?} is not a matrix"),
                })
            }
        };
        let (rb, cb) = match sb.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::Dim {
                    op: "concat_cols",
                    detail: format!("{sb:?} is not a matrix"),
                })
            }
        };
        if ra != rb {
            return Err(TensorError::Dim {
                op: "concat_cols",
                detail: format!("row counts {ra} vs {rb}"),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], data).unwrap();
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            value,
            rg,
            Op::ConcatCols {
                a,
                b,
                cols_a: ca,
                cols_b: cb,
            },
        ))
    }

    /// y[r,s] = Σ_{j<s} x[r,j]; the running optical depth before sample s.
    pub fn cumsum_exclusive_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let (r, s) = match xs.as_slice() {
            [r, s] => (*r, *s),
            _ => {
                return Err(TensorError::Dim {
                    op: "cumsum_exclusive_rows",
                    detail: format!("{xs:?} is not a matrix"),
                })
            }
        };
        let v = self.value(x).data();
        let mut data = vec![T::zero(); r * s];
        for ri in 0..r {
            let mut acc = T::zero();
            for si in 0..s {
                data[ri * s + si] = acc;
                acc += v[ri * s + si];
            }
        }
        let value = Tensor::new(vec![r, s], data).unwrap();
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::CumsumExclRows { x }))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let (r, s) = match xs.as_slice() {
            [r, s] => (*r, *s),
            _ => {
                return Err(TensorError::Dim {
                    op: "row_sum",
                    detail: format!("{xs:?} is not a matrix"),
                })
            }
        };
        let v = self.value(x).data();
        let data: Vec<T> = (0..r).map(|ri| v[ri * s..(ri + 1) * s].iter().copied().sum()).collect();
        let value = Tensor::new(vec![r, 1], data).unwrap();
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::RowSum { x }))
    }

    /// Alpha-compositing of per-sample colors against a constant background:
    /// out[r,·] = Σ_s w[r,s]·rgb[r·S+s,·] + (1 − Σ_s w[r,s])·background.
    pub fn composite(
        &mut self,
        w: NodeId,
        rgb: NodeId,
        background: [T; 3],
    ) -> Result<NodeId, TensorError> {
        let ws = self.shape(w).to_vec();
        let rs = self.shape(rgb).to_vec();
        let (r, s) = match ws.as_slice() {
            [r, s] => (*r, *s),
            _ => {
                return Err(TensorError::Dim {
                    op: "composite",
                    detail: format!("weights {ws:?} are not a matrix"),
                })
            }
        };
        if rs != [r * s, 3] {
            return Err(TensorError::Dim {
                op: "composite",
                detail: format!("rgb shape {rs:?}, expected [{}, 3]", r * s),
            });
        }
        let wv = self.value(w).data();
        let cv = self.value(rgb).data();
        let mut data = vec![T::zero(); r * 3];
        for ri in 0..r {
            let mut acc = [T::zero(); 3];
            let mut wsum = T::zero();
            for si in 0..s {
                let wx = wv[ri * s + si];
                wsum += wx;
                let base = (ri * s + si) * 3;
                for c in 0..3 {
                    acc[c] += wx * cv[base + c];
                }
            }
            let resid = T::one() - wsum;
            for c in 0..3 {
                data[ri * 3 + c] = acc[c] + resid * background[c];
            }
        }
        let value = Tensor::new(vec![r, 3], data).unwrap();
        let rg = self.needs(&[w, rgb]);
        Ok(self.push(
            value,
            rg,
            Op::Composite {
                w,
                rgb,
                background,
                samples: s,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    /// L = (1/numel)·Σ(a−b)², differentiable in both arguments.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dim {
                op: "mse",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::from_usize(va.len()).unwrap();
        let total: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), rg, Op::Mse { a, b }))
    }

    /// Accumulates dL/d(node) into every gradient leaf below `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        self.accumulate(loss, Tensor::full(shape, T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.take().expect("checked above");
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) {
        // Ops are moved out so input values can be read while writing input
        // gradients; Leaf is a cheap placeholder.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Relu { x } => {
                if self.nodes[x.0].requires_grad {
                    let contrib: Vec<T> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate_data(*x, &contrib);
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[x.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let contrib: Vec<T> = y
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                        .collect();
                    self.accumulate_data(*x, &contrib);
                }
            }
            Op::Exp { x } => {
                if self.nodes[x.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let contrib: Vec<T> =
                        y.iter().zip(g.data()).map(|(&yv, &gv)| gv * yv).collect();
                    self.accumulate_data(*x, &contrib);
                }
            }
            Op::AffineScalar { x, mul } => {
                if self.nodes[x.0].requires_grad {
                    let contrib: Vec<T> = g.data().iter().map(|&gv| gv * *mul).collect();
                    self.accumulate_data(*x, &contrib);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate_data(*a, g.data());
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate_data(*b, g.data());
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate_data(*a, g.data());
                }
                if self.nodes[b.0].requires_grad {
                    let contrib: Vec<T> = g.data().iter().map(|&gv| -gv).collect();
                    self.accumulate_data(*b, &contrib);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let vb = self.nodes[b.0].value.data();
                    let contrib: Vec<T> =
                        g.data().iter().zip(vb).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate_data(*a, &contrib);
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.nodes[a.0].value.data();
                    let contrib: Vec<T> =
                        g.data().iter().zip(va).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate_data(*b, &contrib);
                }
            }
            Op::Linear { x, w, b, rows } => self.backward_linear(*x, *w, *b, *rows, g),
            Op::Conv2d { x, k, b, dims, cols } => self.backward_conv(*x, *k, *b, *dims, cols, g),
            Op::MaxPool2d { x, argmax } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.grad_buffer(*x);
                    for (out_idx, &in_idx) in argmax.iter().enumerate() {
                        gx.data_mut()[in_idx] += g.data()[out_idx];
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::ConcatCols { a, b, cols_a, cols_b } => {
                let rows = g.shape()[0];
                let total = cols_a + cols_b;
                if self.nodes[a.0].requires_grad {
                    let mut contrib = Vec::with_capacity(rows * cols_a);
                    for r in 0..rows {
                        contrib.extend_from_slice(&g.data()[r * total..r * total + cols_a]);
                    }
                    self.accumulate_data(*a, &contrib);
                }
                if self.nodes[b.0].requires_grad {
                    let mut contrib = Vec::with_capacity(rows * cols_b);
                    for r in 0..rows {
                        contrib
                            .extend_from_slice(&g.data()[r * total + cols_a..(r + 1) * total]);
                    }
                    self.accumulate_data(*b, &contrib);
                }
            }
            Op::CumsumExclRows { x } => {
                if self.nodes[x.0].requires_grad {
                    let (r, s) = (g.shape()[0], g.shape()[1]);
                    let mut contrib = vec![T::zero(); r * s];
                    for ri in 0..r {
                        // dL/dx[j] = Σ_{s>j} dL/dy[s]: reverse exclusive suffix sum.
                        let mut acc = T::zero();
                        for si in (0..s).rev() {
                            contrib[ri * s + si] = acc;
                            acc += g.data()[ri * s + si];
                        }
                    }
                    self.accumulate_data(*x, &contrib);
                }
            }
            Op::RowSum { x } => {
                if self.nodes[x.0].requires_grad {
                    let s = self.nodes[x.0].value.shape()[1];
                    let r = g.shape()[0];
                    let mut contrib = vec![T::zero(); r * s];
                    for ri in 0..r {
                        let gv = g.data()[ri];
                        for si in 0..s {
                            contrib[ri * s + si] = gv;
                        }
                    }
                    self.accumulate_data(*x, &contrib);
                }
            }
            Op::Composite {
                w,
                rgb,
                background,
                samples,
            } => {
                let s = *samples;
                let r = g.shape()[0];
                if self.nodes[w.0].requires_grad {
                    let cv = self.nodes[rgb.0].value.data();
                    let mut contrib = vec![T::zero(); r * s];
                    for ri in 0..r {
                        for si in 0..s {
                            let base = (ri * s + si) * 3;
                            let mut acc = T::zero();
                            for c in 0..3 {
                                acc += (cv[base + c] - background[c]) * g.data()[ri * 3 + c];
                            }
                            contrib[ri * s + si] = acc;
                        }
                    }
                    self.accumulate_data(*w, &contrib);
                }
                if self.nodes[rgb.0].requires_grad {
                    let wv = self.nodes[w.0].value.data();
                    let mut contrib = vec![T::zero(); r * s * 3];
                    for ri in 0..r {
                        for si in 0..s {
                            let wx = wv[ri * s + si];
                            let base = (ri * s + si) * 3;
                            for c in 0..3 {
                                contrib[base + c] = wx * g.data()[ri * 3 + c];
                            }
                        }
                    }
                    self.accumulate_data(*rgb, &contrib);
                }
            }
            Op::Reshape { x } => {
                if self.nodes[x.0].requires_grad {
                    self.accumulate_data(*x, g.data());
                }
            }
            Op::Sum { x } => {
                if self.nodes[x.0].requires_grad {
                    let gv = g.data()[0];
                    let n = self.nodes[x.0].value.numel();
                    self.accumulate_data(*x, &vec![gv; n]);
                }
            }
            Op::Mse { a, b } => {
                let diff: Vec<T> = {
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    let scale = g.data()[0] * T::from_usize(2).unwrap()
                        / T::from_usize(va.len()).unwrap();
                    va.iter().zip(vb).map(|(&x, &y)| scale * (x - y)).collect()
                };
                if self.nodes[a.0].requires_grad {
                    self.accumulate_data(*a, &diff);
                }
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<T> = diff.iter().map(|&d| -d).collect();
                    self.accumulate_data(*b, &neg);
                }
            }
        }
        self.nodes[id].op = op;
    }

    fn backward_linear(&mut self, x: NodeId, w: NodeId, b: NodeId, rows: usize, g: &Tensor<T>) {
        let in_dim = self.nodes[w.0].value.shape()[1];
        let out_dim = self.nodes[w.0].value.shape()[0];
        if self.nodes[x.0].requires_grad {
            // dX[rows,in] += dY[rows,out] · W[out,in]
            let mut gx = self.grad_buffer(x);
            par_gemm(
                rows,
                out_dim,
                in_dim,
                g.data(),
                out_dim as isize,
                1,
                self.nodes[w.0].value.data(),
                in_dim as isize,
                1,
                T::one(),
                gx.data_mut(),
            );
            self.nodes[x.0].grad = Some(gx);
        }
        if self.nodes[w.0].requires_grad {
            // dW[out,in] += dYᵀ[out,rows] · X[rows,in]
            let mut gw = self.grad_buffer(w);
            par_gemm(
                out_dim,
                rows,
                in_dim,
                g.data(),
                1,
                out_dim as isize,
                self.nodes[x.0].value.data(),
                in_dim as isize,
                1,
                T::one(),
                gw.data_mut(),
            );
            self.nodes[w.0].grad = Some(gw);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = self.grad_buffer(b);
            for row in g.data().chunks(out_dim) {
                for (acc, &gv) in gb.data_mut().iter_mut().zip(row) {
                    *acc += gv;
                }
            }
            self.nodes[b.0].grad = Some(gb);
        }
    }

    fn backward_conv(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        dims: ConvDims,
        cols: &[T],
        g: &Tensor<T>,
    ) {
        let patch = dims.c_in * dims.k * dims.k;
        let npix = dims.h_out * dims.w_out;
        if self.nodes[b.0].requires_grad {
            let mut gb = self.grad_buffer(b);
            for (o, row) in g.data().chunks(npix).enumerate() {
                gb.data_mut()[o] += row.iter().copied().sum();
            }
            self.nodes[b.0].grad = Some(gb);
        }
        if self.nodes[k.0].requires_grad {
            // dK[C_out,patch] += dOut[C_out,npix] · cols[npix,patch]
            let mut gk = self.grad_buffer(k);
            par_gemm(
                dims.c_out,
                npix,
                patch,
                g.data(),
                npix as isize,
                1,
                cols,
                patch as isize,
                1,
                T::one(),
                gk.data_mut(),
            );
            self.nodes[k.0].grad = Some(gk);
        }
        if self.nodes[x.0].requires_grad {
            // dcols[npix,patch] = dOutᵀ[npix,C_out] · K[C_out,patch]
            let mut dcols = vec![T::zero(); npix * patch];
            par_gemm(
                npix,
                dims.c_out,
                patch,
                g.data(),
                1,
                npix as isize,
                self.nodes[k.0].value.data(),
                patch as isize,
                1,
                T::zero(),
                &mut dcols,
            );
            let mut gx = self.grad_buffer(x);
            col2im_add(&dcols, dims, gx.data_mut());
            self.nodes[x.0].grad = Some(gx);
        }
    }

    fn grad_buffer(&mut self, id: NodeId) -> Tensor<T> {
        let shape = self.nodes[id.0].value.shape().to_vec();
        self.nodes[id.0]
            .grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    fn accumulate_data(&mut self, id: NodeId, contrib: &[T]) {
        let mut g = self.grad_buffer(id);
        for (acc, &c) in g.data_mut().iter_mut().zip(contrib) {
            *acc += c;
        }
        self.nodes[id.0].grad = Some(g);
    }

    fn accumulate(&mut self, id: NodeId, contrib: Tensor<T>) {
        match self.nodes[id.0].grad.take() {
            None => self.nodes[id.0].grad = Some(contrib),
            Some(mut g) => {
                for (acc, &c) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *acc += c;
                }
                self.nodes[id.0].grad = Some(g);
            }
        }
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Scalar>(input: &[T], d: ConvDims) -> Vec<T> {
    let patch = d.c_in * d.k * d.k;
    let mut cols = vec![T::zero(); d.h_out * d.w_out * patch];
    for oy in 0..d.h_out {
        for ox in 0..d.w_out {
            let row = (oy * d.w_out + ox) * patch;
            for c in 0..d.c_in {
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        let v = if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                            input[c * d.h * d.w + iy as usize * d.w + ix as usize]
                        } else {
                            T::zero()
                        };
                        cols[row + c * d.k * d.k + ky * d.k + kx] = v;
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], d: ConvDims, dx: &mut [T]) {
    let patch = d.c_in * d.k * d.k;
    for oy in 0..d.h_out {
        for ox in 0..d.w_out {
            let row = (oy * d.w_out + ox) * patch;
            for c in 0..d.c_in {
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                            dx[c * d.h * d.w + iy as usize * d.w + ix as usize] +=
                                dcols[row + c * d.k * d.k + ky * d.k + kx];
                        }
                    }
                }
            }
        }
    }
}
