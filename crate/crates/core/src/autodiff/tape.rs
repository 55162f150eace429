//! Operation tape: eager forward evaluation with recorded dependencies,
//! reverse-order gradient accumulation.

use super::conv::{self, ConvGeometry, ConvSpec};
use super::{AdError, Scalar, Tensor};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer; model state, not a
/// tape node.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }

    pub fn cast<U: Scalar>(&self) -> BnState<U> {
        BnState {
            running_mean: self.running_mean.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Maximum { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: T },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv3d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    /// `geom` is the matching convolution view: its `in_*` side is the
    /// (large) output of the transpose.
    ConvTranspose3d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    MaxPool3d { x: NodeId, argmax: Vec<usize> },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout { x: NodeId, mask: Option<Vec<bool>>, keep_scale: T },
    GlobalAvgPool { x: NodeId },
    ChannelMax { x: NodeId, argmax: Vec<usize> },
    Concat { inputs: Vec<NodeId> },
    Reshape { x: NodeId },
    ReduceSum { x: NodeId, weights: Option<Tensor<T>>, mean: bool },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only operation record. One tape per training step; `backward` may
/// run once, after which the tape only serves value and leaf-gradient reads.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Element count of the largest tensor recorded on the tape; a cheap
    /// probe for memory contracts ("no field-sized buffer was built").
    pub fn max_value_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).max().unwrap_or(0)
    }

    /// Gradient of the loss w.r.t. a requires-grad leaf, after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, needs_grad, requires_grad, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    // ---- elementwise / broadcast ----------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.broadcast_binary("add", a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.broadcast_binary("sub", a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.broadcast_binary("mul", a, b, BinKind::Mul)
    }

    fn broadcast_binary(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        kind: BinKind,
    ) -> Result<NodeId, AdError> {
        let (av, bv) = (self.val(a), self.val(b));
        let out_shape = broadcast_shape(opname, av.shape(), bv.shape())?;
        let data = broadcast_zip(av, bv, &out_shape, |x, y| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        });
        let value = Tensor::from_vec(out_shape, data).expect("broadcast length");
        let needs = self.needs(a) || self.needs(b);
        let op = match kind {
            BinKind::Add => Op::Add { a, b },
            BinKind::Sub => Op::Sub { a, b },
            BinKind::Mul => Op::Mul { a, b },
        };
        Ok(self.push(value, needs, false, op))
    }

    /// Elementwise maximum of two same-shape tensors; gradient routes to the
    /// larger input (ties go to the first).
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        same_shape("maximum", self.val(a).shape(), self.val(b).shape())?;
        let data: Vec<T> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| if y > x { y } else { x })
            .collect();
        let value = Tensor::from_vec(self.val(a).shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, false, Op::Maximum { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let value = self.val(x).map(|v| v * k);
        let needs = self.needs(x);
        self.push(value, needs, false, Op::Scale { x, k })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).map(|v| v.maxv(T::ZERO));
        let needs = self.needs(x);
        self.push(value, needs, false, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).map(|v| T::ONE / (T::ONE + (-v).exp()));
        let needs = self.needs(x);
        self.push(value, needs, false, Op::Sigmoid { x })
    }

    // ---- dense -----------------------------------------------------------

    /// x[N,K] * w[K,M] + b[M] -> [N,M]
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, AdError> {
        let (xs, ws) = (self.val(x).shape().to_vec(), self.val(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(AdError::Invalid {
                op: "dense",
                detail: format!("expected rank-2 input and weight, got {xs:?} and {ws:?}"),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        let (k2, m) = (ws[0], ws[1]);
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op: "dense",
                axis: 1,
                detail: format!("input K={k} vs weight K={k2}"),
            });
        }
        if let Some(b) = b {
            if self.val(b).shape() != [m] {
                return Err(AdError::ShapeMismatch {
                    op: "dense",
                    axis: 0,
                    detail: format!("bias shape {:?} vs M={m}", self.val(b).shape()),
                });
            }
        }
        let mut out = vec![T::ZERO; n * m];
        {
            let xd = self.val(x).data();
            let wd = self.val(w).data();
            let bd = b.map(|b| self.val(b).data());
            for i in 0..n {
                let out_row = &mut out[i * m..][..m];
                if let Some(bias) = bd {
                    out_row.copy_from_slice(bias);
                }
                let x_row = &xd[i * k..][..k];
                for (kk, &xval) in x_row.iter().enumerate() {
                    let w_row = &wd[kk * m..][..m];
                    for (o, &wv_) in out_row.iter_mut().zip(w_row) {
                        *o += xval * wv_;
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, m], out).expect("dense length");
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(value, needs, false, Op::Dense { x, w, b }))
    }

    // ---- convolutions ----------------------------------------------------

    /// x[N,C,D,H,W] (cross-)correlated with w[F,C,kd,kh,kw] plus bias[F].
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId, AdError> {
        let geom = self.conv_geometry("conv3d", x, w, b, spec, false)?;
        let mut out = vec![T::ZERO; geom.batch * geom.out_ch * geom.out_spatial_len()];
        conv::forward(
            &geom,
            self.val(x).data(),
            self.val(w).data(),
            b.map(|b| self.val(b).data()),
            &mut out,
        );
        let shape = vec![geom.batch, geom.out_ch, geom.out_sp[0], geom.out_sp[1], geom.out_sp[2]];
        let value = Tensor::from_vec(shape, out).expect("conv length");
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(value, needs, false, Op::Conv3d { x, w, b, geom }))
    }

    /// Adjoint of [`Tape::conv3d`]: x[N,Cin,D,H,W] with kernel
    /// w[Cin,Cout,kd,kh,kw] upsamples to [N,Cout,D',H',W'] where
    /// `D' = (D-1)*stride - 2p + dil*(kd-1) + 1`.
    pub fn conv3d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId, AdError> {
        let geom = self.conv_geometry("conv3d_transpose", x, w, b, spec, true)?;
        let out_len = geom.batch * geom.in_ch * geom.in_spatial_len();
        let mut out = vec![T::ZERO; out_len];
        conv::backward_input(&geom, self.val(x).data(), self.val(w).data(), &mut out);
        if let Some(b) = b {
            conv::add_channel_bias(
                geom.batch,
                geom.in_ch,
                geom.in_spatial_len(),
                self.val(b).data(),
                &mut out,
            );
        }
        let shape = vec![geom.batch, geom.in_ch, geom.in_sp[0], geom.in_sp[1], geom.in_sp[2]];
        let value = Tensor::from_vec(shape, out).expect("transpose length");
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(value, needs, false, Op::ConvTranspose3d { x, w, b, geom }))
    }

    fn conv_geometry(
        &self,
        opname: &'static str,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
        transpose: bool,
    ) -> Result<ConvGeometry, AdError> {
        let xv = self.val(x);
        let wv = self.val(w);
        if xv.rank() != 5 || wv.rank() != 5 {
            return Err(AdError::Invalid {
                op: opname,
                detail: format!(
                    "expected rank-5 input and kernel, got {:?} and {:?}",
                    xv.shape(),
                    wv.shape()
                ),
            });
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(AdError::Invalid {
                op: opname,
                detail: "stride and dilation must be >= 1".into(),
            });
        }
        let kernel = [wv.shape()[2], wv.shape()[3], wv.shape()[4]];
        if !transpose {
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            let (f, cw) = (wv.shape()[0], wv.shape()[1]);
            if c != cw {
                return Err(AdError::ShapeMismatch {
                    op: opname,
                    axis: 1,
                    detail: format!("input channels {c} vs kernel channels {cw}"),
                });
            }
            let in_sp = [xv.shape()[2], xv.shape()[3], xv.shape()[4]];
            let mut out_sp = [0usize; 3];
            for a in 0..3 {
                out_sp[a] = spec.out_extent(in_sp[a], kernel[a]).ok_or(AdError::ShapeMismatch {
                    op: opname,
                    axis: 2 + a,
                    detail: format!(
                        "input extent {} too small for kernel {} (stride {}, pad {}, dil {})",
                        in_sp[a], kernel[a], spec.stride, spec.padding, spec.dilation
                    ),
                })?;
            }
            if let Some(b) = b {
                if self.val(b).shape() != [f] {
                    return Err(AdError::ShapeMismatch {
                        op: opname,
                        axis: 0,
                        detail: format!("bias shape {:?} vs F={f}", self.val(b).shape()),
                    });
                }
            }
            Ok(ConvGeometry { batch: n, in_ch: c, out_ch: f, in_sp, out_sp, kernel, spec })
        } else {
            let (n, cin) = (xv.shape()[0], xv.shape()[1]);
            let (cin_w, cout) = (wv.shape()[0], wv.shape()[1]);
            if cin != cin_w {
                return Err(AdError::ShapeMismatch {
                    op: opname,
                    axis: 1,
                    detail: format!("input channels {cin} vs kernel leading channels {cin_w}"),
                });
            }
            let small = [xv.shape()[2], xv.shape()[3], xv.shape()[4]];
            let mut big = [0usize; 3];
            for a in 0..3 {
                big[a] = spec
                    .transpose_out_extent(small[a], kernel[a])
                    .ok_or(AdError::ShapeMismatch {
                        op: opname,
                        axis: 2 + a,
                        detail: format!(
                            "extent {} with kernel {} (stride {}, pad {}) yields empty output",
                            small[a], kernel[a], spec.stride, spec.padding
                        ),
                    })?;
            }
            if let Some(b) = b {
                if self.val(b).shape() != [cout] {
                    return Err(AdError::ShapeMismatch {
                        op: opname,
                        axis: 0,
                        detail: format!("bias shape {:?} vs Cout={cout}", self.val(b).shape()),
                    });
                }
            }
            Ok(ConvGeometry {
                batch: n,
                in_ch: cout,
                out_ch: cin,
                in_sp: big,
                out_sp: small,
                kernel,
                spec,
            })
        }
    }

    // ---- pooling ----------------------------------------------------------

    /// Max pooling over `window`^3 blocks with the given stride; gradient
    /// goes to the first occurrence of the maximum in row-major order.
    pub fn maxpool3d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId, AdError> {
        let xv = self.val(x);
        if xv.rank() != 5 {
            return Err(AdError::Invalid {
                op: "maxpool3d",
                detail: format!("expected rank-5 input, got {:?}", xv.shape()),
            });
        }
        if window == 0 || stride == 0 {
            return Err(AdError::Invalid {
                op: "maxpool3d",
                detail: "window and stride must be >= 1".into(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let in_sp = [xv.shape()[2], xv.shape()[3], xv.shape()[4]];
        let mut out_sp = [0usize; 3];
        for a in 0..3 {
            if in_sp[a] < window {
                return Err(AdError::ShapeMismatch {
                    op: "maxpool3d",
                    axis: 2 + a,
                    detail: format!("extent {} smaller than window {window}", in_sp[a]),
                });
            }
            out_sp[a] = (in_sp[a] - window) / stride + 1;
        }
        let in_len: usize = in_sp.iter().product();
        let out_len: usize = out_sp.iter().product();
        let xd = xv.data();
        let mut out = vec![T::ZERO; n * c * out_len];
        let mut argmax = vec![0usize; n * c * out_len];
        for nc in 0..n * c {
            let slab = &xd[nc * in_len..][..in_len];
            let out_slab = &mut out[nc * out_len..][..out_len];
            let arg_slab = &mut argmax[nc * out_len..][..out_len];
            let mut o = 0usize;
            for od in 0..out_sp[0] {
                for oh in 0..out_sp[1] {
                    for ow in 0..out_sp[2] {
                        let mut best = T::from_f64(f64::NEG_INFINITY);
                        let mut best_ix = 0usize;
                        for zd in 0..window {
                            for zh in 0..window {
                                for zw in 0..window {
                                    let ix = ((od * stride + zd) * in_sp[1] + oh * stride + zh)
                                        * in_sp[2]
                                        + ow * stride
                                        + zw;
                                    let v = slab[ix];
                                    if v > best {
                                        best = v;
                                        best_ix = ix;
                                    }
                                }
                            }
                        }
                        out_slab[o] = best;
                        arg_slab[o] = nc * in_len + best_ix;
                        o += 1;
                    }
                }
            }
        }
        let shape = vec![n, c, out_sp[0], out_sp[1], out_sp[2]];
        let value = Tensor::from_vec(shape, out).expect("pool length");
        let needs = self.needs(x);
        Ok(self.push(value, needs, false, Op::MaxPool3d { x, argmax }))
    }

    // ---- normalization / regularization -----------------------------------

    /// Batch normalization over all axes except the channel axis (1).
    /// Train mode normalizes with biased batch statistics and folds them
    /// into `state` with the given momentum; eval mode reads `state` only.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState<T>,
        mode: BnMode,
        momentum: T,
        epsilon: T,
    ) -> Result<NodeId, AdError> {
        let xv = self.val(x);
        if xv.rank() < 2 {
            return Err(AdError::Invalid {
                op: "batchnorm",
                detail: format!("expected rank >= 2, got {:?}", xv.shape()),
            });
        }
        let n = xv.shape()[0];
        let c = xv.shape()[1];
        let spatial: usize = xv.shape()[2..].iter().product();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.val(id).shape() != [c] {
                return Err(AdError::ShapeMismatch {
                    op: "batchnorm",
                    axis: 1,
                    detail: format!("{name} shape {:?} vs C={c}", self.val(id).shape()),
                });
            }
        }
        if state.running_mean.len() != c {
            return Err(AdError::Invalid {
                op: "batchnorm",
                detail: format!("running stats sized {} vs C={c}", state.running_mean.len()),
            });
        }
        let m = n * spatial;
        let xd = self.val(x).data();
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            BnMode::Train => {
                let count = T::from_f64(m as f64);
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut acc = T::ZERO;
                    for b in 0..n {
                        for v in &xd[(b * c + ch) * spatial..][..spatial] {
                            acc += *v;
                        }
                    }
                    let mu = acc / count;
                    let mut vacc = T::ZERO;
                    for b in 0..n {
                        for v in &xd[(b * c + ch) * spatial..][..spatial] {
                            let d = *v - mu;
                            vacc += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = vacc / count;
                }
                for ch in 0..c {
                    state.running_mean[ch] =
                        (T::ONE - momentum) * state.running_mean[ch] + momentum * mean[ch];
                    state.running_var[ch] =
                        (T::ONE - momentum) * state.running_var[ch] + momentum * var[ch];
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + epsilon).sqrt()).collect();
        let gv = self.val(gamma).data().to_vec();
        let bv = self.val(beta).data().to_vec();
        let xd = self.val(x).data();
        let mut x_hat = vec![T::ZERO; xd.len()];
        let mut out = vec![T::ZERO; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in 0..spatial {
                    let xh = (xd[base + i] - mu) * is;
                    x_hat[base + i] = xh;
                    out[base + i] = ga * xh + be;
                }
            }
        }
        let shape = self.val(x).shape().to_vec();
        let x_hat = Tensor::from_vec(shape.clone(), x_hat).expect("bn length");
        let value = Tensor::from_vec(shape, out).expect("bn length");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            needs,
            false,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train: mode == BnMode::Train,
            },
        ))
    }

    /// Inverted dropout: train mode zeroes with probability `rate` and
    /// scales survivors by 1/(1-rate); eval mode (or rate 0) is identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, train: bool, seed: u64) -> Result<NodeId, AdError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AdError::Invalid {
                op: "dropout",
                detail: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        let needs = self.needs(x);
        if !train || rate == 0.0 {
            let value = self.val(x).clone();
            return Ok(self.push(value, needs, false, Op::Dropout { x, mask: None, keep_scale: T::ONE }));
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let threshold = (rate * (1u64 << 53) as f64) as u64;
        let xv = self.val(x);
        let mask: Vec<bool> = (0..xv.len())
            .map(|_| (rng.next_u64() >> 11) >= threshold)
            .collect();
        let data: Vec<T> = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * keep_scale } else { T::ZERO })
            .collect();
        let value = Tensor::from_vec(xv.shape().to_vec(), data).expect("dropout length");
        Ok(self.push(value, needs, false, Op::Dropout { x, mask: Some(mask), keep_scale }))
    }

    // ---- reductions / shape ------------------------------------------------

    /// Per-channel mean over the spatial axes: [N,C,sp...] -> [N,C].
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let xv = self.val(x);
        if xv.rank() < 3 {
            return Err(AdError::Invalid {
                op: "global_avg_pool",
                detail: format!("expected rank >= 3, got {:?}", xv.shape()),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let spatial: usize = xv.shape()[2..].iter().product();
        let inv = T::from_f64(1.0 / spatial as f64);
        let xd = xv.data();
        let mut out = vec![T::ZERO; n * c];
        for (nc, o) in out.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for v in &xd[nc * spatial..][..spatial] {
                acc += *v;
            }
            *o = acc * inv;
        }
        let value = Tensor::from_vec(vec![n, c], out).expect("gap length");
        let needs = self.needs(x);
        Ok(self.push(value, needs, false, Op::GlobalAvgPool { x }))
    }

    /// Per-position max over channels: [N,C,sp...] -> [N,1,sp...]; first
    /// channel wins ties.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let xv = self.val(x);
        if xv.rank() < 3 {
            return Err(AdError::Invalid {
                op: "channel_max",
                detail: format!("expected rank >= 3, got {:?}", xv.shape()),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let spatial: usize = xv.shape()[2..].iter().product();
        let xd = xv.data();
        let mut out = vec![T::ZERO; n * spatial];
        let mut argmax = vec![0usize; n * spatial];
        for b in 0..n {
            for i in 0..spatial {
                let mut best = xd[(b * c) * spatial + i];
                let mut best_ch = 0usize;
                for ch in 1..c {
                    let v = xd[(b * c + ch) * spatial + i];
                    if v > best {
                        best = v;
                        best_ch = ch;
                    }
                }
                out[b * spatial + i] = best;
                argmax[b * spatial + i] = (b * c + best_ch) * spatial + i;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[1] = 1;
        let value = Tensor::from_vec(shape, out).expect("channel_max length");
        let needs = self.needs(x);
        Ok(self.push(value, needs, false, Op::ChannelMax { x, argmax }))
    }

    /// Concatenation along the channel axis (1); all other axes must match.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId, AdError> {
        if inputs.is_empty() {
            return Err(AdError::Invalid {
                op: "concat",
                detail: "needs at least one input".into(),
            });
        }
        let first = self.val(inputs[0]).shape().to_vec();
        let mut total_c = 0usize;
        for &id in inputs {
            let s = self.val(id).shape();
            if s.len() != first.len() || s.len() < 2 {
                return Err(AdError::Invalid {
                    op: "concat",
                    detail: format!("rank mismatch: {first:?} vs {s:?}"),
                });
            }
            for (axis, (&a, &b)) in first.iter().zip(s).enumerate() {
                if axis != 1 && a != b {
                    return Err(AdError::ShapeMismatch {
                        op: "concat",
                        axis,
                        detail: format!("{a} vs {b}"),
                    });
                }
            }
            total_c += s[1];
        }
        let n = first[0];
        let spatial: usize = first[2..].iter().product();
        let mut out = vec![T::ZERO; n * total_c * spatial];
        for b in 0..n {
            let mut c_base = 0usize;
            for &id in inputs {
                let v = self.val(id);
                let ci = v.shape()[1];
                let src = &v.data()[b * ci * spatial..][..ci * spatial];
                out[(b * total_c + c_base) * spatial..][..ci * spatial].copy_from_slice(src);
                c_base += ci;
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        let value = Tensor::from_vec(shape, out).expect("concat length");
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(value, needs, false, Op::Concat { inputs: inputs.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        let value = self.val(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, false, Op::Reshape { x }))
    }

    /// [N, ...] -> [N, prod(...)]
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let s = self.val(x).shape().to_vec();
        if s.is_empty() {
            return Err(AdError::Invalid {
                op: "flatten",
                detail: "rank-0 input".into(),
            });
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// Scalar sum, optionally weighted elementwise.
    pub fn reduce_sum(&mut self, x: NodeId, weights: Option<Tensor<T>>) -> Result<NodeId, AdError> {
        self.reduce_impl(x, weights, false)
    }

    /// Scalar mean (sum / element count), optionally weighted elementwise.
    pub fn reduce_mean(&mut self, x: NodeId, weights: Option<Tensor<T>>) -> Result<NodeId, AdError> {
        self.reduce_impl(x, weights, true)
    }

    fn reduce_impl(
        &mut self,
        x: NodeId,
        weights: Option<Tensor<T>>,
        mean: bool,
    ) -> Result<NodeId, AdError> {
        let xv = self.val(x);
        if let Some(w) = &weights {
            if w.shape() != xv.shape() {
                return Err(AdError::Invalid {
                    op: "reduce",
                    detail: format!("weights shape {:?} vs input {:?}", w.shape(), xv.shape()),
                });
            }
        }
        let mut acc = T::ZERO;
        match &weights {
            Some(w) => {
                for (v, wv) in xv.data().iter().zip(w.data()) {
                    acc += *v * *wv;
                }
            }
            None => {
                for v in xv.data() {
                    acc += *v;
                }
            }
        }
        if mean {
            acc /= T::from_f64(xv.len() as f64);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), needs, false, Op::ReduceSum { x, weights, mean }))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss; gradients land on requires-grad
    /// leaves. Intermediate gradients are freed as soon as they are consumed,
    /// and each node's op record is consumed too, so a tape cannot run
    /// backward twice.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AdError> {
        if self.backward_done {
            return Err(AdError::BackwardTwice);
        }
        self.backward_done = true;
        if self.val(loss).len() != 1 {
            return Err(AdError::NonScalarLoss(self.val(loss).shape().to_vec()));
        }
        self.grads[loss.0] = Some(Tensor::from_vec(self.val(loss).shape().to_vec(), vec![T::ONE]).expect("scalar"));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                self.grads[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                if !self.nodes[id].requires_grad {
                    self.grads[id] = None;
                }
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.propagate(id, op, g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Inputs always precede `id` on the tape, so accumulating into them
    /// never touches grads[id] again.
    fn propagate(&mut self, id: usize, op: Op<T>, g: Tensor<T>) {
        match op {
            Op::Leaf => unreachable!("leaves are handled in backward"),
            Op::Add { a, b } => {
                let ga = reduce_to_shape(g.data(), g.shape(), self.val(a).shape());
                let gb = reduce_to_shape(g.data(), g.shape(), self.val(b).shape());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub { a, b } => {
                let ga = reduce_to_shape(g.data(), g.shape(), self.val(a).shape());
                let mut gb = reduce_to_shape(g.data(), g.shape(), self.val(b).shape());
                for v in gb.data_mut() {
                    *v = -*v;
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul { a, b } => {
                let ga = {
                    let full = broadcast_zip(self.val(b), &g, g.shape(), |o, gi| o * gi);
                    reduce_to_shape(&full, g.shape(), self.val(a).shape())
                };
                let gb = {
                    let full = broadcast_zip(self.val(a), &g, g.shape(), |o, gi| o * gi);
                    reduce_to_shape(&full, g.shape(), self.val(b).shape())
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Maximum { a, b } => {
                let (ga, gb) = {
                    let av = self.val(a).data();
                    let bv = self.val(b).data();
                    let mut ga = vec![T::ZERO; av.len()];
                    let mut gb = vec![T::ZERO; bv.len()];
                    for i in 0..av.len() {
                        if bv[i] > av[i] {
                            gb[i] = g.data()[i];
                        } else {
                            ga[i] = g.data()[i];
                        }
                    }
                    let shape = self.val(a).shape().to_vec();
                    (
                        Tensor::from_vec(shape.clone(), ga).expect("len"),
                        Tensor::from_vec(shape, gb).expect("len"),
                    )
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale { x, k } => {
                let gx = g.map(|v| v * k);
                self.accumulate(x, gx);
            }
            Op::Relu { x } => {
                let gx = {
                    let xv = self.val(x);
                    let data: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > T::ZERO { gi } else { T::ZERO })
                        .collect();
                    Tensor::from_vec(xv.shape().to_vec(), data).expect("len")
                };
                self.accumulate(x, gx);
            }
            Op::Sigmoid { x } => {
                let gx = {
                    let yv = &self.nodes[id].value;
                    let data: Vec<T> = yv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yi, &gi)| gi * yi * (T::ONE - yi))
                        .collect();
                    Tensor::from_vec(yv.shape().to_vec(), data).expect("len")
                };
                self.accumulate(x, gx);
            }
            Op::Dense { x, w, b } => {
                let (n, k) = (self.val(x).shape()[0], self.val(x).shape()[1]);
                let m = self.val(w).shape()[1];
                let gd = g.data();
                let (gx, gw, gb) = {
                    let xd = self.val(x).data();
                    let wd = self.val(w).data();
                    let mut gx = vec![T::ZERO; n * k];
                    for i in 0..n {
                        let g_row = &gd[i * m..][..m];
                        let gx_row = &mut gx[i * k..][..k];
                        for kk in 0..k {
                            let w_row = &wd[kk * m..][..m];
                            let mut acc = T::ZERO;
                            for (gv, wv_) in g_row.iter().zip(w_row) {
                                acc += *gv * *wv_;
                            }
                            gx_row[kk] = acc;
                        }
                    }
                    let mut gw = vec![T::ZERO; k * m];
                    for i in 0..n {
                        let g_row = &gd[i * m..][..m];
                        let x_row = &xd[i * k..][..k];
                        for (kk, &xval) in x_row.iter().enumerate() {
                            let gw_row = &mut gw[kk * m..][..m];
                            for (o, gv) in gw_row.iter_mut().zip(g_row) {
                                *o += xval * *gv;
                            }
                        }
                    }
                    let gb = b.map(|_| {
                        let mut gb = vec![T::ZERO; m];
                        for i in 0..n {
                            for (o, gv) in gb.iter_mut().zip(&gd[i * m..][..m]) {
                                *o += *gv;
                            }
                        }
                        gb
                    });
                    (gx, gw, gb)
                };
                self.accumulate(x, Tensor::from_vec(vec![n, k], gx).expect("len"));
                self.accumulate(w, Tensor::from_vec(vec![k, m], gw).expect("len"));
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(b, Tensor::from_vec(vec![m], gb).expect("len"));
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                if self.needs(x) {
                    let gx = {
                        let mut gx = vec![T::ZERO; self.val(x).len()];
                        conv::backward_input(&geom, g.data(), self.val(w).data(), &mut gx);
                        Tensor::from_vec(self.val(x).shape().to_vec(), gx).expect("len")
                    };
                    self.accumulate(x, gx);
                }
                if self.needs(w) {
                    let gw = {
                        let mut gw = vec![T::ZERO; self.val(w).len()];
                        conv::backward_kernel(&geom, self.val(x).data(), g.data(), &mut gw);
                        Tensor::from_vec(self.val(w).shape().to_vec(), gw).expect("len")
                    };
                    self.accumulate(w, gw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let gb = conv::backward_bias(geom.batch, geom.out_ch, geom.out_spatial_len(), g.data());
                        self.accumulate(b, Tensor::from_vec(vec![geom.out_ch], gb).expect("len"));
                    }
                }
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                if self.needs(x) {
                    let gx = {
                        let mut gx = vec![T::ZERO; self.val(x).len()];
                        conv::forward(&geom, g.data(), self.val(w).data(), None, &mut gx);
                        Tensor::from_vec(self.val(x).shape().to_vec(), gx).expect("len")
                    };
                    self.accumulate(x, gx);
                }
                if self.needs(w) {
                    let gw = {
                        let mut gw = vec![T::ZERO; self.val(w).len()];
                        conv::backward_kernel(&geom, g.data(), self.val(x).data(), &mut gw);
                        Tensor::from_vec(self.val(w).shape().to_vec(), gw).expect("len")
                    };
                    self.accumulate(w, gw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let gb = conv::backward_bias(geom.batch, geom.in_ch, geom.in_spatial_len(), g.data());
                        self.accumulate(b, Tensor::from_vec(vec![geom.in_ch], gb).expect("len"));
                    }
                }
            }
            Op::MaxPool3d { x, argmax } => {
                let gx = {
                    let xv = self.val(x);
                    let mut gx = vec![T::ZERO; xv.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g.data()[o];
                    }
                    Tensor::from_vec(xv.shape().to_vec(), gx).expect("len")
                };
                self.accumulate(x, gx);
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train } => {
                let shape = self.val(x).shape().to_vec();
                let n = shape[0];
                let c = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let m = n * spatial;
                let gd = g.data();
                let xh = x_hat.data();

                let mut sum_g = vec![T::ZERO; c];
                let mut sum_gxh = vec![T::ZERO; c];
                for b_ix in 0..n {
                    for ch in 0..c {
                        let base = (b_ix * c + ch) * spatial;
                        let mut sg = T::ZERO;
                        let mut sgx = T::ZERO;
                        for i in 0..spatial {
                            sg += gd[base + i];
                            sgx += gd[base + i] * xh[base + i];
                        }
                        sum_g[ch] += sg;
                        sum_gxh[ch] += sgx;
                    }
                }
                if self.needs(x) {
                    let gx = {
                        let gv = self.val(gamma).data();
                        let count = T::from_f64(m as f64);
                        let mut gx = vec![T::ZERO; gd.len()];
                        for b_ix in 0..n {
                            for ch in 0..c {
                                let base = (b_ix * c + ch) * spatial;
                                let gmul = gv[ch] * inv_std[ch];
                                for i in 0..spatial {
                                    gx[base + i] = if train {
                                        gmul * (gd[base + i]
                                            - (sum_g[ch] + xh[base + i] * sum_gxh[ch]) / count)
                                    } else {
                                        gmul * gd[base + i]
                                    };
                                }
                            }
                        }
                        Tensor::from_vec(shape, gx).expect("len")
                    };
                    self.accumulate(x, gx);
                }
                self.accumulate(gamma, Tensor::from_vec(vec![c], sum_gxh).expect("len"));
                self.accumulate(beta, Tensor::from_vec(vec![c], sum_g).expect("len"));
            }
            Op::Dropout { x, mask, keep_scale } => {
                let data: Vec<T> = match &mask {
                    None => g.data().to_vec(),
                    Some(mask) => g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&gi, &keep)| if keep { gi * keep_scale } else { T::ZERO })
                        .collect(),
                };
                let shape = self.val(x).shape().to_vec();
                self.accumulate(x, Tensor::from_vec(shape, data).expect("len"));
            }
            Op::GlobalAvgPool { x } => {
                let gx = {
                    let xv = self.val(x);
                    let (n, c) = (xv.shape()[0], xv.shape()[1]);
                    let spatial: usize = xv.shape()[2..].iter().product();
                    let inv = T::from_f64(1.0 / spatial as f64);
                    let mut gx = vec![T::ZERO; xv.len()];
                    for nc in 0..n * c {
                        let gval = g.data()[nc] * inv;
                        for v in &mut gx[nc * spatial..][..spatial] {
                            *v = gval;
                        }
                    }
                    Tensor::from_vec(xv.shape().to_vec(), gx).expect("len")
                };
                self.accumulate(x, gx);
            }
            Op::ChannelMax { x, argmax } => {
                let gx = {
                    let xv = self.val(x);
                    let mut gx = vec![T::ZERO; xv.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g.data()[o];
                    }
                    Tensor::from_vec(xv.shape().to_vec(), gx).expect("len")
                };
                self.accumulate(x, gx);
            }
            Op::Concat { inputs } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let out_c = out_shape[1];
                let n = out_shape[0];
                let spatial: usize = out_shape[2..].iter().product();
                let mut c_base = 0usize;
                for inp in inputs {
                    let shape = self.val(inp).shape().to_vec();
                    let ci = shape[1];
                    let mut gi = vec![T::ZERO; n * ci * spatial];
                    for b_ix in 0..n {
                        let src = &g.data()[(b_ix * out_c + c_base) * spatial..][..ci * spatial];
                        gi[b_ix * ci * spatial..][..ci * spatial].copy_from_slice(src);
                    }
                    self.accumulate(inp, Tensor::from_vec(shape, gi).expect("len"));
                    c_base += ci;
                }
            }
            Op::Reshape { x } => {
                let shape = self.val(x).shape().to_vec();
                let t = g.reshape(&shape).expect("reshape backward");
                self.accumulate(x, t);
            }
            Op::ReduceSum { x, weights, mean } => {
                let (shape, len) = (self.val(x).shape().to_vec(), self.val(x).len());
                let mut gval = g.data()[0];
                if mean {
                    gval /= T::from_f64(len as f64);
                }
                let data: Vec<T> = match &weights {
                    Some(w) => w.data().iter().map(|&wi| gval * wi).collect(),
                    None => vec![gval; len],
                };
                self.accumulate(x, Tensor::from_vec(shape, data).expect("len"));
            }
        }
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), AdError> {
    if a.len() != b.len() {
        return Err(AdError::Invalid {
            op,
            detail: format!("rank mismatch: {a:?} vs {b:?}"),
        });
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(AdError::ShapeMismatch {
                op,
                axis,
                detail: format!("{x} vs {y}"),
            });
        }
    }
    Ok(())
}

/// Equal-rank broadcasting: each axis pair must match or contain a 1.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, AdError> {
    if a.len() != b.len() {
        return Err(AdError::Invalid {
            op,
            detail: format!("rank mismatch: {a:?} vs {b:?} (broadcasting is rank-matched)"),
        });
    }
    let mut out = Vec::with_capacity(a.len());
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x == y || x == 1 || y == 1 {
            out.push(x.max(y));
        } else {
            return Err(AdError::ShapeMismatch {
                op,
                axis,
                detail: format!("{x} vs {y}"),
            });
        }
    }
    Ok(out)
}

/// Row-major strides with zeros on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == out_shape[i] { acc } else { 0 };
        acc *= shape[i];
    }
    strides
}

fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (ad, bd) = (a.data(), b.data());
    let (mut ao, mut bo) = (0usize, 0usize);
    loop {
        out.push(f(ad[ao], bd[bo]));
        let mut axis = rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            ao += sa[axis];
            bo += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            ao -= sa[axis] * out_shape[axis];
            bo -= sb[axis] * out_shape[axis];
        }
    }
}

/// Sums `g` (shaped `g_shape`) over the axes where `target` has extent 1.
fn reduce_to_shape<T: Scalar>(g: &[T], g_shape: &[usize], target: &[usize]) -> Tensor<T> {
    if g_shape == target {
        return Tensor::from_vec(target.to_vec(), g.to_vec()).expect("len");
    }
    let mut out = Tensor::zeros(target);
    let st = broadcast_strides(target, g_shape);
    let rank = g_shape.len();
    let mut idx = vec![0usize; rank];
    let mut to = 0usize;
    let out_data = out.data_mut();
    let mut flat = 0usize;
    loop {
        out_data[to] += g[flat];
        flat += 1;
        if flat == g.len() {
            break;
        }
        let mut axis = rank;
        loop {
            axis -= 1;
            idx[axis] += 1;
            to += st[axis];
            if idx[axis] < g_shape[axis] {
                break;
            }
            idx[axis] = 0;
            to -= st[axis] * g_shape[axis];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.reduce_sum(sq, None).unwrap();
        assert_eq!(tape.value(loss).data()[0], 14.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[5.0, -1.0, 0.5, 2.0]), true);
        let loss = tape.reduce_sum(x, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[-2.0, 3.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(t64(&[3, 3], &eye), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[2.0]), true);
        let loss = tape.reduce_sum(x, None).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(AdError::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(AdError::NonScalarLoss(_))));
    }

    #[test]
    fn maxpool_takes_max_and_routes_to_first_tie() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            t64(&[1, 1, 2, 2, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]),
            true,
        );
        let y = tape.maxpool3d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let loss = tape.reduce_sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        // all-equal window: gradient to the first element
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2, 2], &[4.0; 8]), true);
        let y = tape.maxpool3d(x, 2, 2).unwrap();
        let loss = tape.reduce_sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.dropout(x, 0.0, true, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let z = tape.dropout(x, 0.7, false, 1).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[10_000], 1.0), false);
        let y = tape.dropout(x, 0.5, true, 12345).unwrap();
        let survivors = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "survivor fraction {frac}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_fn(&[4, 3, 2, 2, 2], |i| ((i * 7) % 17) as f64 * 0.37 - 1.0),
            false,
        );
        let gamma = tape.leaf(Tensor::filled(&[3], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(&[3]), false);
        let mut state = BnState::new(3);
        let y = tape
            .batchnorm(x, gamma, beta, &mut state, BnMode::Train, 0.1, 1e-5)
            .unwrap();
        let yd = tape.value(y).data();
        let (n, c, spatial) = (4usize, 3usize, 8usize);
        for ch in 0..c {
            let mut mean = 0.0;
            for b in 0..n {
                for i in 0..spatial {
                    mean += yd[(b * c + ch) * spatial + i];
                }
            }
            mean /= (n * spatial) as f64;
            let mut var = 0.0;
            for b in 0..n {
                for i in 0..spatial {
                    let d = yd[(b * c + ch) * spatial + i] - mean;
                    var += d * d;
                }
            }
            var /= (n * spatial) as f64;
            assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
        // running stats moved toward batch stats
        assert!(state.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_eval_identity_with_unit_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2, 2, 2], |i| i as f64 * 0.1), false);
        let gamma = tape.leaf(Tensor::filled(&[3], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(&[3]), false);
        let mut state = BnState::new(3); // mean 0, var 1
        let y = tape
            .batchnorm(x, gamma, beta, &mut state, BnMode::Eval, 0.1, 1e-8)
            .unwrap();
        for (a, b) in tape.value(x).data().iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_and_split_back() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::filled(&[1, 2, 1, 1, 2], 1.0), true);
        let b = tape.leaf(Tensor::filled(&[1, 3, 1, 1, 2], 2.0), true);
        let y = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 1, 1, 2]);
        assert_eq!(tape.value(y).data()[..4], [1.0, 1.0, 1.0, 1.0]);
        let loss = tape.reduce_sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().len(), 4);
        assert_eq!(tape.grad(b).unwrap().len(), 6);
    }

    #[test]
    fn channel_max_reduces_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 2, 1, 1, 2], &[1.0, 5.0, 3.0, 2.0]), true);
        let y = tape.channel_max(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let loss = tape.reduce_sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_mul_channel_gate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[2, 3, 1, 1, 4], 2.0), true);
        let gate = tape.leaf(Tensor::from_fn(&[2, 3, 1, 1, 1], |i| (i + 1) as f64), true);
        let y = tape.mul(x, gate).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 1, 1, 4]);
        assert_eq!(tape.value(y).data()[2 * 4], 6.0); // sample 0, channel 2 gate=3
        let loss = tape.reduce_sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(gate).unwrap().data(), &[8.0; 6]);
    }

    #[test]
    fn weighted_reduce_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let w = Tensor::from_vec(vec![3], vec![0.5, 1.0, 2.0]).unwrap();
        let loss = tape.reduce_sum(x, Some(w)).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.5 + 2.0 + 6.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 1.0, 2.0]);
    }

    #[test]
    fn conv_identity_and_sum_examples() {
        // all-ones 3^3 kernel over all-ones 3^3 input -> 27
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 3, 3, 3], 1.0), false);
        let w = tape.leaf(Tensor::filled(&[1, 1, 3, 3, 3], 1.0), false);
        let y = tape.conv3d(x, w, None, ConvSpec::unit()).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[27.0]);

        // identity kernel with padding 1 reproduces the input
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 3, 3, 3], |i| i as f64 - 13.0), false);
        let mut ident = Tensor::zeros(&[1, 1, 3, 3, 3]);
        ident.data_mut()[13] = 1.0;
        let w = tape.leaf(ident, false);
        let spec = ConvSpec { stride: 1, padding: 1, dilation: 1 };
        let y = tape.conv3d(x, w, None, spec).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_transpose_doubles_extent_with_k4_p1() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[2, 3, 4, 2, 2], 1.0), false);
        let w = tape.leaf(Tensor::filled(&[3, 5, 4, 4, 4], 0.1), false);
        let spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
        let y = tape.conv3d_transpose(x, w, None, spec).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 8, 4, 4]);
    }

    #[test]
    fn conv_transpose_checkerboard_witness() {
        // Constant input, uniform kernel, stride 2, k=3: output counts
        // alternate between 1 and 2 contributing taps per axis.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 1, 1, 4], 1.0), false);
        let w = tape.leaf(Tensor::filled(&[1, 1, 1, 1, 3], 1.0), false);
        let spec = ConvSpec { stride: 2, padding: 0, dilation: 1 };
        let y = tape.conv3d_transpose(x, w, None, spec).unwrap();
        let vals = tape.value(y).data();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max > min, "expected non-uniform output, got {vals:?}");
    }

    #[test]
    fn conv_transpose_adjoint_identity() {
        // <conv(x), y> == <x, conv_transpose(y)> with shared kernel.
        use rand_chacha::rand_core::{RngCore, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut unit = move || ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
        let spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };

        let x_t = Tensor::from_fn(&[2, 3, 6, 4, 4], |_| unit());
        let w_t = Tensor::from_fn(&[2, 3, 4, 4, 4], |_| unit()); // [F=2, C=3]
        let y_t = Tensor::from_fn(&[2, 2, 3, 2, 2], |_| unit()); // conv output shape

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x_t.clone(), false);
        let w = tape.leaf(w_t.clone(), false);
        let conv_x = tape.conv3d(x, w, None, spec).unwrap();
        assert_eq!(tape.value(conv_x).shape(), y_t.shape());
        let lhs: f64 = tape
            .value(conv_x)
            .data()
            .iter()
            .zip(y_t.data())
            .map(|(a, b)| a * b)
            .sum();

        let mut tape2 = Tape::<f64>::new();
        let y = tape2.leaf(y_t, false);
        let w2 = tape2.leaf(w_t, false);
        let back = tape2.conv3d_transpose(y, w2, None, spec).unwrap();
        assert_eq!(tape2.value(back).shape(), x_t.shape());
        let rhs: f64 = tape2
            .value(back)
            .data()
            .iter()
            .zip(x_t.data())
            .map(|(a, b)| a * b)
            .sum();

        let rel = (lhs - rhs).abs() / lhs.abs().max(1e-12);
        assert!(rel < 1e-5, "adjoint identity violated: {lhs} vs {rhs}");
    }
}
