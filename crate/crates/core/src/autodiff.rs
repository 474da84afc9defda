//! Recorded-graph reverse-mode differentiation over the crate's fixed
//! operation vocabulary.
//!
//! A [`Graph`] evaluates eagerly while recording every operation. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every node plus a flat gradient vector aligned with
//! the parameter index of the model (see [`crate::model::ModelParams`]).
//!
//! Complex tensors are stored as real fields with a trailing `(re, im)` axis;
//! gradients of complex quantities are the pair `(dL/d re, dL/d im)`.

use crate::error::{shape_err, Error, Result};
use crate::field::{gelu, gelu_grad, gemm_a_bt, gemm_at_b, gemm_view, relu, ComplexField, Field, View};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to prove that gradient checking
/// can detect a broken rule.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the coefficient gradient of the per-bin scaling op by 1.5.
    LambdaGradient,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        offset: usize,
    },
    Add(NodeId, NodeId),
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    MatMul {
        x: NodeId,
        w: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
    Concat(Vec<NodeId>),
    Rdft {
        x: NodeId,
        axes: Vec<usize>,
    },
    Irdft {
        x: NodeId,
        axes: Vec<usize>,
    },
    ComplexBlockLinear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        blocks: usize,
    },
    ScaleBins {
        x: NodeId,
        lambda: NodeId,
        site_bin: Vec<usize>,
    },
    PerBinMatmul {
        x: NodeId,
        w: NodeId,
        site_bin: Vec<usize>,
    },
    WeightedSse {
        pred: NodeId,
        target: Vec<f64>,
        weights: Vec<f64>,
        scale: f64,
    },
    Sum(Vec<NodeId>),
}

struct Node {
    value: Field,
    op: Op,
    /// Whether any parameter or tracked leaf feeds this node.
    grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param { .. } => Vec::new(),
            Op::Add(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MatMul { x, w } => vec![*x, *w],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gelu(x) | Op::Relu(x) | Op::Scale(x, _) => vec![*x],
            Op::Gather { x, .. } | Op::Rdft { x, .. } | Op::Irdft { x, .. } => vec![*x],
            Op::Concat(parts) | Op::Sum(parts) => parts.clone(),
            Op::ComplexBlockLinear { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::ScaleBins { x, lambda, .. } => vec![*x, *lambda],
            Op::PerBinMatmul { x, w, .. } => vec![*x, *w],
            Op::WeightedSse { pred, .. } => vec![*pred],
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    /// Flat gradient aligned with the parameter index.
    pub params: Vec<f64>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf made by [`Graph::constant`] (zeros if
    /// unreachable). Intermediate gradients are released during the pass.
    pub fn wrt(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.nodes[id.0].clone().unwrap_or_else(|| vec![0.0; len])
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    param_len: usize,
    fault: Option<Fault>,
}

impl Graph {
    /// A graph whose parameter leaves index into a flat vector of `param_len`.
    pub fn new(param_len: usize) -> Self {
        Self {
            nodes: Vec::new(),
            param_len,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Field {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Field, op: Op) -> NodeId {
        let grad = match op {
            Op::Leaf => true,
            Op::Param { .. } => true,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].grad),
        };
        self.nodes.push(Node { value, op, grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is available through [`Gradients::wrt`].
    pub fn constant(&mut self, value: Field) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives a gradient; work feeding only from such
    /// leaves is skipped in the reverse pass.
    pub fn fixed(&mut self, value: Field) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A learnable leaf whose gradient lands at `offset..offset + len`.
    pub fn param(&mut self, value: Field, offset: usize) -> Result<NodeId> {
        if offset + value.len() > self.param_len {
            return Err(Error::State(format!(
                "parameter slot {offset}+{} exceeds flat length {}",
                value.len(),
                self.param_len
            )));
        }
        Ok(self.push(value, Op::Param { offset }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_bias(self.value(bias).data())?;
        Ok(self.push(v, Op::AddBias { x, bias }))
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let v = self.value(x).matmul(self.value(w))?;
        Ok(self.push(v, Op::MatMul { x, w }))
    }

    /// `x @ w + b` over the trailing axis.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&0);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if c == 0 || g.len() != c || b.len() != c {
            return shape_err(format!("layer_norm over {c} with gain {} bias {}", g.len(), b.len()));
        }
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let lane = &xv.data()[r * c..(r + 1) * c];
            let mean = lane.iter().sum::<f64>() / c as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..c {
                let h = (lane[k] - mean) * rs;
                xhat[r * c + k] = h;
                out[r * c + k] = h * g[k] + b[k];
            }
        }
        let v = Field::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(relu);
        self.push(v, Op::Relu(x))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. Repeated source
    /// indices are allowed (gradients accumulate).
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return shape_err(format!("gather of {} into {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return shape_err(format!("gather index {bad} out of {}", src.len()));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Field::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::Gather { x, index }))
    }

    /// Concatenates flat data of `parts` and views it as `shape`.
    pub fn concat(&mut self, parts: &[NodeId], shape: &[usize]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Field::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn rdft(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = spectral::rdft(self.value(x), axes)?.into_pairs();
        Ok(self.push(
            v,
            Op::Rdft {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn irdft(&mut self, x: NodeId, axes: &[usize], extents: &[usize]) -> Result<NodeId> {
        let cf = ComplexField::from_pairs(self.value(x).clone())?;
        let v = spectral::irdft(&cf, axes, extents)?;
        Ok(self.push(
            v,
            Op::Irdft {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Real `(2m x 2m)` matrices acting on interleaved `(re, im)` row vectors,
/// one per block of the complex weights `w (k, m, m, 2)` stored `[out][in]`.
fn real_block_matrices(w: &[f64], blocks: usize, m: usize) -> Vec<f64> {
    let n = 2 * m;
    let mut out = vec![0.0; blocks * n * n];
    for blk in 0..blocks {
        let mat = &mut out[blk * n * n..(blk + 1) * n * n];
        for o in 0..m {
            for i in 0..m {
                let wi = 2 * ((blk * m + o) * m + i);
                let (re, im) = (w[wi], w[wi + 1]);
                mat[2 * i * n + 2 * o] = re;
                mat[(2 * i + 1) * n + 2 * o] = -im;
                mat[2 * i * n + 2 * o + 1] = im;
                mat[(2 * i + 1) * n + 2 * o + 1] = re;
            }
        }
    }
    out
}

/// Block-diagonal complex linear map over the channel axis:
    /// `x (..., D, 2)`, `w (k, m, m, 2)` with `D = k m`, optional `b (D, 2)`.
    pub fn complex_block_linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        blocks: usize,
    ) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = complex_channels(xv.shape())?;
        if blocks == 0 || d % blocks != 0 {
            return shape_err(format!("{d} channels not divisible into {blocks} blocks"));
        }
        let m = d / blocks;
        if wv.shape() != [blocks, m, m, 2] {
            return shape_err(format!("block weights {:?} for k={blocks} m={m}", wv.shape()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [d, 2] {
                return shape_err(format!("complex bias {:?} for D={d}", self.value(b).shape()));
            }
        }
        let xs = xv.data();
        let mut out = vec![0.0; xs.len()];
        if let Some(b) = b {
            let bb = self.value(b).data();
            for row in out.chunks_exact_mut(2 * d) {
                row.copy_from_slice(bb);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        let sites = xs.len() / (2 * d);
        let mats = Self::real_block_matrices(wv.data(), blocks, m);
        let n = 2 * m;
        for (blk, mat) in mats.chunks_exact(n * n).enumerate() {
            let v = View::rows(blk * n, 2 * d);
            gemm_view(sites, n, n, (xs, v), (mat, View::rows(0, n)), beta, (&mut out, v));
        }
        let v = Field::new(xv.shape().to_vec(), out)?;
        Ok(self.push(v, Op::ComplexBlockLinear { x, w, b, blocks }))
    }

    /// Multiplies every complex channel vector at site `s` by the real
    /// coefficient `lambda[site_bin[s]]`.
    pub fn scale_bins(&mut self, x: NodeId, lambda: NodeId, site_bin: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        let d = complex_channels(xv.shape())?;
        let lam = self.value(lambda).data();
        let sites = xv.len() / (2 * d);
        if site_bin.len() != sites || site_bin.iter().any(|&b| b >= lam.len()) {
            return shape_err(format!(
                "site map of {} for {sites} sites and {} coefficients",
                site_bin.len(),
                lam.len()
            ));
        }
        let mut out = xv.data().to_vec();
        for (s, &bin) in site_bin.iter().enumerate() {
            for v in &mut out[2 * s * d..2 * (s + 1) * d] {
                *v *= lam[bin];
            }
        }
        let v = Field::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::ScaleBins {
                x,
                lambda,
                site_bin,
            },
        ))
    }

    /// Independent complex `D x D` matrix per frequency bin:
    /// `w (bins, D, D, 2)`, `y[s] = w[site_bin[s]] x[s]`.
    pub fn per_bin_matmul(&mut self, x: NodeId, w: NodeId, site_bin: Vec<usize>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = complex_channels(xv.shape())?;
        let sites = xv.len() / (2 * d);
        let ws = wv.data();
        let bins = if wv.rank() == 4 { wv.shape()[0] } else { 0 };
        if wv.shape() != [bins, d, d, 2] || site_bin.len() != sites || site_bin.iter().any(|&b| b >= bins)
        {
            return shape_err(format!("per-bin weights {:?} for D={d}, {sites} sites", wv.shape()));
        }
        let xs = xv.data();
        let mut out = vec![0.0; xs.len()];
        for (s, &bin) in site_bin.iter().enumerate() {
            let xo = 2 * s * d;
            for o in 0..d {
                let (mut re, mut im) = (0.0, 0.0);
                let wrow = 2 * ((bin * d + o) * d);
                for i in 0..d {
                    let (wr, wi) = (ws[wrow + 2 * i], ws[wrow + 2 * i + 1]);
                    let (zr, zi) = (xs[xo + 2 * i], xs[xo + 2 * i + 1]);
                    re += wr * zr - wi * zi;
                    im += wr * zi + wi * zr;
                }
                out[xo + 2 * o] = re;
                out[xo + 2 * o + 1] = im;
            }
        }
        let v = Field::new(xv.shape().to_vec(), out)?;
        Ok(self.push(v, Op::PerBinMatmul { x, w, site_bin }))
    }

    /// Scalar `scale * sum_i weights[i] (pred_i - target_i)^2`.
    pub fn weighted_sse(&mut self, pred: NodeId, target: &Field, weights: Vec<f64>, scale: f64) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weights.len() != p.len() {
            return shape_err(format!(
                "loss between {:?} and {:?} with {} weights",
                p.shape(),
                target.shape(),
                weights.len()
            ));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(&weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum();
        let v = Field::new(vec![], vec![s * scale])?;
        Ok(self.push(
            v,
            Op::WeightedSse {
                pred,
                target: target.data().to_vec(),
                weights,
                scale,
            },
        ))
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut s = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return shape_err(format!("sum_scalars over non-scalar {:?}", v.shape()));
            }
            s += v.data()[0];
        }
        let v = Field::new(vec![], vec![s])?;
        Ok(self.push(v, Op::Sum(parts.to_vec())))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward on a node that was never recorded".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut params = vec![0.0; self.param_len];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param { offset } => {
                    for (p, v) in params[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *p += v;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, self, *a, &g);
                    accumulate(&mut grads, self, *b, &g);
                }
                Op::AddBias { x, bias } => {
                    let c = self.value(*bias).len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, self, *x, &g);
                    accumulate_owned(&mut grads, self, *bias, gb);
                }
                Op::MatMul { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (k, m) = (wv.shape()[0], wv.shape()[1]);
                    let rows = if k == 0 { 0 } else { xv.len() / k };
                    if self.nodes[x.0].grad {
                        gemm_a_bt(rows, k, m, &g, wv.data(), slot(&mut grads, self, *x));
                    }
                    if self.nodes[w.0].grad {
                        gemm_at_b(rows, k, m, xv.data(), &g, slot(&mut grads, self, *w));
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let c = gv.len();
                    let mut gg = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    let mut gx = vec![0.0; g.len()];
                    let mut dxh = vec![0.0; c];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let lane = r * c..(r + 1) * c;
                        let (gl, hl) = (&g[lane.clone()], &xhat[lane.clone()]);
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for k in 0..c {
                            gg[k] += gl[k] * hl[k];
                            gbias[k] += gl[k];
                            dxh[k] = gl[k] * gv[k];
                            m1 += dxh[k];
                            m2 += dxh[k] * hl[k];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for k in 0..c {
                            gx[r * c + k] = rs * (dxh[k] - m1 - hl[k] * m2);
                        }
                    }
                    accumulate_owned(&mut grads, self, *x, gx);
                    accumulate_owned(&mut grads, self, *gain, gg);
                    accumulate_owned(&mut grads, self, *bias, gbias);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect();
                    accumulate_owned(&mut grads, self, *x, gx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate_owned(&mut grads, self, *x, gx);
                }
                Op::Scale(x, s) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate_owned(&mut grads, self, *x, gx);
                }
                Op::Gather { x, index } if self.nodes[x.0].grad => {
                    let gx = slot(&mut grads, self, *x);
                    for (&src, v) in index.iter().zip(&g) {
                        gx[src] += v;
                    }
                }
                Op::Gather { .. } => {}
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accumulate(&mut grads, self, p, &g[at..at + n]);
                        at += n;
                    }
                }
                Op::Rdft { x, axes } => {
                    let gc = ComplexField::from_pairs(Field::new(node.value.shape().to_vec(), g.clone())?)?;
                    let gx = spectral::rdft_adjoint(&gc, axes, self.value(*x).shape())?;
                    accumulate(&mut grads, self, *x, gx.data());
                }
                Op::Irdft { x, axes } => {
                    let gf = Field::new(node.value.shape().to_vec(), g.clone())?;
                    let gx = spectral::irdft_adjoint(&gf, axes)?.into_pairs();
                    accumulate(&mut grads, self, *x, gx.data());
                }
                Op::ComplexBlockLinear { x, w, b, blocks } => {
                    let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                    let d = complex_channels(self.value(*x).shape())?;
                    let m = d / blocks;
                    let sites = xs.len() / (2 * d);
                    let n = 2 * m;
                    let mats = Self::real_block_matrices(ws, *blocks, m);
                    let mut gx = vec![0.0; xs.len()];
                    let mut gm = vec![0.0; mats.len()];
                    let mut gb = vec![0.0; 2 * d];
                    for row in g.chunks_exact(2 * d) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    for blk in 0..*blocks {
                        let v = View::rows(blk * n, 2 * d);
                        let mv = View::rows(blk * n * n, n);
                        gemm_view(sites, n, n, (&g, v), (&mats, mv.t()), 0.0, (&mut gx, v));
                        gemm_view(n, sites, n, (xs, v.t()), (&g, v), 0.0, (&mut gm, mv));
                    }
                    let mut gw = vec![0.0; ws.len()];
                    for blk in 0..*blocks {
                        let gmb = &gm[blk * n * n..(blk + 1) * n * n];
                        for o in 0..m {
                            for i in 0..m {
                                let at = |r: usize, c: usize| gmb[r * n + c];
                                let wi = 2 * ((blk * m + o) * m + i);
                                gw[wi] = at(2 * i, 2 * o) + at(2 * i + 1, 2 * o + 1);
                                gw[wi + 1] = at(2 * i, 2 * o + 1) - at(2 * i + 1, 2 * o);
                            }
                        }
                    }
                    accumulate_owned(&mut grads, self, *x, gx);
                    accumulate_owned(&mut grads, self, *w, gw);
                    if let Some(b) = b {
                        accumulate_owned(&mut grads, self, *b, gb);
                    }
                }
                Op::ScaleBins {
                    x,
                    lambda,
                    site_bin,
                } => {
                    let xs = self.value(*x).data();
                    let lam = self.value(*lambda).data();
                    let d = complex_channels(self.value(*x).shape())?;
                    let mut gx = vec![0.0; xs.len()];
                    let mut gl = vec![0.0; lam.len()];
                    for (s, &bin) in site_bin.iter().enumerate() {
                        let r = 2 * s * d..2 * (s + 1) * d;
                        let mut acc = 0.0;
                        for j in r {
                            gx[j] = g[j] * lam[bin];
                            acc += g[j] * xs[j];
                        }
                        gl[bin] += acc;
                    }
                    if self.fault == Some(Fault::LambdaGradient) {
                        gl.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    accumulate_owned(&mut grads, self, *x, gx);
                    accumulate_owned(&mut grads, self, *lambda, gl);
                }
                Op::PerBinMatmul { x, w, site_bin } => {
                    let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                    let d = complex_channels(self.value(*x).shape())?;
                    let mut gx = vec![0.0; xs.len()];
                    let mut gw = vec![0.0; ws.len()];
                    for (s, &bin) in site_bin.iter().enumerate() {
                        let xo = 2 * s * d;
                        for o in 0..d {
                            let (gr, gi) = (g[xo + 2 * o], g[xo + 2 * o + 1]);
                            let wrow = 2 * ((bin * d + o) * d);
                            for i in 0..d {
                                let wi_ = wrow + 2 * i;
                                let (wr, wi) = (ws[wi_], ws[wi_ + 1]);
                                let (zr, zi) = (xs[xo + 2 * i], xs[xo + 2 * i + 1]);
                                gx[xo + 2 * i] += wr * gr + wi * gi;
                                gx[xo + 2 * i + 1] += wr * gi - wi * gr;
                                gw[wi_] += gr * zr + gi * zi;
                                gw[wi_ + 1] += gi * zr - gr * zi;
                            }
                        }
                    }
                    accumulate_owned(&mut grads, self, *x, gx);
                    accumulate_owned(&mut grads, self, *w, gw);
                }
                Op::WeightedSse {
                    pred,
                    target,
                    weights,
                    scale,
                } => {
                    let p = self.value(*pred).data();
                    let gp: Vec<f64> = p
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((a, b), w)| 2.0 * scale * w * (a - b) * g[0])
                        .collect();
                    accumulate_owned(&mut grads, self, *pred, gp);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, self, p, &g);
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn complex_channels(shape: &[usize]) -> Result<usize> {
    match shape {
        [.., d, 2] if *d > 0 => Ok(*d),
        _ => shape_err(format!("expected (..., D, 2) complex layout, got {shape:?}")),
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], g: &Graph, id: NodeId) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; g.nodes[id.0].value.len()])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], g: &Graph, id: NodeId, v: &[f64]) {
    if !g.nodes[id.0].grad {
        return;
    }
    let s = slot(grads, g, id);
    for (a, b) in s.iter_mut().zip(v) {
        *a += b;
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], g: &Graph, id: NodeId, v: Vec<f64>) {
    if !g.nodes[id.0].grad {
        return;
    }
    match &mut grads[id.0] {
        Some(s) => s.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(v),
    }
}
