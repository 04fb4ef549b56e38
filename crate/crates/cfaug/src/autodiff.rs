//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` records ops as nodes; forward values are computed eagerly at
//! recording time and `backward` walks the tape in reverse, accumulating
//! gradients into every node. Leaves (parameters and inputs) read their
//! gradients back after the sweep.

use crate::error::{CfaugError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type NodeId = usize;

enum Op {
    Leaf,
    /// 3x3 convolution, stride 1, zero padding 1. Input [inC,H,W],
    /// weight [outC,inC,3,3], bias [outC], output [outC,H,W].
    Conv3x3 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    /// 2x2 max pool, stride 2; argmax holds the flat input index feeding
    /// each output element.
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    /// Dense layer on the flattened input. Weight [out,in], bias [out].
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// value = -sum_i target_i * log softmax(logits)_i + constant.
    /// Covers hard-label CE (one-hot target), label smoothing, and the
    /// KL-against-uniform losses (constant = sum t log t).
    SoftTargetCe {
        logits: NodeId,
        target: Vec<f64>,
    },
    /// -log(1 - p_y) with p_y clamped to at most 1 - 1e-7.
    CfNll {
        logits: NodeId,
        label: usize,
    },
    SelectLogit {
        logits: NodeId,
        class: usize,
    },
    SumAll {
        input: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

pub const CF_PROB_CLAMP: f64 = 1.0 - 1e-7;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Stable log softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let n = value.len();
        self.values.push(value);
        self.grads.push(vec![0.0; n]);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }

    pub fn conv3x3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (inp, w, b) = (&self.values[input], &self.values[weight], &self.values[bias]);
        let (in_c, h, wd) = (inp.shape[0], inp.shape[1], inp.shape[2]);
        let out_c = w.shape[0];
        assert_eq!(w.shape, vec![out_c, in_c, 3, 3]);
        assert_eq!(b.shape, vec![out_c]);
        let mut out = vec![0.0; out_c * h * wd];
        for o in 0..out_c {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = b.data[o];
                    for i in 0..in_c {
                        for ky in 0..3usize {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data[((o * in_c + i) * 3 + ky) * 3 + kx]
                                    * inp.data[(i * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * wd + x] = acc;
                }
            }
        }
        self.push(
            Tensor::new(vec![out_c, h, wd], out),
            Op::Conv3x3 {
                input,
                weight,
                bias,
            },
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = &self.values[input];
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x.max(0.0)).collect());
        self.push(out, Op::Relu { input })
    }

    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let v = &self.values[input];
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                            if v.data[i] > best {
                                best = v.data[i];
                                best_i = i;
                            }
                        }
                    }
                    out[(ch * oh + y) * ow + x] = best;
                    argmax[(ch * oh + y) * ow + x] = best_i;
                }
            }
        }
        self.push(
            Tensor::new(vec![c, oh, ow], out),
            Op::MaxPool2 { input, argmax },
        )
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (inp, w, b) = (&self.values[input], &self.values[weight], &self.values[bias]);
        let n_in = inp.len();
        let n_out = w.shape[0];
        assert_eq!(w.shape[1], n_in);
        let mut out = vec![0.0; n_out];
        for o in 0..n_out {
            let row = &w.data[o * n_in..(o + 1) * n_in];
            out[o] = b.data[o]
                + row
                    .iter()
                    .zip(inp.data.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
        self.push(Tensor::new(vec![n_out], out), Op::Linear {
            input,
            weight,
            bias,
        })
    }

    pub fn soft_target_ce(&mut self, logits: NodeId, target: Vec<f64>) -> NodeId {
        let lp = log_softmax(&self.values[logits].data);
        assert_eq!(lp.len(), target.len());
        let loss = -target.iter().zip(lp.iter()).map(|(t, l)| t * l).sum::<f64>();
        self.push(Tensor::scalar(loss), Op::SoftTargetCe { logits, target })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        let k = self.values[logits].len();
        let mut target = vec![0.0; k];
        target[label] = 1.0;
        self.soft_target_ce(logits, target)
    }

    pub fn cf_nll(&mut self, logits: NodeId, label: usize) -> NodeId {
        let p = softmax(&self.values[logits].data);
        let py = p[label].min(CF_PROB_CLAMP);
        let loss = -(1.0 - py).ln();
        self.push(Tensor::scalar(loss), Op::CfNll { logits, label })
    }

    pub fn select_logit(&mut self, logits: NodeId, class: usize) -> NodeId {
        let v = self.values[logits].data[class];
        self.push(Tensor::scalar(v), Op::SelectLogit { logits, class })
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s = self.values[input].data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { input })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let s = terms
            .iter()
            .map(|(id, w)| {
                assert_eq!(self.values[*id].len(), 1);
                self.values[*id].data[0] * w
            })
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { terms })
    }

    /// Reverse sweep from a scalar node, seeding its gradient with 1.
    pub fn backward(&mut self, from: NodeId) -> Result<()> {
        if self.values[from].len() != 1 {
            return Err(CfaugError::InvalidArgument(
                "backward requires a scalar node".into(),
            ));
        }
        self.grads[from][0] += 1.0;
        for id in (0..=from).rev() {
            // split borrows: gradients of earlier nodes are written while
            // reading this node's grad and values
            let (gh, gt) = self.grads.split_at_mut(id);
            let gout = &gt[0];
            if gout.iter().all(|g| *g == 0.0) {
                continue;
            }
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Conv3x3 {
                    input,
                    weight,
                    bias,
                } => {
                    let inp = &self.values[*input];
                    let w = &self.values[*weight];
                    let (in_c, h, wd) = (inp.shape[0], inp.shape[1], inp.shape[2]);
                    let out_c = w.shape[0];
                    // bias grad
                    for o in 0..out_c {
                        let mut acc = 0.0;
                        for p in 0..h * wd {
                            acc += gout[o * h * wd + p];
                        }
                        gh[*bias][o] += acc;
                    }
                    for o in 0..out_c {
                        for y in 0..h {
                            for x in 0..wd {
                                let g = gout[(o * h + y) * wd + x];
                                if g == 0.0 {
                                    continue;
                                }
                                for i in 0..in_c {
                                    for ky in 0..3usize {
                                        let sy = y as isize + ky as isize - 1;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3usize {
                                            let sx = x as isize + kx as isize - 1;
                                            if sx < 0 || sx >= wd as isize {
                                                continue;
                                            }
                                            let wi = ((o * in_c + i) * 3 + ky) * 3 + kx;
                                            let ii =
                                                (i * h + sy as usize) * wd + sx as usize;
                                            gh[*weight][wi] += g * inp.data[ii];
                                            gh[*input][ii] += g * w.data[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu { input } => {
                    let inp = &self.values[*input];
                    for (i, g) in gout.iter().enumerate() {
                        if inp.data[i] > 0.0 {
                            gh[*input][i] += g;
                        }
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    for (o, g) in gout.iter().enumerate() {
                        gh[*input][argmax[o]] += g;
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let inp = &self.values[*input];
                    let w = &self.values[*weight];
                    let n_in = inp.len();
                    for (o, g) in gout.iter().enumerate() {
                        gh[*bias][o] += g;
                        if *g == 0.0 {
                            continue;
                        }
                        for i in 0..n_in {
                            gh[*weight][o * n_in + i] += g * inp.data[i];
                            gh[*input][i] += g * w.data[o * n_in + i];
                        }
                    }
                }
                Op::SoftTargetCe { logits, target } => {
                    let g = gout[0];
                    let p = softmax(&self.values[*logits].data);
                    let tsum: f64 = target.iter().sum();
                    for (i, pi) in p.iter().enumerate() {
                        gh[*logits][i] += g * (tsum * pi - target[i]);
                    }
                }
                Op::CfNll { logits, label } => {
                    let g = gout[0];
                    let p = softmax(&self.values[*logits].data);
                    let py = p[*label].min(CF_PROB_CLAMP);
                    // dL/dz_j = p_y (delta_jy - p_j) / (1 - p_y)
                    for (j, pj) in p.iter().enumerate() {
                        let delta = if j == *label { 1.0 } else { 0.0 };
                        gh[*logits][j] += g * py * (delta - pj) / (1.0 - py);
                    }
                }
                Op::SelectLogit { logits, class } => {
                    gh[*logits][*class] += gout[0];
                }
                Op::SumAll { input } => {
                    let g = gout[0];
                    for gi in gh[*input].iter_mut() {
                        *gi += g;
                    }
                }
                Op::WeightedSum { terms } => {
                    let g = gout[0];
                    for (t, w) in terms {
                        gh[*t][0] += g * w;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
