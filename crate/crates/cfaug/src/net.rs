//! The small convolutional classifier: two conv/relu/pool blocks and a
//! dense head, with parameter and input gradients via the tape in
//! [`crate::autodiff`], momentum SGD, and checkpoint I/O.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{CfaugError, Result};

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;

/// Per-pixel channel-norm saliency scores, spatial shape of the input.
#[derive(Debug, Clone)]
pub struct Saliency {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b
    pub params: Vec<Tensor>,
}

pub const PARAM_NAMES: [&str; 6] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b"];

impl Network {
    pub fn new(height: usize, width: usize, channels: usize, classes: usize, seed: u64) -> Self {
        assert!(height % 4 == 0 && width % 4 == 0, "two 2x2 pools need /4 dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        let flat = (height / 4) * (width / 4) * CONV2_CHANNELS;
        let params = vec![
            Tensor::new(
                vec![CONV1_CHANNELS, channels, 3, 3],
                he(channels * 9, CONV1_CHANNELS * channels * 9, &mut rng),
            ),
            Tensor::zeros(vec![CONV1_CHANNELS]),
            Tensor::new(
                vec![CONV2_CHANNELS, CONV1_CHANNELS, 3, 3],
                he(CONV1_CHANNELS * 9, CONV2_CHANNELS * CONV1_CHANNELS * 9, &mut rng),
            ),
            Tensor::zeros(vec![CONV2_CHANNELS]),
            Tensor::new(vec![classes, flat], he(flat, classes * flat, &mut rng)),
            Tensor::zeros(vec![classes]),
        ];
        Self {
            height,
            width,
            channels,
            classes,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }
}

/// One forward/backward session: a tape with the network parameters as
/// leaves, shared across every image forwarded through it.
pub struct Session {
    pub graph: Graph,
    pub param_ids: Vec<NodeId>,
    height: usize,
    width: usize,
    channels: usize,
}

impl Session {
    pub fn new(net: &Network) -> Self {
        let mut graph = Graph::new();
        let param_ids = net.params.iter().map(|p| graph.leaf(p.clone())).collect();
        Self {
            graph,
            param_ids,
            height: net.height,
            width: net.width,
            channels: net.channels,
        }
    }

    /// Forward one normalized image (HWC interleaved, values in [-1,1]).
    /// Returns (input leaf id, logits id).
    pub fn forward(&mut self, normed: &[f64]) -> Result<(NodeId, NodeId)> {
        let (h, w, c) = (self.height, self.width, self.channels);
        if normed.len() != h * w * c {
            return Err(CfaugError::ShapeMismatch(format!(
                "input length {} != {h}x{w}x{c}",
                normed.len()
            )));
        }
        if normed.iter().any(|v| !v.is_finite()) {
            return Err(CfaugError::NonFinite("network input".into()));
        }
        if normed.iter().any(|v| *v < -1.0 - 1e-9 || *v > 1.0 + 1e-9) {
            return Err(CfaugError::InvalidArgument(
                "network input must be normalized to [-1,1]".into(),
            ));
        }
        // HWC -> CHW
        let mut chw = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    chw[(ch * h + y) * w + x] = normed[(y * w + x) * c + ch];
                }
            }
        }
        let g = &mut self.graph;
        let input = g.leaf(Tensor::new(vec![c, h, w], chw));
        let c1 = g.conv3x3(input, self.param_ids[0], self.param_ids[1]);
        let r1 = g.relu(c1);
        let p1 = g.max_pool2(r1);
        let c2 = g.conv3x3(p1, self.param_ids[2], self.param_ids[3]);
        let r2 = g.relu(c2);
        let p2 = g.max_pool2(r2);
        let logits = g.linear(p2, self.param_ids[4], self.param_ids[5]);
        Ok((input, logits))
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Parameter gradients in network parameter order.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.param_ids
            .iter()
            .map(|id| self.graph.grad(*id).to_vec())
            .collect()
    }

    /// Input gradient in HWC interleaved layout.
    pub fn input_grad_hwc(&self, input: NodeId) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let chw = self.graph.grad(input);
        let mut hwc = vec![0.0; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    hwc[(y * w + x) * c + ch] = chw[(ch * h + y) * w + x];
                }
            }
        }
        hwc
    }
}

/// Run a frozen network on one normalized image, returning logits only.
pub fn forward_logits(net: &Network, normed: &[f64]) -> Result<Vec<f64>> {
    let mut s = Session::new(net);
    let (_, logits) = s.forward(normed)?;
    Ok(s.graph.value(logits).data.clone())
}

/// Raw gradient of logit `class` w.r.t. the input (HWC layout) plus the
/// per-pixel channel l2 norm used as the saliency score.
pub fn input_gradient(net: &Network, normed: &[f64], class: usize) -> Result<(Vec<f64>, Saliency)> {
    if class >= net.classes {
        return Err(CfaugError::InvalidArgument(format!(
            "class {class} out of range (K={})",
            net.classes
        )));
    }
    let mut s = Session::new(net);
    let (input, logits) = s.forward(normed)?;
    let sel = s.graph.select_logit(logits, class);
    s.backward(sel)?;
    let raw = s.input_grad_hwc(input);
    let (h, w, c) = (net.height, net.width, net.channels);
    let mut scores = vec![0.0; h * w];
    for p in 0..h * w {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += raw[p * c + ch] * raw[p * c + ch];
        }
        scores[p] = acc.sqrt();
    }
    Ok((
        raw,
        Saliency {
            height: h,
            width: w,
            scores,
        },
    ))
}

/// Momentum SGD with L2 weight decay folded into the gradient.
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(net: &Network, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: net.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update. Rejects non-finite gradients without touching
    /// parameters.
    pub fn step(&mut self, net: &mut Network, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != net.params.len()
            || grads
                .iter()
                .zip(net.params.iter())
                .any(|(g, p)| g.len() != p.len())
        {
            return Err(CfaugError::ShapeMismatch(
                "gradient/parameter shape mismatch".into(),
            ));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(CfaugError::NonFinite("gradient in sgd step".into()));
        }
        for (pi, (param, grad)) in net.params.iter_mut().zip(grads.iter()).enumerate() {
            let vel = &mut self.velocity[pi];
            for i in 0..param.len() {
                let g = grad[i] + self.weight_decay * param.data[i];
                vel[i] = self.momentum * vel[i] - self.lr * g;
                param.data[i] += vel[i];
            }
        }
        Ok(())
    }
}

/// Checkpoint layout: a plain-text manifest (magic line, then one
/// `name dims...` line per tensor, then `data`) followed by the tensors'
/// values as little-endian f32 in manifest order.
pub const CHECKPOINT_MAGIC: &str = "cfaug-checkpoint-v1";

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(
        out,
        "meta {} {} {} {}",
        net.height, net.width, net.channels, net.classes
    )
    .unwrap();
    for (name, t) in PARAM_NAMES.iter().zip(net.params.iter()) {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "{name} {}", dims.join(" ")).unwrap();
    }
    writeln!(out, "data").unwrap();
    for t in &net.params {
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Network> {
    // manifest ends at the line "data"
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| CfaugError::Format("checkpoint: unterminated manifest".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| CfaugError::Format("checkpoint: manifest not utf-8".into()))?;
        pos += nl + 1;
        if line == "data" {
            break;
        }
        lines.push(line.to_string());
        if lines.len() > 64 {
            return Err(CfaugError::Format("checkpoint: manifest too long".into()));
        }
    }
    if lines.first().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
        return Err(CfaugError::Format("checkpoint: bad magic".into()));
    }
    let meta: Vec<usize> = lines
        .get(1)
        .and_then(|l| l.strip_prefix("meta "))
        .ok_or_else(|| CfaugError::Format("checkpoint: missing meta line".into()))?
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CfaugError::Format("checkpoint: bad meta".into()))?;
    if meta.len() != 4 {
        return Err(CfaugError::Format("checkpoint: bad meta arity".into()));
    }
    let (height, width, channels, classes) = (meta[0], meta[1], meta[2], meta[3]);
    const DIM_CAP: usize = 1 << 16;
    if height == 0 || width == 0 || classes == 0 || !(channels == 1 || channels == 3) {
        return Err(CfaugError::Format("checkpoint: bad meta values".into()));
    }
    if height > DIM_CAP || width > DIM_CAP || classes > DIM_CAP || height % 4 != 0 || width % 4 != 0
    {
        return Err(CfaugError::Format("checkpoint: unsupported shape".into()));
    }

    let mut shapes = Vec::new();
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        let line = lines
            .get(2 + i)
            .ok_or_else(|| CfaugError::Format("checkpoint: missing tensor line".into()))?;
        let rest = line
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| CfaugError::Format(format!("checkpoint: expected tensor {name}")))?;
        let dims: Vec<usize> = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CfaugError::Format("checkpoint: bad dims".into()))?;
        if dims.is_empty() || dims.iter().any(|d| *d == 0 || *d > DIM_CAP) {
            return Err(CfaugError::Format("checkpoint: bad dims".into()));
        }
        if dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).is_none() {
            return Err(CfaugError::Format("checkpoint: dims overflow".into()));
        }
        shapes.push(dims);
    }
    // expected shapes for this architecture
    let flat = (height / 4) * (width / 4) * CONV2_CHANNELS;
    let expect = [
        vec![CONV1_CHANNELS, channels, 3, 3],
        vec![CONV1_CHANNELS],
        vec![CONV2_CHANNELS, CONV1_CHANNELS, 3, 3],
        vec![CONV2_CHANNELS],
        vec![classes, flat],
        vec![classes],
    ];
    if shapes != expect {
        return Err(CfaugError::Format(
            "checkpoint: tensor shapes do not match architecture".into(),
        ));
    }
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() - pos != total * 4 {
        return Err(CfaugError::Format(format!(
            "checkpoint: payload {} bytes, expected {}",
            bytes.len() - pos,
            total * 4
        )));
    }
    let mut reader = &bytes[pos..];
    let mut params = Vec::new();
    for shape in expect {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 4];
            reader.read_exact(&mut buf).expect("length checked");
            let v = f32::from_le_bytes(buf) as f64;
            if !v.is_finite() {
                return Err(CfaugError::Format("checkpoint: non-finite value".into()));
            }
            data.push(v);
        }
        params.push(Tensor::new(shape, data));
    }
    Ok(Network {
        height,
        width,
        channels,
        classes,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax;

    #[test]
    fn zero_dense_head_gives_uniform_softmax() {
        let mut net = Network::new(8, 8, 1, 4, 0);
        net.params[4] = Tensor::zeros(net.params[4].shape.clone());
        net.params[5] = Tensor::zeros(net.params[5].shape.clone());
        let logits = forward_logits(&net, &vec![0.3; 64]).unwrap();
        assert!(logits.iter().all(|l| *l == 0.0));
        let p = softmax(&logits);
        assert!(p.iter().all(|q| (q - 0.25).abs() < 1e-12));
    }

    #[test]
    fn logits_finite_after_seeded_init() {
        let net = Network::new(8, 8, 3, 5, 42);
        let input: Vec<f64> = (0..8 * 8 * 3).map(|i| ((i % 17) as f64 / 8.5) - 1.0).collect();
        let logits = forward_logits(&net, &input).unwrap();
        assert!(logits.iter().all(|l| l.is_finite()));
        assert_eq!(logits.len(), 5);
    }

    #[test]
    fn forward_rejects_nan_and_out_of_range() {
        let net = Network::new(8, 8, 1, 2, 0);
        let mut bad = vec![0.0; 64];
        bad[3] = f64::NAN;
        assert!(forward_logits(&net, &bad).is_err());
        bad[3] = 2.0;
        assert!(forward_logits(&net, &bad).is_err());
    }

    #[test]
    fn zero_conv_network_has_zero_input_gradient() {
        let mut net = Network::new(8, 8, 1, 3, 0);
        net.params[0] = Tensor::zeros(net.params[0].shape.clone());
        net.params[1] = Tensor::zeros(net.params[1].shape.clone());
        let (raw, sal) = input_gradient(&net, &vec![0.5; 64], 1).unwrap();
        assert!(raw.iter().all(|g| *g == 0.0));
        assert!(sal.scores.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn saliency_is_channel_l2_norm() {
        let net = Network::new(8, 8, 3, 4, 9);
        let input: Vec<f64> = (0..8 * 8 * 3).map(|i| ((i * 31 % 97) as f64 / 48.5) - 1.0).collect();
        let (raw, sal) = input_gradient(&net, &input, 2).unwrap();
        for p in 0..64 {
            let expect =
                (raw[p * 3] * raw[p * 3] + raw[p * 3 + 1] * raw[p * 3 + 1] + raw[p * 3 + 2] * raw[p * 3 + 2])
                    .sqrt();
            assert!((sal.scores[p] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut net = Network::new(8, 8, 1, 2, 1);
        let before = net.params.clone();
        let grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![1.0; p.len()]).collect();
        let mut opt = SgdOptimizer::new(&net, 0.0, 0.9, 0.0);
        opt.step(&mut net, &grads).unwrap();
        assert_eq!(net.params, before);
    }

    #[test]
    fn sgd_plain_step() {
        let mut net = Network::new(8, 8, 1, 2, 1);
        let before = net.params[5].data.clone();
        let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
        grads[5] = vec![2.0, -1.0];
        let mut opt = SgdOptimizer::new(&net, 0.1, 0.0, 0.0);
        opt.step(&mut net, &grads).unwrap();
        assert!((net.params[5].data[0] - (before[0] - 0.2)).abs() < 1e-15);
        assert!((net.params[5].data[1] - (before[1] + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_matches_hand_recursion() {
        // scalar parameter, constant gradient g: v1 = -lr g, v2 = mu v1 - lr g
        let mut net = Network::new(8, 8, 1, 2, 1);
        net.params[5].data[0] = 0.0;
        let p0 = 0.0;
        let g = 0.5;
        let (lr, mu) = (0.1, 0.9);
        let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
        grads[5][0] = g;
        let mut opt = SgdOptimizer::new(&net, lr, mu, 0.0);
        opt.step(&mut net, &grads).unwrap();
        opt.step(&mut net, &grads).unwrap();
        let v1 = -lr * g;
        let v2 = mu * v1 - lr * g;
        assert!((net.params[5].data[0] - (p0 + v1 + v2)).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut net = Network::new(8, 8, 1, 2, 1);
        let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
        grads[0][0] = f64::INFINITY;
        let mut opt = SgdOptimizer::new(&net, 0.1, 0.0, 0.0);
        assert!(opt.step(&mut net, &grads).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::new(8, 8, 3, 5, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.classes, 5);
        // values survive up to f32 rounding
        for (a, b) in net.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(parse_checkpoint(b"not a checkpoint\ndata\n").is_err());
        assert!(parse_checkpoint(b"").is_err());
        let net = Network::new(8, 8, 1, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(parse_checkpoint(&bytes).is_err());
    }
}
