//! Compact encoder/decoder segmentation network.
//!
//! ```text
//! enc1  conv 1→8   3×3 s1  leaky   H×W      ─────────────┐ skip
//! enc2  conv 8→16  3×3 s2  leaky   H/2                    │
//! mid   conv 16→16 3×3 s2  leaky   H/4                    │
//!       upsample ×2                H/2                    │
//! dec   conv 16→8  3×3 s1  leaky   H/2                    │
//!       upsample ×2, concat ◄──────H×W ───────────────────┘
//! head  conv 16→M  3×3 s1          H×W   (logits)
//! ```
//!
//! Downsampling is done with stride-2 convolutions. Input height and width
//! must be multiples of 4.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::mask::LabelMask;
use crate::metrics;
use crate::rng::CounterRng;
use crate::tensor::{ops, ByteReader, Graph, NodeId, Tensor};

/// Magic prefix of a checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SEGN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const LEAKY_SLOPE: f32 = 0.1;
pub const MID_KERNEL: usize = 3;
const LOG_EPS: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub in_channels: usize,
    /// `None` means "number of classes".
    pub out_channels: Option<usize>,
    pub kernel: usize,
    pub stride: usize,
}

pub const LAYERS: [LayerSpec; 5] = [
    LayerSpec { name: "enc1", in_channels: 1, out_channels: Some(8), kernel: 3, stride: 1 },
    LayerSpec { name: "enc2", in_channels: 8, out_channels: Some(16), kernel: 3, stride: 2 },
    LayerSpec { name: "mid", in_channels: 16, out_channels: Some(16), kernel: MID_KERNEL, stride: 2 },
    LayerSpec { name: "dec", in_channels: 16, out_channels: Some(8), kernel: 3, stride: 1 },
    LayerSpec { name: "head", in_channels: 16, out_channels: None, kernel: 3, stride: 1 },
];

impl LayerSpec {
    fn out(&self, classes: usize) -> usize {
        self.out_channels.unwrap_or(classes)
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// One training example: a `1×H×W` grayscale image in `[0, 1]` and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub image: Tensor,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(id: u32, image: Tensor, mask: LabelMask) -> Result<Self> {
        let (c, h, w) = image.dims3("Sample::new")?;
        if c != 1 {
            return Err(Error::ShapeMismatch { op: "Sample::new", dim: "channels", expected: 1, found: c });
        }
        if (h, w) != mask.dims() {
            return Err(Error::ShapeMismatch { op: "Sample::new", dim: "mask size", expected: h * w, found: mask.len() });
        }
        if mask.foreground() == 0 {
            return Err(invalid(format!("sample {id}: mask has no foreground pixel")));
        }
        Ok(Self { id, image, mask })
    }
}

/// Learnable tensors, `[weight, bias]` per entry of [`LAYERS`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    classes: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform init in `[-s, s]` with `s = sqrt(1 / fan_in)`, for weights and
    /// biases alike.
    pub fn init(classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("segmentation network needs at least two classes"));
        }
        let mut rng = CounterRng::stream(seed, 0x5E6);
        let mut tensors = Vec::with_capacity(2 * LAYERS.len());
        for layer in &LAYERS {
            let s = libm::sqrt(1.0 / layer.fan_in() as f64);
            let out = layer.out(classes);
            let wshape = [out, layer.in_channels, layer.kernel, layer.kernel];
            let n: usize = wshape.iter().product();
            let w = (0..n).map(|_| rng.uniform(-s, s) as f32).collect();
            tensors.push(Tensor::new(&wshape, w)?);
            let b = (0..out).map(|_| rng.uniform(-s, s) as f32).collect();
            tensors.push(Tensor::new(&[out], b)?);
        }
        Ok(Self { classes, tensors })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names() -> impl Iterator<Item = String> {
        LAYERS
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `SEGN`, `u32` version, `u32` tensor count, then per tensor a `u32`
    /// name length, the UTF-8 name and the tensor encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in Self::names().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.encode_into(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "checkpoint magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        if count != 2 * LAYERS.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, network has {}",
                2 * LAYERS.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for expected_name in Self::names() {
            let len = r.u32("tensor name length")? as usize;
            let raw = r.take(len, "tensor name")?;
            let name = core::str::from_utf8(raw).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != expected_name {
                return Err(Error::LayerMismatch {
                    layer: expected_name,
                    reason: format!("found tensor named `{name}` in its place"),
                });
            }
            let (t, used) = Tensor::decode(r.rest())?;
            r.take(used, "tensor")?;
            tensors.push((expected_name, t));
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }

        let classes = tensors.last().map(|(_, t)| t.shape()[0]).unwrap_or(0);
        if classes < 2 {
            return Err(Error::LayerMismatch {
                layer: "head.bias".into(),
                reason: format!("{classes} output classes"),
            });
        }
        for (layer, pair) in LAYERS.iter().zip(tensors.chunks(2)) {
            let out = layer.out(classes);
            let expected_w = [out, layer.in_channels, layer.kernel, layer.kernel];
            for ((name, t), expected) in pair.iter().zip([&expected_w[..], &[out][..]]) {
                if t.shape() != expected {
                    return Err(Error::LayerMismatch {
                        layer: name.clone(),
                        reason: format!("shape {:?}, expected {:?}", t.shape(), expected),
                    });
                }
                if !t.is_finite() {
                    return Err(Error::LayerMismatch { layer: name.clone(), reason: "non-finite values".into() });
                }
            }
        }
        Ok(Self { classes, tensors: tensors.into_iter().map(|(_, t)| t).collect() })
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub scores: Tensor,
}

impl Prediction {
    pub fn labels(&self) -> LabelMask {
        discretize(&self.scores)
    }
}

/// Network with fixed parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    params: ModelParams,
}

impl SegNet {
    pub fn new(params: ModelParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn classes(&self) -> usize {
        self.params.classes
    }

    /// Records the forward pass on `graph` and returns the logits node plus
    /// the parameter nodes (leaves when `trainable`, constants otherwise).
    pub fn record(&self, graph: &mut Graph, input: NodeId, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let (c, h, w) = graph.value(input).dims3("segnet")?;
        if c != 1 {
            return Err(Error::ShapeMismatch { op: "segnet", dim: "channels", expected: 1, found: c });
        }
        if h % 4 != 0 {
            return Err(Error::ShapeMismatch { op: "segnet", dim: "height (must be a multiple of 4)", expected: h.next_multiple_of(4), found: h });
        }
        if w % 4 != 0 {
            return Err(Error::ShapeMismatch { op: "segnet", dim: "width (must be a multiple of 4)", expected: w.next_multiple_of(4), found: w });
        }
        let p: Vec<NodeId> = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { graph.leaf(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        let conv = |g: &mut Graph, x: NodeId, layer: usize| {
            let spec = &LAYERS[layer];
            g.conv2d(x, p[2 * layer], p[2 * layer + 1], spec.stride, spec.kernel / 2)
        };

        let e1 = conv(graph, input, 0)?;
        let e1 = graph.leaky_relu(e1, LEAKY_SLOPE)?;
        let e2 = conv(graph, e1, 1)?;
        let e2 = graph.leaky_relu(e2, LEAKY_SLOPE)?;
        let mid = conv(graph, e2, 2)?;
        let mid = graph.leaky_relu(mid, LEAKY_SLOPE)?;
        let up = graph.upsample_nearest2x(mid)?;
        let dec = conv(graph, up, 3)?;
        let dec = graph.leaky_relu(dec, LEAKY_SLOPE)?;
        let up = graph.upsample_nearest2x(dec)?;
        let cat = graph.concat_channels(&[up, e1])?;
        let logits = conv(graph, cat, 4)?;
        Ok((logits, p))
    }

    pub fn forward(&self, image: &Tensor) -> Result<Prediction> {
        let mut graph = Graph::new();
        let x = graph.constant(image.clone());
        let (logits, _) = self.record(&mut graph, x, false)?;
        let logits = graph.value(logits).clone();
        let scores = ops::channel_softmax(&logits)?;
        Ok(Prediction { logits, scores })
    }

    pub fn predict(&self, image: &Tensor) -> Result<LabelMask> {
        Ok(self.forward(image)?.labels())
    }
}

/// Per-pixel argmax over the channel axis; ties go to the lower class.
pub fn discretize(scores: &Tensor) -> LabelMask {
    let [m, h, w] = *scores.shape() else {
        panic!("discretize expects a C×H×W tensor, got {:?}", scores.shape());
    };
    let plane = h * w;
    let s = scores.as_slice();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..m {
                if s[c * plane + p] > s[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels).expect("plane size matches")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-pixel cross-entropy over the epoch's updates.
    pub loss: f64,
    /// Mean IoU of the predictions made during the epoch, before each update.
    pub iou: f64,
}

/// Mean per-pixel cross-entropy `-ln(p_target + 1e-7)` over softmax scores,
/// and its gradient with respect to the scores.
pub fn cross_entropy(scores: &Tensor, mask: &LabelMask) -> Result<(f64, Tensor)> {
    let (m, h, w) = scores.dims3("cross_entropy")?;
    if (h, w) != mask.dims() {
        return Err(Error::ShapeMismatch { op: "cross_entropy", dim: "mask size", expected: h * w, found: mask.len() });
    }
    let plane = h * w;
    let s = scores.as_slice();
    let mut grad = Tensor::zeros(scores.shape());
    let g = grad.data_mut();
    let inv = 1.0 / plane as f32;
    let mut loss = 0.0f64;
    for (p, &label) in mask.as_slice().iter().enumerate() {
        let c = label as usize;
        if c >= m {
            return Err(invalid(format!("mask label {c} out of range for {m} classes")));
        }
        let prob = s[c * plane + p] + LOG_EPS;
        loss -= libm::logf(prob) as f64;
        g[c * plane + p] = -inv / prob;
    }
    Ok((loss / plane as f64, grad))
}

/// Plain per-sample SGD over a seed-shuffled order each epoch.
pub fn train(params: &ModelParams, dataset: &[Sample], config: &TrainConfig) -> Result<(ModelParams, Vec<EpochLog>)> {
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(invalid("learning rate must be finite and non-negative"));
    }
    let mut net = SegNet::new(params.clone());
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        CounterRng::stream(config.seed, epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut iou_sum) = (0.0, 0.0);
        for &idx in &order {
            let sample = &dataset[idx];
            let (loss, iou, grads) = loss_and_gradients(&net, sample)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, sample: idx, loss: loss as f32 });
            }
            loss_sum += loss;
            iou_sum += iou;
            for (p, g) in net.params.tensors.iter_mut().zip(grads) {
                for (w, d) in p.data_mut().iter_mut().zip(g.as_slice()) {
                    *w -= config.lr * d;
                }
            }
            if !net.params.is_finite() {
                return Err(Error::Diverged { epoch, sample: idx, loss: f32::NAN });
            }
        }
        let n = dataset.len() as f64;
        log.push(EpochLog { epoch, loss: loss_sum / n, iou: iou_sum / n });
    }
    Ok((net.into_params(), log))
}

/// Returns `(loss, iou, parameter gradients)` for one sample.
fn loss_and_gradients(net: &SegNet, sample: &Sample) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let x = graph.constant(sample.image.clone());
    let (logits, params) = net.record(&mut graph, x, true)?;
    let scores = graph.channel_softmax(logits)?;
    let probs = graph.value(scores);
    let iou = metrics::iou(&discretize(probs), &sample.mask)?;
    let (loss, seed) = cross_entropy(probs, &sample.mask)?;
    let mut grads = graph.backward(scores, &seed)?;
    let grads = params
        .iter()
        .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(graph.value(id).shape())))
        .collect();
    Ok((loss, iou, grads))
}

/// Mean clean IoU of the network's predictions against the ground truth.
pub fn mean_iou(net: &SegNet, dataset: &[Sample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut total = 0.0;
    for s in dataset {
        total += metrics::iou(&net.predict(&s.image)?, &s.mask)?;
    }
    Ok(total / dataset.len() as f64)
}
