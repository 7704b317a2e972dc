use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

const LEAKY_SLOPE: f64 = 0.2;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named input values for one evaluation.
pub type Bindings = BTreeMap<String, Tensor>;

/// Gradients keyed by input name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Constant(Arc<Tensor>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Upsample2x(NodeId),
    LeakyRelu(NodeId),
    Sigmoid(NodeId),
    ChannelScale {
        input: NodeId,
        scale: NodeId,
    },
    MaskedMean {
        input: NodeId,
        mask: Arc<Vec<bool>>,
        count: usize,
    },
    ChannelMean(NodeId),
    ChannelMax(NodeId),
    Sum(NodeId),
    Affine {
        input: NodeId,
        scale: f64,
        shift: f64,
    },
    Reshape(NodeId),
    Step {
        input: NodeId,
        threshold: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample2x",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ChannelScale { .. } => "channel_scale",
            Op::MaskedMean { .. } => "masked_mean",
            Op::ChannelMean(_) => "channel_mean",
            Op::ChannelMax(_) => "channel_max",
            Op::Sum(_) => "sum",
            Op::Affine { .. } => "affine",
            Op::Reshape(_) => "reshape",
            Op::Step { .. } => "step",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Records operations with shape inference. Nodes are appended in
/// topological order, so the finished graph is acyclic by construction.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::Unknown(format!("node {}", id.0)))
    }

    /// Differentiable leaf bound by name at evaluation time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate input `{name}`")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.push((name.to_string(), id));
        Ok(id)
    }

    /// Non-differentiable leaf; shared, never copied.
    pub fn constant(&mut self, value: Arc<Tensor>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?);
        if sa != sb {
            return Err(mismatch("add", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?);
        if sa != sb {
            return Err(mismatch("multiply", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa))
    }

    /// `[m, k] x [k, n] -> [m, n]`, or `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?.to_vec());
        let out = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2]) if k == k2 => vec![*m],
            ([m, k], [k2, n]) if k == k2 => vec![*m, *n],
            _ => return Err(mismatch("matmul", format!("{sa:?} x {sb:?}"))),
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Stride-1 convolution with symmetric zero padding `kernel / 2`.
    /// Input `[ci, h, w]`, weight `[co, ci, kh, kw]` (odd kernel), bias `[co]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let si = self.shape(input)?.to_vec();
        let sw = self.shape(weight)?.to_vec();
        let (ci, h, w) = match si.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(mismatch("conv2d", format!("input must be [c, h, w], got {si:?}"))),
        };
        let co = match sw.as_slice() {
            [co, wi, kh, kw] if *wi == ci && kh % 2 == 1 && kw % 2 == 1 => *co,
            _ => {
                return Err(mismatch(
                    "conv2d",
                    format!("weight {sw:?} incompatible with input {si:?} (odd kernels only)"),
                ))
            }
        };
        if let Some(b) = bias {
            let sb = self.shape(b)?;
            if sb != [co] {
                return Err(mismatch("conv2d", format!("bias {sb:?}, expected [{co}]")));
            }
        }
        Ok(self.push(Op::Conv2d { input, weight, bias }, vec![co, h, w]))
    }

    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        match s.as_slice() {
            [c, h, w] => Ok(self.push(Op::Upsample2x(a), vec![*c, 2 * h, 2 * w])),
            _ => Err(mismatch("upsample2x", format!("expected [c, h, w], got {s:?}"))),
        }
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        Ok(self.push(Op::LeakyRelu(a), s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        Ok(self.push(Op::Sigmoid(a), s))
    }

    /// Multiplies feature channel `c` of a `[c, h, w]` map by `scale[c]`.
    pub fn channel_scale(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let si = self.shape(input)?.to_vec();
        let ss = self.shape(scale)?;
        match si.as_slice() {
            [c, _, _] if ss == [*c] => Ok(self.push(Op::ChannelScale { input, scale }, si)),
            _ => Err(mismatch("channel_scale", format!("{si:?} scaled by {ss:?}"))),
        }
    }

    /// Per-channel mean over the cells where `mask` is true: `[c, h, w] -> [c]`.
    pub fn masked_mean(&mut self, input: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        let si = self.shape(input)?.to_vec();
        let c = match si.as_slice() {
            [c, h, w] if mask.len() == h * w => *c,
            _ => {
                return Err(mismatch(
                    "masked_mean",
                    format!("mask of {} cells over {si:?}", mask.len()),
                ))
            }
        };
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyMask("masked_mean".into()));
        }
        Ok(self.push(Op::MaskedMean { input, mask, count }, vec![c]))
    }

    /// Mean over the leading (colour/feature) axis: `[c, h, w] -> [h, w]`.
    pub fn channel_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        match s.as_slice() {
            [_, h, w] => Ok(self.push(Op::ChannelMean(a), vec![*h, *w])),
            _ => Err(mismatch("channel_mean", format!("expected [c, h, w], got {s:?}"))),
        }
    }

    /// Max over the leading axis; the gradient goes to the first maximiser.
    pub fn channel_max(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        match s.as_slice() {
            [_, h, w] => Ok(self.push(Op::ChannelMax(a), vec![*h, *w])),
            _ => Err(mismatch("channel_max", format!("expected [c, h, w], got {s:?}"))),
        }
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.shape(a)?;
        Ok(self.push(Op::Sum(a), Vec::new()))
    }

    /// Element-wise `scale * x + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        Ok(self.push(Op::Affine { input: a, scale, shift }, s))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a)?;
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Heaviside step `x > threshold`. Not differentiable: backward passes
    /// zero. Present for negative tests of the gradient checker.
    pub fn step(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        Ok(self.push(Op::Step { input: a, threshold }, s))
    }

    pub fn output(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.shape(id)?;
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), id));
        Ok(())
    }

    pub fn node_shape(&self, id: NodeId) -> Result<Vec<usize>> {
        self.shape(id).map(|s| s.to_vec())
    }

    pub fn finish(self) -> Graph {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}

/// Immutable operation graph.
#[derive(Clone, Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|(n, _)| n.as_str())
    }

    pub fn input_id(&self, name: &str) -> Result<NodeId> {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Unknown(format!("input `{name}`")))
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Unknown(format!("output `{name}`")))
    }

    pub fn shape_of(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::Unknown(format!("node {}", id.0)))
    }
}

/// Cached node values from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    graph_id: u64,
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output<'a>(&'a self, graph: &Graph, name: &str) -> Result<&'a Tensor> {
        if graph.id != self.graph_id {
            return Err(Error::ForeignEvaluation);
        }
        Ok(&self.values[graph.output_id(name)?.0])
    }
}

fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let (c, h, w) = dims3(t.shape());
    let d = t.data();
    (0..h * w)
        .map(|p| {
            (1..c).fold(0, |best, k| if d[k * h * w + p] > d[best * h * w + p] { k } else { best })
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

/// Evaluates every node, checking each result for NaN/Inf.
pub fn forward_eval(graph: &Graph, bindings: &Bindings) -> Result<Evaluation> {
    evaluate(graph, bindings, None)
}

/// Like [`forward_eval`], but every piecewise op stays on the piece chosen in
/// `pattern`: leaky-ReLU slopes, step outputs and channel-max winners are
/// taken from that evaluation instead of the current inputs. Near `pattern`'s
/// bindings this is the smooth function whose derivative `backward` returns.
pub fn forward_eval_frozen(graph: &Graph, bindings: &Bindings, pattern: &Evaluation) -> Result<Evaluation> {
    if pattern.graph_id != graph.id {
        return Err(Error::InvalidArgument("pattern comes from another graph".into()));
    }
    evaluate(graph, bindings, Some(pattern))
}

fn evaluate(graph: &Graph, bindings: &Bindings, pattern: Option<&Evaluation>) -> Result<Evaluation> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (idx, node) in graph.nodes.iter().enumerate() {
        let v = |id: NodeId| -> &Tensor { &values[id.0] };
        let data: Vec<f64> = match &node.op {
            Op::Input(name) => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(mismatch(
                        "input",
                        format!("`{name}` bound with {:?}, declared {:?}", t.shape(), node.shape),
                    ));
                }
                t.data().to_vec()
            }
            Op::Constant(t) => t.data().to_vec(),
            Op::Add(a, b) => v(*a).data().iter().zip(v(*b).data()).map(|(x, y)| x + y).collect(),
            Op::Mul(a, b) => v(*a).data().iter().zip(v(*b).data()).map(|(x, y)| x * y).collect(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if tb.shape().len() == 2 { tb.shape()[1] } else { 1 };
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let row = &ta.data()[i * k..(i + 1) * k];
                    for (kk, aik) in row.iter().enumerate() {
                        let brow = &tb.data()[kk * n..(kk + 1) * n];
                        for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                            *o += aik * b;
                        }
                    }
                }
                out
            }
            Op::Conv2d { input, weight, bias } => conv2d_forward(v(*input), v(*weight), bias.map(&v)),
            Op::Upsample2x(a) => {
                let t = v(*a);
                let (c, h, w) = dims3(t.shape());
                let mut out = vec![0.0; c * 4 * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            out[(ch * 2 * h + y) * 2 * w + x] = t.data()[(ch * h + y / 2) * w + x / 2];
                        }
                    }
                }
                out
            }
            Op::LeakyRelu(a) => match pattern {
                None => v(*a)
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 { x } else { LEAKY_SLOPE * x })
                    .collect(),
                Some(p) => v(*a)
                    .data()
                    .iter()
                    .zip(p.value(*a).data())
                    .map(|(&x, &at)| if at > 0.0 { x } else { LEAKY_SLOPE * x })
                    .collect(),
            },
            Op::Sigmoid(a) => v(*a).data().iter().map(|&x| sigmoid(x)).collect(),
            Op::ChannelScale { input, scale } => {
                let (t, s) = (v(*input), v(*scale));
                let plane = t.shape()[1] * t.shape()[2];
                t.data()
                    .chunks(plane)
                    .zip(s.data())
                    .flat_map(|(chunk, sc)| chunk.iter().map(move |x| x * sc))
                    .collect()
            }
            Op::MaskedMean { input, mask, count } => {
                let t = v(*input);
                let plane = mask.len();
                t.data()
                    .chunks(plane)
                    .map(|chunk| {
                        chunk
                            .iter()
                            .zip(mask.iter())
                            .filter(|(_, m)| **m)
                            .map(|(x, _)| x)
                            .sum::<f64>()
                            / *count as f64
                    })
                    .collect()
            }
            Op::ChannelMean(a) => {
                let t = v(*a);
                let (c, h, w) = dims3(t.shape());
                let mut out = vec![0.0; h * w];
                for chunk in t.data().chunks(h * w) {
                    for (o, x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= c as f64);
                out
            }
            Op::ChannelMax(a) if pattern.is_some() => {
                let t = v(*a);
                let (_, h, w) = dims3(t.shape());
                let winners = argmax_channels(pattern.map(|p| p.value(*a)).unwrap_or(t));
                winners
                    .iter()
                    .enumerate()
                    .map(|(p, &k)| t.data()[k * h * w + p])
                    .collect()
            }
            Op::ChannelMax(a) => {
                let t = v(*a);
                let (_, h, w) = dims3(t.shape());
                let mut out = vec![f64::NEG_INFINITY; h * w];
                for chunk in t.data().chunks(h * w) {
                    for (o, x) in out.iter_mut().zip(chunk) {
                        if *x > *o {
                            *o = *x;
                        }
                    }
                }
                out
            }
            Op::Sum(a) => vec![v(*a).data().iter().sum()],
            Op::Affine { input, scale, shift } => {
                v(*input).data().iter().map(|x| scale * x + shift).collect()
            }
            Op::Reshape(a) => v(*a).data().to_vec(),
            Op::Step { input, threshold } => pattern
                .map(|p| p.value(*input))
                .unwrap_or(v(*input))
                .data()
                .iter()
                .map(|&x| if x > *threshold { 1.0 } else { 0.0 })
                .collect(),
        };
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{} (node {idx})", node.op.name())));
        }
        values.push(Tensor::from_parts_unchecked(node.shape.clone(), data));
    }
    Ok(Evaluation {
        graph_id: graph.id,
        values,
    })
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (ci, h, w) = dims3(input.shape());
    let (co, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (py, px) = (kh / 2, kw / 2);
    let mut out = vec![0.0; co * h * w];
    let x = input.data();
    let wt = weight.data();
    for o in 0..co {
        let oplane = &mut out[o * h * w..(o + 1) * h * w];
        if let Some(b) = bias {
            oplane.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        for i in 0..ci {
            let iplane = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((o * ci + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // output (y, x) reads input (y + ky - py, x + kx - px)
                    let y0 = py.saturating_sub(ky);
                    let y1 = (h + py).saturating_sub(ky).min(h);
                    let x0 = px.saturating_sub(kx);
                    let x1 = (w + px).saturating_sub(kx).min(w);
                    for y in y0..y1 {
                        let iy = y + ky - py;
                        let orow = &mut oplane[y * w + x0..y * w + x1];
                        let irow = &iplane[iy * w + x0 + kx - px..iy * w + x1 + kx - px];
                        for (o_, i_) in orow.iter_mut().zip(irow) {
                            *o_ += wv * i_;
                        }
                    }
                }
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
}

/// Reverse-mode gradients of a scalar node with respect to every input.
/// Inputs the output does not depend on receive zeros.
pub fn backward(graph: &Graph, eval: &Evaluation, output: NodeId) -> Result<Gradients> {
    if eval.graph_id != graph.id {
        return Err(Error::ForeignEvaluation);
    }
    let out_shape = graph.shape_of(output)?;
    if !out_shape.is_empty() {
        return Err(Error::NotScalar(out_shape.to_vec()));
    }
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; graph.nodes.len()];
    grads[output.0] = Some(vec![1.0]);

    for idx in (0..=output.0).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &graph.nodes[idx];
        let val = |id: NodeId| eval.value(id);
        match &node.op {
            Op::Input(_) | Op::Constant(_) => {
                grads[idx] = Some(g);
                continue;
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g);
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if tb.shape().len() == 2 { tb.shape()[1] } else { 1 };
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * tb.data()[kk * n + j];
                            gb[kk * n + j] += ta.data()[i * k + kk] * g[i * n + j];
                        }
                        ga[i * k + kk] = acc;
                    }
                }
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Conv2d { input, weight, bias } => {
                let (gi, gw, gb) = conv2d_backward(val(*input), val(*weight), &g);
                accumulate(&mut grads[input.0], gi);
                accumulate(&mut grads[weight.0], gw);
                if let Some(b) = bias {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Upsample2x(a) => {
                let (c, h, w) = dims3(val(*a).shape());
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[(ch * h + y / 2) * w + x / 2] += g[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LeakyRelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { LEAKY_SLOPE * g })
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .iter()
                    .zip(eval.values[idx].data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::ChannelScale { input, scale } => {
                let (t, s) = (val(*input), val(*scale));
                let plane = t.shape()[1] * t.shape()[2];
                let mut gi = vec![0.0; t.len()];
                let mut gs = vec![0.0; s.len()];
                for (c, sc) in s.data().iter().enumerate() {
                    let range = c * plane..(c + 1) * plane;
                    let mut acc = 0.0;
                    for ((gi_, g_), x) in gi[range.clone()].iter_mut().zip(&g[range.clone()]).zip(&t.data()[range]) {
                        *gi_ = g_ * sc;
                        acc += g_ * x;
                    }
                    gs[c] = acc;
                }
                accumulate(&mut grads[input.0], gi);
                accumulate(&mut grads[scale.0], gs);
            }
            Op::MaskedMean { input, mask, count } => {
                let t = val(*input);
                let plane = mask.len();
                let mut gi = vec![0.0; t.len()];
                for (c, gc) in g.iter().enumerate() {
                    let share = gc / *count as f64;
                    for (p, m) in mask.iter().enumerate() {
                        if *m {
                            gi[c * plane + p] = share;
                        }
                    }
                }
                accumulate(&mut grads[input.0], gi);
            }
            Op::ChannelMean(a) => {
                let (c, h, w) = dims3(val(*a).shape());
                let ga = (0..c)
                    .flat_map(|_| g.iter().map(|x| x / c as f64))
                    .collect::<Vec<_>>();
                debug_assert_eq!(ga.len(), c * h * w);
                accumulate(&mut grads[a.0], ga);
            }
            Op::ChannelMax(a) => {
                let t = val(*a);
                let (c, h, w) = dims3(t.shape());
                let plane = h * w;
                let mut ga = vec![0.0; c * plane];
                for p in 0..plane {
                    let mut best = 0;
                    for ch in 1..c {
                        if t.data()[ch * plane + p] > t.data()[best * plane + p] {
                            best = ch;
                        }
                    }
                    ga[best * plane + p] = g[p];
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Affine { input, scale, .. } => {
                accumulate(&mut grads[input.0], g.iter().map(|x| x * scale).collect());
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::Step { input, .. } => {
                let n = val(*input).len();
                accumulate(&mut grads[input.0], vec![0.0; n]);
            }
        }
    }

    let mut out = Gradients::new();
    for (name, id) in &graph.inputs {
        let shape = graph.nodes[id.0].shape.clone();
        let data = grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        out.insert(name.clone(), Tensor::from_parts_unchecked(shape, data));
    }
    Ok(out)
}

fn conv2d_backward(input: &Tensor, weight: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ci, h, w) = dims3(input.shape());
    let (co, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (py, px) = (kh / 2, kw / 2);
    let x = input.data();
    let wt = weight.data();
    let mut gi = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        gb[o] = gplane.iter().sum();
        for i in 0..ci {
            let iplane = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * ci + i) * kh + ky) * kw + kx;
                    let wv = wt[widx];
                    let y0 = py.saturating_sub(ky);
                    let y1 = (h + py).saturating_sub(ky).min(h);
                    let x0 = px.saturating_sub(kx);
                    let x1 = (w + px).saturating_sub(kx).min(w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - py;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let ioff = iy * w + x0 + kx - px;
                        let irow = &iplane[ioff..ioff + (x1 - x0)];
                        for (g_, i_) in grow.iter().zip(irow) {
                            acc += g_ * i_;
                        }
                        let girow = &mut gi[i * h * w + ioff..i * h * w + ioff + (x1 - x0)];
                        for (gi_, g_) in girow.iter_mut().zip(grow) {
                            *gi_ += wv * g_;
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (gi, gw, gb)
}
