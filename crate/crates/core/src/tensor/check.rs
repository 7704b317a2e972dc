use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::graph::{backward, forward_eval, forward_eval_frozen, Bindings, Graph, GraphBuilder, NodeId};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::stream;

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")))
    }
}

fn leaf_tensor<'a>(bindings: &'a Bindings, leaf: &str) -> Result<&'a Tensor> {
    bindings.get(leaf).ok_or_else(|| Error::UnboundInput(leaf.to_string()))
}

/// `bindings` with component `i` of `leaf` shifted by `delta`.
fn shifted_bindings(bindings: &Bindings, leaf: &str, i: usize, delta: f64) -> Result<Bindings> {
    let base = leaf_tensor(bindings, leaf)?;
    let mut b = bindings.clone();
    let mut data = base.data().to_vec();
    data[i] += delta;
    b.insert(leaf.to_string(), Tensor::new(base.shape().to_vec(), data)?);
    Ok(b)
}

/// Central finite-difference gradient of a scalar node with respect to one
/// input, one component at a time (components evaluated in parallel).
pub fn numerical_gradient(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    leaf: &str,
    step: f64,
) -> Result<Tensor> {
    check_step(step)?;
    let base = leaf_tensor(bindings, leaf)?;
    let values = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let up = forward_eval(graph, &shifted_bindings(bindings, leaf, i, step)?)?.value(output).item();
            let down = forward_eval(graph, &shifted_bindings(bindings, leaf, i, -step)?)?.value(output).item();
            Ok((up - down) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(base.shape().to_vec(), values)
}

/// Central differences of the smooth piece the graph is on at `bindings`.
///
/// Perturbed passes keep the centre's activation pattern (see
/// [`forward_eval_frozen`]), so a step that would cross a leaky-ReLU kink or
/// flip a channel-max winner still differentiates the same linear piece that
/// `backward` does. Away from kinks this equals [`numerical_gradient`].
pub fn numerical_gradient_piecewise(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    leaf: &str,
    step: f64,
) -> Result<Tensor> {
    check_step(step)?;
    let base = leaf_tensor(bindings, leaf)?;
    let centre = forward_eval(graph, bindings)?;
    let values = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let at = |delta: f64| -> Result<f64> {
                let b = shifted_bindings(bindings, leaf, i, delta)?;
                Ok(forward_eval_frozen(graph, &b, &centre)?.value(output).item())
            };
            Ok((at(step)? - at(-step)?) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(base.shape().to_vec(), values)
}

fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn analytic_gradient(graph: &Graph, bindings: &Bindings, output: NodeId, leaf: &str) -> Result<Tensor> {
    let eval = forward_eval(graph, bindings)?;
    let mut grads = backward(graph, &eval, output)?;
    grads
        .remove(leaf)
        .ok_or_else(|| Error::Unknown(format!("input `{leaf}`")))
}

/// Maximum over the leaf's components of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`.
pub fn grad_check(graph: &Graph, bindings: &Bindings, output: NodeId, leaf: &str, step: f64) -> Result<f64> {
    let analytic = analytic_gradient(graph, bindings, output, leaf)?;
    let numeric = numerical_gradient(graph, bindings, output, leaf, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// [`grad_check`] against [`numerical_gradient_piecewise`].
pub fn grad_check_piecewise(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    leaf: &str,
    step: f64,
) -> Result<f64> {
    let analytic = analytic_gradient(graph, bindings, output, leaf)?;
    let numeric = numerical_gradient_piecewise(graph, bindings, output, leaf, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// One op wired into `sum(op(inputs) * w)` with random inputs and a fixed
/// random weighting `w`, so every output cell carries a distinct weight.
pub struct OpCase {
    pub op: &'static str,
    pub graph: Graph,
    pub output: NodeId,
    pub bindings: Bindings,
}

impl OpCase {
    /// Worst [`grad_check_piecewise`] error over every input of the case.
    pub fn check(&self, step: f64) -> Result<f64> {
        self.bindings.keys().try_fold(0.0f64, |worst, leaf| {
            Ok(worst.max(grad_check_piecewise(&self.graph, &self.bindings, self.output, leaf, step)?))
        })
    }
}

struct CaseBuilder {
    b: GraphBuilder,
    bindings: Bindings,
    rng: ChaCha8Rng,
}

impl CaseBuilder {
    fn new(seed: u64, index: u64) -> Self {
        CaseBuilder {
            b: GraphBuilder::new(),
            bindings: Bindings::new(),
            rng: stream(seed, index),
        }
    }

    fn random(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.random_range(-1.5..1.5)).collect())
    }

    fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        let t = self.random(shape)?;
        self.bindings.insert(name.to_string(), t);
        self.b.input(name, shape)
    }

    fn finish(mut self, op: &'static str, node: NodeId) -> Result<OpCase> {
        let w = self.random(&self.b.node_shape(node)?)?;
        let w = self.b.constant(Arc::new(w));
        let weighted = self.b.mul(node, w)?;
        let output = self.b.sum(weighted)?;
        Ok(OpCase {
            op,
            graph: self.b.finish(),
            output,
            bindings: self.bindings,
        })
    }
}

/// A case for every graph op, inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Result<Vec<OpCase>> {
    type Build = fn(&mut CaseBuilder) -> Result<NodeId>;
    let table: [(&'static str, Build); 16] = [
        ("add", |c| {
            let (x, y) = (c.leaf("x", &[2, 3])?, c.leaf("y", &[2, 3])?);
            c.b.add(x, y)
        }),
        ("mul", |c| {
            let (x, y) = (c.leaf("x", &[2, 3])?, c.leaf("y", &[2, 3])?);
            c.b.mul(x, y)
        }),
        ("matmul", |c| {
            let (a, m) = (c.leaf("a", &[3, 4])?, c.leaf("m", &[4, 2])?);
            c.b.matmul(a, m)
        }),
        ("matvec", |c| {
            let (a, v) = (c.leaf("a", &[3, 4])?, c.leaf("v", &[4])?);
            c.b.matmul(a, v)
        }),
        ("conv2d", |c| {
            let x = c.leaf("x", &[2, 5, 5])?;
            let w = c.leaf("w", &[3, 2, 3, 3])?;
            let bias = c.leaf("bias", &[3])?;
            c.b.conv2d(x, w, Some(bias))
        }),
        ("upsample2x", |c| {
            let x = c.leaf("x", &[2, 3, 3])?;
            c.b.upsample2x(x)
        }),
        ("leaky_relu", |c| {
            let x = c.leaf("x", &[12])?;
            c.b.leaky_relu(x)
        }),
        ("sigmoid", |c| {
            let x = c.leaf("x", &[12])?;
            c.b.sigmoid(x)
        }),
        ("channel_scale", |c| {
            let (x, s) = (c.leaf("x", &[3, 4, 4])?, c.leaf("s", &[3])?);
            c.b.channel_scale(x, s)
        }),
        ("masked_mean", |c| {
            let x = c.leaf("x", &[3, 4, 4])?;
            let mut mask: Vec<bool> = (0..16).map(|_| c.rng.random_bool(0.4)).collect();
            mask[5] = true;
            c.b.masked_mean(x, Arc::new(mask))
        }),
        ("channel_mean", |c| {
            let x = c.leaf("x", &[3, 4, 4])?;
            c.b.channel_mean(x)
        }),
        ("channel_max", |c| {
            let x = c.leaf("x", &[3, 4, 4])?;
            c.b.channel_max(x)
        }),
        ("sum", |c| {
            let x = c.leaf("x", &[5])?;
            c.b.sum(x)
        }),
        ("affine", |c| {
            let x = c.leaf("x", &[6])?;
            c.b.affine(x, 1.7, -0.3)
        }),
        ("reshape", |c| {
            let x = c.leaf("x", &[2, 6])?;
            c.b.reshape(x, &[3, 4])
        }),
        ("step", |c| {
            let x = c.leaf("x", &[8])?;
            c.b.step(x, 0.1)
        }),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, (op, build))| {
            let mut c = CaseBuilder::new(seed, i as u64);
            let node = build(&mut c)?;
            c.finish(op, node)
        })
        .collect()
}
