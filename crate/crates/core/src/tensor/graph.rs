use alloc::vec;
use alloc::vec::Vec;

use super::{ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    LeakyRelu { input: NodeId, slope: f32 },
    Upsample2x { input: NodeId },
    ChannelSoftmax { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f32 },
    Concat { inputs: Vec<NodeId> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of operations, rebuilt for every forward pass.
///
/// Node inputs always point at earlier nodes, so reverse insertion order is
/// a valid topological order for the backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not require a gradient or does not
    /// influence the seeded output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn last(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    /// Every recorded node, in recording order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Differentiable leaf (an input or a parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let value = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            value,
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f32) -> Result<NodeId> {
        let value = ops::leaky_relu(self.value(input), slope)?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::LeakyRelu { input, slope }, value, rg))
    }

    pub fn upsample_nearest2x(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::upsample_nearest2x(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::Upsample2x { input }, value, rg))
    }

    pub fn channel_softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::channel_softmax(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::ChannelSoftmax { input }, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let value = self.value(input).scale(factor);
        let rg = self.needs(&[input]);
        self.push(Op::Scale { input, factor }, value, rg)
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
        let value = ops::concat_channels(&values)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Reverse sweep for `L = sum(value(output) ⊙ seed)`.
    ///
    /// `output` must be the last recorded node and `seed` must have its
    /// shape. Because `L` is linear in `seed`, a mask-shaped seed yields the
    /// gradient of the masked output sum in a single pass.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let last = self.nodes.len().saturating_sub(1);
        if self.nodes.is_empty() || output.0 != last {
            return Err(Error::NotFinalNode {
                node: output.0,
                last,
            });
        }
        self.value(output).same_shape(seed, "backward seed")?;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[last] = Some(seed.clone());

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let want = [*input, *kernel, *bias].map(|id| self.nodes[id.0].requires_grad);
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        *stride,
                        *padding,
                        &g,
                        want,
                    )?;
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *kernel, dk)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::LeakyRelu { input, slope } => {
                    let d = ops::leaky_relu_backward(self.value(*input), *slope, &g)?;
                    accumulate(&mut grads, *input, Some(d))?;
                }
                Op::Upsample2x { input } => {
                    let d = ops::upsample_nearest2x_backward(&g)?;
                    accumulate(&mut grads, *input, Some(d))?;
                }
                Op::ChannelSoftmax { input } => {
                    let d = ops::channel_softmax_backward(&node.value, &g)?;
                    accumulate(&mut grads, *input, Some(d))?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, Some(g.clone()))?;
                    accumulate(&mut grads, *b, Some(g))?;
                }
                Op::Mul { a, b } => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, Some(da))?;
                    accumulate(&mut grads, *b, Some(db))?;
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, Some(g.scale(*factor)))?;
                }
                Op::Concat { inputs } => {
                    let channels: Vec<usize> = inputs.iter().map(|id| self.value(*id).shape()[0]).collect();
                    let parts = ops::split_channels(&g, &channels)?;
                    for (id, part) in inputs.iter().zip(parts) {
                        accumulate(&mut grads, *id, Some(part))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Option<Tensor>) -> Result<()> {
    let Some(delta) = delta else {
        return Ok(());
    };
    match &mut grads[id.0] {
        Some(existing) => {
            existing.same_shape(&delta, "gradient accumulation")?;
            for (e, d) in existing.data_mut().iter_mut().zip(delta.as_slice()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_passes_seed_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let grads = g.backward(x, &Tensor::ones(&[3])).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[3]));
    }

    #[test]
    fn scalar_scale() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(5.0));
        let y = g.scale(x, 3.0);
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[3.0]);
    }

    #[test]
    fn seeding_non_final_node_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(5.0));
        let _y = g.scale(x, 3.0);
        assert!(matches!(
            g.backward(x, &Tensor::scalar(1.0)),
            Err(Error::NotFinalNode { node: 0, last: 1 })
        ));
        assert!(Graph::new().backward(x, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x * x + x  => dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y, &Tensor::ones(&[2])).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn recording_does_not_mutate_inputs() {
        let t = Tensor::new(&[1, 2, 2], vec![-1.0, 0.5, 2.0, -0.25]).unwrap();
        let before = t.clone();
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let a = g.leaky_relu(x, 0.2).unwrap();
        let u = g.upsample_nearest2x(a).unwrap();
        let _ = g.backward(u, &Tensor::ones(&[1, 4, 4])).unwrap();
        assert_eq!(t, before);
        assert_eq!(g.value(x), &before);
    }
}
