use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::{self, BnMode};
use super::{numel, Scalar, Tensor};

/// Index of a recorded node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct Node<T: Scalar> {
    pub shape: Vec<usize>,
    pub values: Arc<Vec<T>>,
    pub op: OpRecord<T>,
}

/// Everything backward needs, saved at forward time.
pub(crate) enum OpRecord<T: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Arc<Vec<T>>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: NodeId,
    },
    UpsampleNearest {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
        a_channels: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
    WeightedSum {
        input: NodeId,
        weights: Arc<Vec<T>>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        softmax: Arc<Vec<T>>,
        labels: Arc<Vec<u8>>,
    },
}

/// Recorded forward pass. Nodes are appended in execution order, so ids are
/// already a topological order and one reverse sweep visits each node once.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enter a tensor onto the tape as a differentiable leaf.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Tensor<T> {
        let id = self.push(tensor.shape().to_vec(), tensor.values_arc(), OpRecord::Leaf);
        Tensor::with_node(tensor.shape().to_vec(), self.nodes[id.0].values.clone(), id)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Arc<Vec<T>>, op: OpRecord<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, values, op });
        id
    }

    pub(crate) fn output(&mut self, shape: Vec<usize>, values: Vec<T>, op: OpRecord<T>) -> Tensor<T> {
        let values = Arc::new(values);
        let id = self.push(shape.clone(), Arc::clone(&values), op);
        Tensor::with_node(shape, values, id)
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub(crate) fn require_node(&self, t: &Tensor<T>, role: &str) -> Result<NodeId> {
        t.node().ok_or_else(|| {
            Error::Autodiff(format!("{role} tensor is not recorded on the tape"))
        })
    }

    /// Reverse sweep from a scalar loss. Returns per-leaf gradients; interior
    /// gradients are freed as soon as they have been propagated.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        let loss_id = self.require_node(loss, "loss")?;
        if numel(loss.shape()) != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_id.0] = Some(vec![T::one()]);

        for id in (0..=loss_id.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &self.nodes[id];
            if matches!(node.op, OpRecord::Leaf) {
                continue; // retained for extraction
            }
            let g = grads[id].take().expect("checked above");
            self.backprop_node(node, &g, &mut grads)?;
        }

        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match &node.op {
            OpRecord::Leaf => {}
            OpRecord::Conv2d { input, kernel, bias } => {
                let in_node = self.node(*input);
                let k_node = self.node(*kernel);
                accumulate(
                    grads,
                    *input,
                    ops::conv2d_grad_input(g, &k_node.values, &in_node.shape, &k_node.shape),
                );
                accumulate(
                    grads,
                    *kernel,
                    ops::conv2d_grad_kernel(g, &in_node.values, &in_node.shape, &k_node.shape),
                );
                accumulate(grads, *bias, ops::conv2d_grad_bias(g, &in_node.shape, &k_node.shape));
            }
            OpRecord::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let shape = &self.node(*input).shape;
                let gamma_vals = &self.node(*gamma).values;
                let (dx, dgamma, dbeta) =
                    ops::batch_norm_grads(g, xhat, inv_std, gamma_vals, shape, *mode);
                accumulate(grads, *input, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            OpRecord::LeakyRelu { input, slope } => {
                let x = &self.node(*input).values;
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| if xi >= T::zero() { gi } else { gi * *slope })
                    .collect();
                accumulate(grads, *input, dx);
            }
            OpRecord::MaxPool { input, argmax } => {
                let n = self.node(*input).values.len();
                let mut dx = vec![T::zero(); n];
                for (out_i, &src) in argmax.iter().enumerate() {
                    dx[src as usize] = dx[src as usize] + g[out_i];
                }
                accumulate(grads, *input, dx);
            }
            OpRecord::AvgPool { input } => {
                let shape = &self.node(*input).shape;
                accumulate(grads, *input, ops::avg_pool_grad(g, shape));
            }
            OpRecord::UpsampleNearest { input } => {
                let shape = &self.node(*input).shape;
                accumulate(grads, *input, ops::upsample_grad(g, shape));
            }
            OpRecord::ConcatChannels { a, b, a_channels } => {
                let (da, db) = ops::concat_grads(
                    g,
                    &self.node(*a).shape,
                    &self.node(*b).shape,
                    *a_channels,
                );
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            OpRecord::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            OpRecord::Sum { input } => {
                let n = self.node(*input).values.len();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            OpRecord::WeightedSum { input, weights } => {
                let dx = weights.iter().map(|&w| w * g[0]).collect();
                accumulate(grads, *input, dx);
            }
            OpRecord::SoftmaxCrossEntropy {
                logits,
                softmax,
                labels,
            } => {
                let shape = &self.node(*logits).shape;
                accumulate(grads, *logits, ops::softmax_ce_grad(g[0], softmax, labels, shape));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], target: NodeId, contrib: Vec<T>) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Gradients keyed by tape node, retained for leaves.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf tensor, if it was reached.
    pub fn wrt(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        tensor.node().and_then(|id| self.by_node(id))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}
