use crate::error::{AutodiffError, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation record. Inputs always refer to earlier nodes, so node order is a
/// topological order and the tape is acyclic by construction.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    AddLastDim {
        x: Var,
        bias: Var,
    },
    AddLeadingDim {
        x: Var,
        p: Var,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    VarAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: Var,
        outer: usize,
        width: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CdcConv {
        x: Var,
        w: Var,
        theta: f64,
    },
    RowDistances {
        c: Var,
        protos: Vec<f64>,
        n_protos: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. }
            | BatchMatMul { a, b, .. }
            | Add { a, b }
            | Sub { a, b }
            | Mul { a, b } => {
                vec![*a, *b]
            }
            AddLastDim { x, bias } => vec![*x, *bias],
            AddLeadingDim { x, p } => vec![*x, *p],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            CdcConv { x, w, .. } => vec![*x, *w],
            Concat { parts, .. } => parts.clone(),
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            RowDistances { c, .. } => vec![*c],
            Scale { a, .. }
            | Gelu { a }
            | Softmax { a }
            | Dropout { a, .. }
            | Sum { a }
            | Mean { a }
            | MeanAxis { a, .. }
            | VarAxis { a, .. }
            | Slice { a, .. }
            | Reshape { a }
            | Permute { a, .. } => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    /// Records a tensor as an input; it participates in differentiation when
    /// its `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.nodes.push(Node {
            value: {
                let mut t = tensor;
                t.grad = None;
                t
            },
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar node. Returns gradients for every node
    /// on a differentiable path to `loss`; the tape itself is left untouched,
    /// so several backward passes may be run from different roots.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(AutodiffError::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(AutodiffError::Numeric {
                op: "backward",
                detail: format!("loss is {}", root.value.item()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    nodes: &self.nodes,
                };
                ops::backward(&node.op, &node.value, &g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl<'a> GradSink<'a> {
    /// Lazily zero-initialized accumulation buffer, `None` for nodes that do
    /// not require gradients.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        let nodes: &'a [Node] = self.nodes;
        &nodes[v.0].value
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(s) = self.slot(v) {
            for (d, x) in s.iter_mut().zip(g) {
                *d += x;
            }
        }
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when `v` is unreachable from the root.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Copies the gradient into a tensor's `grad` slot.
    pub fn write_into(&self, graph: &Graph, v: Var, tensor: &mut Tensor) {
        tensor.grad = Some(self.get_or_zeros(graph, v));
    }
}
