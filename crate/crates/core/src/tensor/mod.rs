//! Minimal reverse-mode differentiable tensor engine.
//!
//! A `Graph` is a define-by-run tape: every operation evaluates eagerly and
//! records enough provenance to run `backward` from a scalar loss. Tensors
//! are dense row-major buffers. The op set is exactly what the motion
//! autoencoders, the cross-domain losses and the differentiable forward
//! kinematics need; there is no broadcasting beyond the listed cases.
//!
//! Gradients accumulate: calling `backward` twice without `zero_grad`
//! doubles every leaf gradient.

mod checkpoint;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, NamedTensor, CHECKPOINT_VERSION};
pub use optim::{
    adam_step, clip_global_norm, AdamState, Binding, EmaState, Init, OptimError, ParamRef,
    ParamStore,
};

use crate::real::Real;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// b's shape is a suffix of a's shape; b is repeated over leading dims.
    AddBroadcast(usize, usize),
    /// mul * x + add, elementwise; only the slope matters going backward.
    AffineScalar { x: usize, mul: f64 },
    /// [n,k] x [k,m]
    Matmul(usize, usize),
    /// [g,n,k] x [g,k,m]
    BatchMatmul(usize, usize),
    /// 2-D transpose
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    SliceAxis { x: usize, axis: usize, start: usize, len: usize },
    /// pick the listed slots of one axis, in order
    GatherAxis { x: usize, axis: usize, idxs: Vec<usize> },
    /// write the slots of one axis into a zero tensor of `out_dim` slots
    ScatterAxis {
        x: usize,
        axis: usize,
        idxs: Vec<usize>,
        out_dim: usize,
    },
    /// repeat every slot of one axis `factor` times
    ReplicateAxis { x: usize, axis: usize, factor: usize },
    /// rank-3 [g,t,d] -> [g,t/w,d]; per-(g,t) mask, empty windows yield zero
    MaskedWindowMean {
        x: usize,
        window: usize,
        mask: std::rc::Rc<Vec<bool>>,
    },
    MeanAll(usize),
    /// mean over one axis, dropping it from the shape
    MeanAxis { x: usize, axis: usize },
    /// softmax along one axis
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Linear { x: usize, w: usize, b: usize },
    Mha {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
    },
    Gelu(usize),
    /// [n,d] x [n,d] -> [n]; cosine of each row pair
    CosineRows(usize, usize),
    MseAll(usize, usize),
    /// sum(mask * (a-b)^2) / denom
    MaskedMse {
        a: usize,
        b: usize,
        mask: std::rc::Rc<Vec<bool>>,
        denom: f64,
    },
    L2NormAll(usize),
    /// [n,3] rows scaled to unit length (epsilon-stabilized)
    Normalize3(usize),
    /// [n,3] . [n,3] -> [n,1]
    Dot3(usize, usize),
    /// [n,3] x [n,3] -> [n,3] cross products
    Cross3(usize, usize),
    /// [n,1] broadcast-multiplied into [n,d]
    MulBcastLast { s: usize, x: usize },
    /// [n,9] column-major 3x3 matrix products
    Mat3Mul(usize, usize),
    /// [n,9] column-major matrices applied to one constant 3-vector
    Mat3VecConst { m: usize, v: [f64; 3] },
}

pub(crate) struct Node<R: Real> {
    pub shape: Vec<usize>,
    pub values: Vec<R>,
    pub grad: Option<Vec<R>>,
    /// Op-specific stash for backward (softmax outputs, attention weights,
    /// layer-norm statistics).
    pub saved: Vec<R>,
    pub op: Op,
    pub needs_grad: bool,
}

pub struct Graph<R: Real> {
    pub(crate) nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[R] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[R]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, id: TensorId) -> R {
        debug_assert_eq!(numel(self.shape(id)), 1);
        self.nodes[id.0].values[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<R>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            saved: Vec::new(),
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_saved(
        &mut self,
        shape: Vec<usize>,
        values: Vec<R>,
        saved: Vec<R>,
        op: Op,
        needs_grad: bool,
    ) -> TensorId {
        let id = self.push(shape, values, op, needs_grad);
        self.nodes[id.0].saved = saved;
        id
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<R>) -> TensorId {
        assert_eq!(numel(shape), values.len(), "constant shape/value mismatch");
        self.push(shape.to_vec(), values, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: R) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn param(&mut self, shape: &[usize], values: Vec<R>) -> TensorId {
        assert_eq!(numel(shape), values.len(), "param shape/value mismatch");
        self.push(shape.to_vec(), values, Op::Leaf, true)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse accumulation from a scalar loss into every `needs_grad` node.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // loss does not depend on any parameter
        }
        // Upstream gradients for this pass only; node.grad keeps accumulating
        // across repeated backward calls.
        let n = self.nodes.len();
        let mut up: Vec<Option<Vec<R>>> = vec![None; n];
        up[loss.0] = Some(vec![R::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = up[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            // record into the node's persistent gradient buffer
            {
                let node = &mut self.nodes[i];
                let g = node
                    .grad
                    .get_or_insert_with(|| vec![R::ZERO; node.values.len()]);
                for (gi, &c) in g.iter_mut().zip(&gy) {
                    *gi += c;
                }
            }
            self.backward_step(i, &gy, &mut up);
        }
        Ok(())
    }

    fn upstream(up: &mut [Option<Vec<R>>], idx: usize, len: usize) -> &mut Vec<R> {
        up[idx].get_or_insert_with(|| vec![R::ZERO; len])
    }

    fn accum(&self, up: &mut [Option<Vec<R>>], idx: usize, contrib: Vec<R>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let buf = Self::upstream(up, idx, self.nodes[idx].values.len());
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }
}
