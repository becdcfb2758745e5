//! A small tape-based reverse-mode differentiation engine.
//!
//! Every primitive appends one node holding its forward value and the
//! references needed by its backward rule. Nodes are appended in evaluation
//! order, so the node list is already topologically sorted and
//! [`Tape::grad`] walks it backwards once.
//!
//! Leaves are created either as [`Tape::leaf`] (gradient tracked) or
//! [`Tape::constant`]. Backward rules skip inputs that do not depend on any
//! tracked leaf, which is what makes input-only gradients (attacks) and
//! parameter-only gradients (training) cheap on the same graph code.

pub mod kernels;

use std::rc::Rc;

use crate::dct::DctPlan;
use crate::error::{Error, Result};
use crate::mask::{apply_mask_with_plan, BinaryMask};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    shape: Shape,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
    },
    Downsample2x(usize),
    Upsample2x(usize),
    LeakyRelu(usize, f64),
    MatMul(usize, usize),
    L1Loss(usize, usize),
    MaskedLinear {
        input: usize,
        mask: Rc<BinaryMask>,
        plan: Rc<DctPlan>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        label: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::grad`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.adjoints.get(v.id).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => {
                let s = self.shapes[v.id];
                Tensor::zeros(s.height, s.width, s.channels)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let shape = value.shape();
        self.nodes.push(Node { value, op, tracked });
        Var {
            id: self.nodes.len() - 1,
            shape,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf whose gradient is never needed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let t = self.tracked(&[a.id, b.id]);
        Ok(self.push(v, Op::Add(a.id, b.id), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let t = self.tracked(&[a.id, b.id]);
        Ok(self.push(v, Op::Sub(a.id, b.id), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let t = self.tracked(&[a.id, b.id]);
        Ok(self.push(v, Op::Mul(a.id, b.id), t))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let t = self.tracked(&[a.id]);
        self.push(v, Op::Scale(a.id, k), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let t = self.tracked(&[a.id]);
        self.push(v, Op::Sum(a.id), t)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let v = kernels::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let t = self.tracked(&[input.id, kernel.id, bias.id]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input: input.id,
                kernel: kernel.id,
                bias: bias.id,
            },
            t,
        ))
    }

    pub fn downsample2x(&mut self, a: Var) -> Result<Var> {
        let v = kernels::downsample2x(self.value(a))?;
        let t = self.tracked(&[a.id]);
        Ok(self.push(v, Op::Downsample2x(a.id), t))
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = kernels::upsample2x(self.value(a));
        let t = self.tracked(&[a.id]);
        self.push(v, Op::Upsample2x(a.id), t)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = kernels::leaky_relu(self.value(a), slope);
        let t = self.tracked(&[a.id]);
        self.push(v, Op::LeakyRelu(a.id, slope), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let t = self.tracked(&[a.id, b.id]);
        Ok(self.push(v, Op::MatMul(a.id, b.id), t))
    }

    /// Mean absolute difference. The subgradient at a zero difference is 0.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::scalar(kernels::l1(self.value(a), self.value(b))?);
        let t = self.tracked(&[a.id, b.id]);
        Ok(self.push(v, Op::L1Loss(a.id, b.id), t))
    }

    /// `F⁻¹ · diag(M) · F` with the mask frozen into the node.
    pub fn masked_linear(&mut self, a: Var, mask: Rc<BinaryMask>) -> Result<Var> {
        let x = self.value(a);
        let plan = Rc::new(DctPlan::new(x.height(), x.width()));
        self.masked_linear_with_plan(a, mask, plan)
    }

    pub fn masked_linear_with_plan(
        &mut self,
        a: Var,
        mask: Rc<BinaryMask>,
        plan: Rc<DctPlan>,
    ) -> Result<Var> {
        let v = apply_mask_with_plan(self.value(a), &mask, &plan)?;
        let t = self.tracked(&[a.id]);
        Ok(self.push(
            v,
            Op::MaskedLinear {
                input: a.id,
                mask,
                plan,
            },
            t,
        ))
    }

    /// `−log softmax(logits)[label]` over the flattened logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::DimensionChain(format!(
                "label {label} out of range for {} logits",
                z.len()
            )));
        }
        let p = kernels::softmax(z.data());
        let v = Tensor::scalar(-p[label].max(f64::MIN_POSITIVE).ln());
        let t = self.tracked(&[logits.id]);
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits: logits.id,
                label,
            },
            t,
        ))
    }

    /// Smallest distance of any kink input from its non-differentiable
    /// point: leaky-ReLU pre-activations and L1 differences. Finite-difference
    /// checks should resample instances where this is small.
    pub fn min_kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(a, _) => {
                    for &v in self.nodes[a].value.data() {
                        m = m.min(v.abs());
                    }
                }
                Op::L1Loss(a, b) => {
                    for (x, y) in self.nodes[a]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[b].value.data())
                    {
                        m = m.min((x - y).abs());
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// node; use [`Gradients::get`] with the variables of interest.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        if !loss.shape.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape));
        }
        let n = loss.id + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..n).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                adj[id] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// Convenience: gradients for a specific list of variables.
    pub fn grad_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.grad(loss)?;
        Ok(wrt.iter().map(|&v| g.get(v)).collect())
    }

    fn backward_node(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let want = |i: usize| nodes[i].tracked;
        let mut acc = |i: usize, t: Tensor| match &mut adj[i] {
            Some(a) => a.add_scaled(&t, 1.0).expect("adjoint shape"),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, g.clone());
                }
                if want(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, g.clone());
                }
                if want(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(*a, g.mul(&nodes[*b].value).expect("shape"));
                }
                if want(*b) {
                    acc(*b, g.mul(&nodes[*a].value).expect("shape"));
                }
            }
            Op::Scale(a, k) => {
                if want(*a) {
                    acc(*a, g.scale(*k));
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let s = nodes[*a].value.shape();
                    acc(*a, Tensor::full(s.height, s.width, s.channels, g.item()));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let kt = &nodes[*kernel].value;
                if want(*input) {
                    let cin = nodes[*input].value.channels();
                    acc(*input, kernels::conv2d_grad_input(g, kt, cin));
                }
                if want(*kernel) || want(*bias) {
                    let (gk, gb) =
                        kernels::conv2d_grad_params(&nodes[*input].value, g, kt.height());
                    if want(*kernel) {
                        acc(*kernel, gk);
                    }
                    if want(*bias) {
                        acc(*bias, gb);
                    }
                }
            }
            Op::Downsample2x(a) => {
                if want(*a) {
                    acc(*a, kernels::downsample2x_grad(g));
                }
            }
            Op::Upsample2x(a) => {
                if want(*a) {
                    acc(*a, kernels::upsample2x_grad(g));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if want(*a) {
                    let x = &nodes[*a].value;
                    let d = x
                        .zip_map(g, |xv, gv| if xv > 0.0 { gv } else { slope * gv })
                        .expect("shape");
                    acc(*a, d);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if want(*a) {
                    let d = kernels::matmul(g, &kernels::transpose(bv)).expect("shape");
                    acc(*a, d);
                }
                if want(*b) {
                    let d = kernels::matmul(&kernels::transpose(av), g).expect("shape");
                    acc(*b, d);
                }
            }
            Op::L1Loss(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let k = g.item() / av.len() as f64;
                let sign = av
                    .zip_map(bv, |x, y| {
                        let d = x - y;
                        if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                if want(*b) {
                    acc(*b, sign.scale(-1.0));
                }
                if want(*a) {
                    acc(*a, sign);
                }
            }
            Op::MaskedLinear { input, mask, plan } => {
                if want(*input) {
                    // F is orthonormal and diag(M) symmetric: the operator is self-adjoint.
                    acc(*input, apply_mask_with_plan(g, mask, plan).expect("shape"));
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                if want(*logits) {
                    let z = &nodes[*logits].value;
                    let mut p = kernels::softmax(z.data());
                    p[*label] -= 1.0;
                    let k = g.item();
                    acc(
                        *logits,
                        Tensor::from_raw(z.shape(), p.into_iter().map(|v| v * k).collect()),
                    );
                }
            }
        }
    }
}
