use super::{Array, GradError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Abs(Var),
    Clamp(Var, f64, f64),
    BiasAdd(Var, Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: super::linalg::ConvGeom,
        cols: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
    Narrow(Var, usize, usize),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest(Var),
    Bilinear {
        x: Var,
        taps: Vec<[(usize, f64); 4]>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SigmoidFocal {
        x: Var,
        targets: Vec<f64>,
        gamma: f64,
        alpha: f64,
    },
}

pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Straight-line record of array operations, replayed in reverse by
/// [`Graph::backward`].
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// Nodes whose inputs carry no gradient are stored as constants and keep no
/// saved activations.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    strict: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// In strict mode every primitive rejects non-finite inputs.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input array. It takes part in differentiation iff it was
    /// created with [`Array::requiring_grad`].
    pub fn leaf(&mut self, array: Array) -> Var {
        let requires_grad = array.requires_grad();
        self.nodes.push(Node {
            value: array,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, array: Array) -> Var {
        self.nodes.push(Node {
            value: array.without_grad(),
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// A copy of `v`'s value that is cut off from differentiation.
    pub fn detach(&mut self, v: Var) -> Var {
        let a = self.nodes[v.0].value.without_grad();
        self.constant(a)
    }

    pub(crate) fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<(), GradError> {
        if self.strict {
            for v in inputs {
                if !self.nodes[v.0].value.all_finite() {
                    return Err(GradError::NonFinite { op });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`, adding dLoss/dLeaf into the grad
    /// buffer of every gradient-carrying leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(GradError::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            let mut acc = GradAcc {
                grads: &mut grads,
                nodes: &self.nodes,
            };
            backward_node(node, &gout, &mut acc);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if let Some(buf) = node.value.grad_mut() {
                    buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v);
                }
            }
        }
        Ok(())
    }
}

pub(crate) struct GradAcc<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl<'a> GradAcc<'a> {
    /// Mutable gradient buffer for `v`, or `None` if `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub(crate) fn value(&self, v: Var) -> &'a Array {
        let nodes: &'a [Node] = self.nodes;
        &nodes[v.0].value
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(s) = self.slot(v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

fn backward_node(node: &Node, gout: &[f64], acc: &mut GradAcc<'_>) {
    use super::{elementwise as ew, linalg, nn, shape as sh};
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::Add(a, b) => {
            acc.add(*a, gout);
            acc.add(*b, gout);
        }
        Op::Sub(a, b) => {
            acc.add(*a, gout);
            if let Some(s) = acc.slot(*b) {
                s.iter_mut().zip(gout).for_each(|(x, g)| *x -= g);
            }
        }
        Op::Mul(a, b) => ew::mul_backward(*a, *b, gout, acc),
        Op::Div(a, b) => ew::div_backward(*a, *b, gout, acc),
        Op::Minimum(a, b) => ew::select_backward(*a, *b, gout, acc, true),
        Op::Maximum(a, b) => ew::select_backward(*a, *b, gout, acc, false),
        Op::AddScalar(a) => acc.add(*a, gout),
        Op::MulScalar(a, c) => {
            if let Some(s) = acc.slot(*a) {
                s.iter_mut().zip(gout).for_each(|(x, g)| *x += c * g);
            }
        }
        Op::Relu(a) => ew::unary_backward(*a, out, gout, acc, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid(a) => ew::unary_backward(*a, out, gout, acc, |_, y| y * (1.0 - y)),
        Op::Exp(a) => ew::unary_backward(*a, out, gout, acc, |_, y| y),
        Op::Ln(a) => ew::unary_backward(*a, out, gout, acc, |x, _| 1.0 / x),
        Op::Powf(a, e) => {
            let e = *e;
            ew::unary_backward(*a, out, gout, acc, move |x, _| e * x.powf(e - 1.0))
        }
        Op::Abs(a) => ew::unary_backward(*a, out, gout, acc, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            ew::unary_backward(*a, out, gout, acc, move |x, _| {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Op::BiasAdd(x, b) => linalg::bias_add_backward(*x, *b, gout, acc),
        Op::Matmul(a, b) => linalg::matmul_backward(*a, *b, gout, acc),
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => linalg::conv2d_backward(*x, *w, *b, geom, cols, gout, acc),
        Op::Sum(a) => {
            if let Some(s) = acc.slot(*a) {
                s.iter_mut().for_each(|x| *x += gout[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = acc.slot(*a) {
                let g = gout[0] / s.len() as f64;
                s.iter_mut().for_each(|x| *x += g);
            }
        }
        Op::SumAxis(a, axis) => sh::reduce_axis_backward(*a, *axis, gout, acc, false),
        Op::MeanAxis(a, axis) => sh::reduce_axis_backward(*a, *axis, gout, acc, true),
        Op::Softmax(a, axis) => nn::softmax_backward(*a, *axis, out, gout, acc),
        Op::Reshape(a) => acc.add(*a, gout),
        Op::Permute(a, perm) => sh::permute_backward(*a, perm, out.shape(), gout, acc),
        Op::Concat(parts, axis) => sh::concat_backward(parts, *axis, out.shape(), gout, acc),
        Op::IndexSelect(a, axis, idx) => sh::index_select_backward(*a, *axis, idx, gout, acc),
        Op::Narrow(a, axis, start) => sh::narrow_backward(*a, *axis, *start, out.shape(), gout, acc),
        Op::MaxPool2 { x, argmax } => {
            if let Some(s) = acc.slot(*x) {
                for (g, &j) in gout.iter().zip(argmax) {
                    s[j] += g;
                }
            }
        }
        Op::UpsampleNearest(x) => nn::upsample_backward(*x, out.shape(), gout, acc),
        Op::Bilinear { x, taps } => nn::bilinear_backward(*x, taps, out.shape(), gout, acc),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => nn::layer_norm_backward(*x, *gamma, *beta, xhat, inv_std, gout, acc),
        Op::SigmoidFocal {
            x,
            targets,
            gamma,
            alpha,
        } => nn::sigmoid_focal_backward(*x, targets, *gamma, *alpha, gout, acc),
    }
}
