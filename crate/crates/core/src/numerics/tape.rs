//! Reverse-mode automatic differentiation over whole matrices.
//!
//! Every operation evaluates eagerly and appends a node holding its value,
//! so nodes are always in topological order. [`Tape::backward`] walks the
//! nodes once in reverse.

use super::ops::{self, LnCache, LnMode};
use super::{Matrix, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Transpose(Var),
    LayerNorm(Var, LnCache),
    ResidualNorm { x: Var, delta: Var, cache: LnCache },
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    CausalSoftmax(Var),
    /// Scalar loss of `input` with its precomputed gradient.
    Loss { input: Var, grad: Matrix },
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    is_param: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to the parameter leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Consumes the gradient of `v`; parameters always have one.
    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op, is_param: false });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_scalar()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// `x + b·𝟙ᵀ` for a column vector `b`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x).add_column_broadcast(self.value(b));
        self.push(value, Op::AddBias(x, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn layer_norm(&mut self, x: Var, mode: LnMode) -> Result<Var, NumericsError> {
        let cache = ops::layer_norm(self.value(x), mode)?;
        Ok(self.push(cache.normalized.clone(), Op::LayerNorm(x, cache)))
    }

    /// `LN(x + delta)` for an `x` that is itself a LayerNorm output.
    ///
    /// In [`LnMode::Exact`], columns where `delta` is exactly zero are passed
    /// through unchanged: LayerNorm is idempotent on its own outputs, and
    /// recomputing it would only add rounding noise.
    pub fn residual_norm(&mut self, x: Var, delta: Var, mode: LnMode) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let dv = self.value(delta);
        let cache = ops::layer_norm(&xv.add(dv), mode)?;
        let mut value = cache.normalized.clone();
        if mode == LnMode::Exact {
            for j in 0..dv.cols() {
                if (0..dv.rows()).all(|i| dv[(i, j)] == 0.0) {
                    value.set_column(j, &xv.column(j));
                }
            }
        }
        Ok(self.push(value, Op::ResidualNorm { x, delta, cache }))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.value(src).slice_columns(start, len);
        self.push(value, Op::SliceCols { src, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let value = {
            let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
            Matrix::concat_columns(&mats)
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn causal_softmax(&mut self, scores: Var) -> Var {
        let value = ops::causal_softmax(self.value(scores));
        self.push(value, Op::CausalSoftmax(scores))
    }

    /// Records a scalar loss whose gradient with respect to `input` is known.
    pub fn loss(&mut self, input: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(grad.shape(), self.value(input).shape(), "loss gradient shape mismatch");
        self.push(Matrix::scalar(value), Op::Loss { input, grad })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &Matrix) -> Var {
        let (value, grad) = ops::cross_entropy(self.value(logits), targets);
        self.loss(logits, value, grad)
    }

    pub fn mse(&mut self, logits: Var, targets: &Matrix) -> Var {
        let (value, grad) = ops::mse(self.value(logits), targets);
        self.loss(logits, value, grad)
    }

    /// Squared Frobenius norm as a 1×1 node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).frobenius_sq());
        self.push(value, Op::SumSquares(x))
    }

    /// Gradients of the 1×1 node `output` with respect to every parameter.
    ///
    /// Parameter leaves that do not influence `output` get a zero gradient.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut send = |target: Var, g: Matrix| match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    send(*a, upstream.matmul_t(self.value(*b)));
                    send(*b, self.value(*a).t_matmul(&upstream));
                }
                Op::Add(a, b) => {
                    send(*a, upstream.clone());
                    send(*b, upstream.clone());
                }
                Op::AddBias(x, b) => {
                    send(*b, upstream.row_sums());
                    send(*x, upstream.clone());
                }
                Op::Relu(x) => {
                    let mask = self.value(*x);
                    send(*x, upstream.zip_map(mask, |g, v| if v > 0.0 { g } else { 0.0 }));
                }
                Op::Scale(x, c) => send(*x, upstream.scale(*c)),
                Op::Transpose(x) => send(*x, upstream.transpose()),
                Op::LayerNorm(x, cache) => send(*x, ops::layer_norm_backward(cache, &upstream)),
                Op::ResidualNorm { x, delta, cache } => {
                    let g = ops::layer_norm_backward(cache, &upstream);
                    send(*delta, g.clone());
                    send(*x, g.clone());
                }
                Op::SliceCols { src, start } => {
                    let (r, c) = self.value(*src).shape();
                    let mut g = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..upstream.cols() {
                            g[(i, start + j)] = upstream[(i, j)];
                        }
                    }
                    send(*src, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        send(p, upstream.slice_columns(offset, w));
                        offset += w;
                    }
                }
                Op::CausalSoftmax(s) => {
                    send(*s, ops::causal_softmax_backward(&node.value, &upstream));
                }
                Op::Loss { input, grad } => send(*input, grad.scale(upstream.as_scalar())),
                Op::SumSquares(x) => send(*x, self.value(*x).scale(2.0 * upstream.as_scalar())),
            }
            if node.is_param {
                grads[idx] = Some(upstream);
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[idx].is_none() {
                let (r, c) = node.value.shape();
                grads[idx] = Some(Matrix::zeros(r, c));
            }
        }
        Gradients { grads }
    }
}
