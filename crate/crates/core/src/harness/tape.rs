//! Matrix-valued reverse-mode differentiation over a fixed operator set.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its inputs.

use crate::numkernel::{mm, mm_nt, mm_tn, Mask, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × c` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    ColBlock(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    /// Leading rows of the input.
    TopRows(Var),
    Softmax {
        input: Var,
        temperature: f64,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    /// A scalar whose gradient w.r.t. `input` was computed in the forward pass.
    Loss {
        input: Var,
        grad: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)]
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = mm(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = mm_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("add: shapes agree");
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(r.row(0)).for_each(|(a, b)| *a += b);
        }
        self.push(v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        self.push(v, Op::Scale(x, k))
    }

    pub fn col_block(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).col_block(start, len);
        self.push(v, Op::ColBlock(x, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let m = self.value(p);
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    /// Rows `ids[r]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn top_rows(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x).row_block(0, n);
        self.push(v, Op::TopRows(x))
    }

    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>, temperature: f64) -> Var {
        let v = crate::numkernel::softmax_rows(self.value(x), mask, temperature)
            .expect("softmax: valid mask and temperature");
        self.push(v, Op::Softmax { input: x, temperature })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|z| 0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh()));
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let h = (r[j] - mean) * inv;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Records a scalar loss with a precomputed gradient w.r.t. `input`.
    pub fn loss(&mut self, input: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(grad.shape(), self.value(input).shape());
        self.push(Matrix::filled(1, 1, value), Op::Loss { input, grad })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let shape = self.value(terms[0].0).shape();
        let mut v = Matrix::zeros(shape.0, shape.1);
        for &(t, w) in &terms {
            v.axpy(w, self.value(t)).expect("weighted_sum: shapes agree");
        }
        self.push(v, Op::WeightedSum(terms))
    }

    /// Gradients of the scalar `output` w.r.t. every node; `None` where no path exists.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &d).expect("gradient shapes agree"),
            slot => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, mm_nt(g, self.value(*b)));
                acc(*b, mm_tn(self.value(*a), g));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, mm(g, self.value(*b)));
                acc(*b, mm_tn(g, self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, row) => {
                let mut r = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    r.row_mut(0).iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += b);
                }
                acc(*x, g.clone());
                acc(*row, r);
            }
            Op::Scale(x, k) => acc(*x, g.scale(*k)),
            Op::ColBlock(x, start) => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, g.col_block(off, w));
                    off += w;
                }
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    d.row_mut(id).iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                }
                acc(*table, d);
            }
            Op::TopRows(x) => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    d.row_mut(i).copy_from_slice(g.row(i));
                }
                acc(*x, d);
            }
            Op::Softmax { input, temperature } => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols() {
                        d[(i, j)] = y[(i, j)] * (g[(i, j)] - dot) / temperature;
                    }
                }
                acc(*input, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .zip_with(g, "gelu", |z, gz| {
                        let t = (GELU_C * (z + GELU_K * z * z * z)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z);
                        gz * (0.5 * (1.0 + t) + 0.5 * z * dt)
                    })
                    .expect("same shape");
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = xhat.shape();
                let mut dg = Matrix::zeros(1, cols);
                let mut db = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let mut dxhat = vec![0.0; cols];
                    for j in 0..cols {
                        dg[(0, j)] += g[(i, j)] * xhat[(i, j)];
                        db[(0, j)] += g[(i, j)];
                        dxhat[j] = g[(i, j)] * gv[(0, j)];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx: f64 = dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx[(i, j)] = inv_std[i] * (dxhat[j] - mean_d - xhat[(i, j)] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Loss { input, grad } => acc(*input, grad.scale(g[(0, 0)])),
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    acc(t, g.scale(w));
                }
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}
