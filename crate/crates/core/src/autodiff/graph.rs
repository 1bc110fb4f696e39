use crate::error::{Error, Result};

use super::tensor::{matmul_nt, matmul_tn, Tensor};

/// Row norms below this are treated as a collapsed (degenerate) representation.
pub const EPS_NORM: f64 = 1e-12;

/// Unit-norm tolerance for rows fed to the tangential projection.
pub const UNIT_TOL: f64 = 1e-9;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Normalize { input: Var, norms: Vec<f64> },
    NormalizeDetached { input: Var, norms: Vec<f64> },
    SquaredDistance(Var, Var),
    RowDot(Var, Var),
    MulRows(Var, Var),
    PairwiseSqDist(Var),
    OffDiagMean(Var),
    Mean(Var),
    Sum(Var),
    StopGradient,
    Tangential(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in evaluation order, so every record's inputs precede
/// it and a single reverse sweep is a valid topological traversal.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], one entry per node that
/// requires a gradient. Constants and stop-gradient outputs have none.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; panics if `v` does not carry one.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("node carries no gradient")
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

    /// Registers a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of a `[batch x n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("add_bias")?;
        let bv = self.value(bias);
        if bv.shape() != [cols] {
            return Err(Error::dim(
                "add_bias",
                format!("bias shape {:?} does not match {cols} columns", bv.shape()),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        for r in 0..rows {
            for (x, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("zero divisor at index {i}"),
            });
        }
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    fn row_norms(&self, a: Var, op: &'static str) -> Result<Vec<f64>> {
        let t = self.value(a);
        let (rows, _) = t.dims2(op)?;
        (0..rows)
            .map(|r| {
                let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < EPS_NORM || !n.is_finite() {
                    Err(Error::DegenerateRepresentation {
                        row: r,
                        norm: n,
                        eps: EPS_NORM,
                    })
                } else {
                    Ok(n)
                }
            })
            .collect()
    }

    fn divide_rows(t: &Tensor, norms: &[f64]) -> Tensor {
        let cols = t.shape()[1];
        let mut data = t.data().to_vec();
        for (r, n) in norms.iter().enumerate() {
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x /= n;
            }
        }
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    }

    /// Rowwise `a / ||a||` with the full normalization Jacobian on backward.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let norms = self.row_norms(a, "l2_normalize")?;
        let out = Self::divide_rows(self.value(a), &norms);
        Ok(self.push(out, Op::Normalize { input: a, norms }, &[a]))
    }

    /// Rowwise `a / sg(||a||)`: the norm is treated as a constant on backward,
    /// so the radial part of the upstream gradient reaches `a` unchanged.
    pub fn l2_normalize_detached(&mut self, a: Var) -> Result<Var> {
        let norms = self.row_norms(a, "l2_normalize_detached")?;
        let out = Self::divide_rows(self.value(a), &norms);
        Ok(self.push(out, Op::NormalizeDetached { input: a, norms }, &[a]))
    }

    /// Rowwise `||a - b||^2`, shape `[batch]`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_distance", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, _) = ta.dims2("squared_distance")?;
        let data = (0..rows)
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::SquaredDistance(a, b), &[a, b]))
    }

    /// Rowwise inner product, shape `[batch]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, _) = ta.dims2("row_dot")?;
        let data = (0..rows)
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDot(a, b), &[a, b]))
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("mul_rows")?;
        if self.value(s).shape() != [rows] {
            return Err(Error::dim(
                "mul_rows",
                format!("scale shape {:?} does not match {rows} rows", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data();
        let mut data = self.value(a).data().to_vec();
        for (r, &k) in sv.iter().enumerate() {
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x *= k;
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::MulRows(a, s), &[a, s]))
    }

    /// `[batch x batch]` matrix of squared distances between rows.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, _) = t.dims2("pairwise_sq_dist")?;
        let mut data = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in (i + 1)..rows {
                let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                data[i * rows + j] = d;
                data[j * rows + i] = d;
            }
        }
        let out = Tensor::matrix(rows, rows, data)?;
        Ok(self.push(out, Op::PairwiseSqDist(a), &[a]))
    }

    /// Mean over the off-diagonal entries of a square matrix.
    pub fn off_diag_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("off_diag_mean")?;
        if r != c {
            return Err(Error::dim("off_diag_mean", format!("matrix [{r}x{c}] is not square")));
        }
        if r < 2 {
            return Err(Error::InsufficientBatch {
                op: "off_diag_mean",
                needed: 2,
                got: r,
            });
        }
        let total: f64 = (0..r)
            .flat_map(|i| (0..r).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| t.data()[i * r + j])
            .sum();
        let out = Tensor::scalar(total / (r * (r - 1)) as f64);
        Ok(self.push(out, Op::OffDiagMean(a), &[a]))
    }

    /// Arithmetic mean of all entries.
    pub fn batch_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptyBatch("batch_mean"));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        Ok(self.push(out, Op::Mean(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Identity on forward; blocks the gradient on backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push_raw(out, Op::StopGradient, false)
    }

    /// Identity on forward over unit rows; on backward the upstream gradient is
    /// projected onto the tangent space of the sphere at each row.
    pub fn tangential(&mut self, a: Var) -> Result<Var> {
        check_unit_rows(self.value(a), "tangential")?;
        let out = self.value(a).clone();
        Ok(self.push(out, Op::Tangential(a), &[a]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if !node.requires_grad || matches!(node.op, Op::StopGradient) {
                    return None;
                }
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(*a, matmul_nt(g, val(*b).data(), m, n, k));
                acc(*b, matmul_tn(val(*a).data(), g, m, k, n));
            }
            Op::AddBias(a, bias) => {
                let cols = val(*bias).numel();
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                acc(*a, g.to_vec());
                acc(*bias, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(g, y)| g / y).collect());
                acc(
                    *b,
                    g.iter().zip(av).zip(bv).map(|((g, x), y)| -g * x / (y * y)).collect(),
                );
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(a) => acc(*a, g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect()),
            Op::Normalize { input, norms } => {
                // d/da (a/|a|) . g = (g - <g, u> u) / |a|
                let cols = node.value.shape()[1];
                let mut out = vec![0.0; g.len()];
                for (r, n) in norms.iter().enumerate() {
                    let u = node.value.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(u).map(|(x, y)| x * y).sum();
                    for c in 0..cols {
                        out[r * cols + c] = (gr[c] - dot * u[c]) / n;
                    }
                }
                acc(*input, out);
            }
            Op::NormalizeDetached { input, norms } => {
                let cols = node.value.shape()[1];
                let mut out = g.to_vec();
                for (r, n) in norms.iter().enumerate() {
                    out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= n);
                }
                acc(*input, out);
            }
            Op::SquaredDistance(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.shape()[1];
                let mut ga = vec![0.0; ta.numel()];
                for (r, gr) in g.iter().enumerate() {
                    for c in 0..cols {
                        let i = r * cols + c;
                        ga[i] = 2.0 * gr * (ta.data()[i] - tb.data()[i]);
                    }
                }
                let gb = ga.iter().map(|v| -v).collect();
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.shape()[1];
                let spread = |other: &Tensor| -> Vec<f64> {
                    other
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| g[i / cols] * v)
                        .collect()
                };
                acc(*a, spread(tb));
                acc(*b, spread(ta));
            }
            Op::MulRows(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let cols = ta.shape()[1];
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * ts.data()[i / cols])
                    .collect();
                let gs = (0..ts.numel())
                    .map(|r| {
                        g[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(ta.row(r))
                            .map(|(x, y)| x * y)
                            .sum()
                    })
                    .collect();
                acc(*a, ga);
                acc(*s, gs);
            }
            Op::PairwiseSqDist(a) => {
                let t = val(*a);
                let (rows, cols) = (t.shape()[0], t.shape()[1]);
                let mut ga = vec![0.0; t.numel()];
                for i in 0..rows {
                    for j in 0..rows {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * rows + j] + g[j * rows + i]);
                        for c in 0..cols {
                            ga[i * cols + c] += w * (t.data()[i * cols + c] - t.data()[j * cols + c]);
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::OffDiagMean(a) => {
                let r = val(*a).shape()[0];
                let w = g[0] / (r * (r - 1)) as f64;
                let ga = (0..r * r).map(|i| if i / r == i % r { 0.0 } else { w }).collect();
                acc(*a, ga);
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).numel()]),
            Op::Tangential(a) => acc(*a, tangential_filter_raw(g, node.value.data(), node.value.shape()[1])),
        }
    }
}

pub(crate) fn check_unit_rows(t: &Tensor, op: &str) -> Result<()> {
    let (rows, _) = t
        .dims2("unit rows")
        .map_err(|_| Error::Precondition(format!("{op}: expected a matrix")))?;
    for r in 0..rows {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!(
                "{op}: row {r} has norm {n}, expected unit norm within {UNIT_TOL:e}"
            )));
        }
    }
    Ok(())
}

fn tangential_filter_raw(g: &[f64], z: &[f64], cols: usize) -> Vec<f64> {
    let mut out = g.to_vec();
    for (orow, zrow) in out.chunks_mut(cols).zip(z.chunks(cols)) {
        let dot: f64 = orow.iter().zip(zrow).map(|(a, b)| a * b).sum();
        orow.iter_mut().zip(zrow).for_each(|(o, zv)| *o -= dot * zv);
    }
    out
}

/// Rowwise `g - <g, z> z`: removes the radial component of `g` at each unit row of `z`.
pub fn tangential_filter(g: &Tensor, z: &Tensor) -> Result<Tensor> {
    if !g.same_shape(z) {
        return Err(Error::dim(
            "tangential_filter",
            format!("shapes {:?} and {:?} differ", g.shape(), z.shape()),
        ));
    }
    check_unit_rows(z, "tangential_filter")?;
    let cols = z.shape()[1];
    Tensor::new(g.shape().to_vec(), tangential_filter_raw(g.data(), z.data(), cols))
}
