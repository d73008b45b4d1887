use super::array::{gemm, Array2};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `a + row` broadcast over rows; `row` is `1 x cols`.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Logit(NodeId),
    /// `ln(sigmoid(u)) + ln(1 - sigmoid(u))`, evaluated without overflow.
    LogSigmoidSym(NodeId),
    SelectCols(NodeId, Vec<usize>),
    ScatterCols(NodeId, Vec<usize>),
    SumCols(NodeId),
    MeanAll(NodeId),
    /// Train-mode batch normalization over rows, with saved normalized
    /// activations and inverse standard deviations for the backward pass.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2,
        inv_std: Array2,
    },
    /// Fused `relu(bn(a @ w))` (`relu` optional). The matmul result is never
    /// materialized as a node; only the normalized activations survive for
    /// the backward pass, which halves the memory traffic of the dominant
    /// network stage.
    FcBnRelu {
        a: NodeId,
        w: NodeId,
        gamma: NodeId,
        beta: NodeId,
        relu: bool,
        xhat: Array2,
        inv_std: Array2,
    },
    /// Fused `relu(a + b)` for residual joins.
    AddRelu(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Array2,
}

/// Per-parameter-slot gradients produced by [`Tape::backward`].
///
/// Slots that never appeared on the tape, or that the seeded output does not
/// depend on, hold `None`. Shared slots accumulate additively.
#[derive(Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Array2>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Array2> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn accumulate(&mut self, slot: usize, grad: &Array2) {
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, || None);
        }
        match &mut self.slots[slot] {
            Some(acc) => {
                for (a, g) in acc.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *a += g;
                }
            }
            none => *none = Some(grad.clone()),
        }
    }
}

/// Batch-norm forward result: the output node plus the batch statistics the
/// caller may fold into running estimates.
pub struct BnOutput {
    pub out: NodeId,
    pub batch_mean: Array2,
    pub batch_var: Array2,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Dynamic reverse-mode differentiation tape over [`Array2`] values.
///
/// Every operation evaluates eagerly, records its parents, and keeps the
/// forward value, so a single reverse sweep yields gradients for all
/// registered parameter slots. Any op that produces a non-finite value fails
/// immediately instead of letting NaNs propagate into training.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array2, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// For ops that cannot produce a non-finite value from finite inputs
    /// (bounded or selection/reduction ops); skips the finiteness scan.
    fn push_closed(&mut self, op: Op, value: Array2) -> Result<NodeId> {
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant leaf; gradients do not flow past it.
    pub fn input(&mut self, value: Array2) -> Result<NodeId> {
        self.push(Op::Input, value, "input")
    }

    /// Trainable leaf bound to a parameter slot.
    pub fn param(&mut self, slot: usize, value: Array2) -> Result<NodeId> {
        self.push(Op::Param(slot), value, "param")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gemm(self.value(a), false, self.value(b), false)?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    /// Broadcast-add a `1 x cols` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{}x{} + {}x{}", av.rows(), av.cols(), rv.rows(), rv.cols()),
            ));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), v, "add_row")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push_closed(Op::AddScalar(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        self.push_closed(Op::Neg(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push_closed(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_closed(Op::Relu(a), v)
    }

    /// `ln(x / (1 - x))`; inputs must lie strictly inside (0, 1).
    pub fn logit(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| (x / (1.0 - x)).ln());
        self.push(Op::Logit(a), v, "logit")
    }

    pub fn log_sigmoid_sym(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|u| {
            let t = u.abs();
            -t - 2.0 * (-t).exp().ln_1p()
        });
        self.push_closed(Op::LogSigmoidSym(a), v)
    }

    /// Gather the given columns, in order.
    pub fn select_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.cols()) {
            return Err(Error::shape(
                "select_cols",
                format!("column {} out of {}", bad, av.cols()),
            ));
        }
        let mut v = Array2::zeros(av.rows(), idx.len());
        for r in 0..av.rows() {
            let src = av.row(r);
            for (dst, &i) in v.row_mut(r).iter_mut().zip(idx) {
                *dst = src[i];
            }
        }
        self.push_closed(Op::SelectCols(a, idx.to_vec()), v)
    }

    /// Spread `a`'s columns into a zero matrix of `out_cols` columns at the
    /// given positions; the counterpart of [`Tape::select_cols`].
    pub fn scatter_cols(&mut self, a: NodeId, idx: &[usize], out_cols: usize) -> Result<NodeId> {
        let av = self.value(a);
        if idx.len() != av.cols() {
            return Err(Error::shape(
                "scatter_cols",
                format!("{} indices for {} columns", idx.len(), av.cols()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_cols) {
            return Err(Error::shape(
                "scatter_cols",
                format!("column {} out of {}", bad, out_cols),
            ));
        }
        let mut v = Array2::zeros(av.rows(), out_cols);
        for r in 0..av.rows() {
            let src = av.row(r);
            let dst = v.row_mut(r);
            for (&val, &i) in src.iter().zip(idx) {
                dst[i] = val;
            }
        }
        self.push_closed(Op::ScatterCols(a, idx.to_vec()), v)
    }

    /// Per-row sum; `n x m` to `n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).row_sum();
        self.push_closed(Op::SumCols(a), v)
    }

    /// Mean of all entries; result is `1 x 1`.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).is_empty() {
            return Err(Error::Empty { op: "mean_all" });
        }
        let v = Array2::new(1, 1, vec![self.value(a).mean_all()])?;
        self.push_closed(Op::MeanAll(a), v)
    }

    /// Train-mode batch normalization: normalize each column by the batch
    /// mean and biased variance, then apply the affine `gamma * xhat + beta`.
    /// Needs at least two rows for the variance to be meaningful.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<BnOutput> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if n < 2 {
            return Err(Error::Mode(format!(
                "batch normalization in train mode needs a batch of at least 2 rows, got {}",
                n
            )));
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.rows() != 1 || gv.cols() != m || bv.rows() != 1 || bv.cols() != m {
            return Err(Error::shape(
                "batch_norm",
                format!("scale/shift must be 1x{}", m),
            ));
        }
        let mean = xv.col_mean();
        let mut var = vec![0.0; m];
        for r in 0..n {
            let row = xv.row(r);
            for (acc, (&v, &mu)) in var.iter_mut().zip(row.iter().zip(mean.as_slice())) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std = Array2::new(1, m, var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect())?;
        let batch_var = Array2::new(1, m, var)?;

        let mut xhat = Array2::uninit(n, m);
        let mut out = Array2::uninit(n, m);
        {
            let mu = mean.as_slice();
            let is = inv_std.as_slice();
            let gs = gv.as_slice();
            let bs = bv.as_slice();
            let xs = xv.as_slice();
            let hs = xhat.as_mut_slice();
            let os = out.as_mut_slice();
            for r in 0..n {
                let base = r * m;
                let xr = &xs[base..base + m];
                let hr = &mut hs[base..base + m];
                let or = &mut os[base..base + m];
                for c in 0..m {
                    let h = (xr[c] - mu[c]) * is[c];
                    hr[c] = h;
                    or[c] = gs[c] * h + bs[c];
                }
            }
        }
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            "batch_norm",
        )?;
        Ok(BnOutput {
            out: id,
            batch_mean: mean,
            batch_var,
        })
    }

    /// Fused `relu(bn(a @ w))`; `relu = false` skips the activation (the
    /// second stage of a residual block joins before activating). Same batch
    /// semantics as [`Tape::batch_norm`] downstream of a bias-free matmul.
    pub fn fc_bn_relu(
        &mut self,
        a: NodeId,
        w: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        relu: bool,
    ) -> Result<BnOutput> {
        let pre = gemm(self.value(a), false, self.value(w), false)?;
        pre.check_finite("fc_bn_relu")?;
        let (n, m) = (pre.rows(), pre.cols());
        if n < 2 {
            return Err(Error::Mode(format!(
                "batch normalization in train mode needs a batch of at least 2 rows, got {}",
                n
            )));
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.rows() != 1 || gv.cols() != m || bv.rows() != 1 || bv.cols() != m {
            return Err(Error::shape("fc_bn_relu", format!("scale/shift must be 1x{}", m)));
        }
        let mean = pre.col_mean();
        let mut var = vec![0.0; m];
        for r in 0..n {
            for (acc, (&v, &mu)) in var.iter_mut().zip(pre.row(r).iter().zip(mean.as_slice())) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std = Array2::new(1, m, var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect())?;
        let batch_var = Array2::new(1, m, var)?;

        let mut xhat = Array2::uninit(n, m);
        let mut out = Array2::uninit(n, m);
        {
            let mu = mean.as_slice();
            let is = inv_std.as_slice();
            let gs = gv.as_slice();
            let bs = bv.as_slice();
            let ps = pre.as_slice();
            let hs = xhat.as_mut_slice();
            let os = out.as_mut_slice();
            for r in 0..n {
                let base = r * m;
                let pr = &ps[base..base + m];
                let hr = &mut hs[base..base + m];
                let or = &mut os[base..base + m];
                for c in 0..m {
                    let h = (pr[c] - mu[c]) * is[c];
                    hr[c] = h;
                    let y = gs[c] * h + bs[c];
                    or[c] = if relu { y.max(0.0) } else { y };
                }
            }
        }
        let id = self.push(
            Op::FcBnRelu {
                a,
                w,
                gamma,
                beta,
                relu,
                xhat,
                inv_std,
            },
            out,
            "fc_bn_relu",
        )?;
        Ok(BnOutput {
            out: id,
            batch_mean: mean,
            batch_var,
        })
    }

    /// Fused `relu(a + b)`.
    pub fn add_relu(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add_relu", |x, y| (x + y).max(0.0))?;
        self.push(Op::AddRelu(a, b), v, "add_relu")
    }

    /// Reverse sweep from a scalar (`1 x 1`) output with seed 1.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let v = self.value(output);
        if v.rows() != 1 || v.cols() != 1 {
            return Err(Error::shape(
                "backward",
                format!("scalar seed needs a 1x1 output, got {}x{}", v.rows(), v.cols()),
            ));
        }
        self.backward_seeded(output, Array2::filled(1, 1, 1.0))
    }

    /// Reverse sweep with an explicit output seed (the adjoint of `output`).
    pub fn backward_seeded(&self, output: NodeId, seed: Array2) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "no forward values recorded"));
        }
        if !seed.same_shape(self.value(output)) {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {}x{} vs output {}x{}",
                    seed.rows(),
                    seed.cols(),
                    self.value(output).rows(),
                    self.value(output).cols()
                ),
            ));
        }
        let mut adj: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);
        let mut grads = Gradients::default();

        for i in (0..=output.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(slot) => grads.accumulate(*slot, &g),
                Op::MatMul(a, b) => {
                    let da = gemm(&g, false, self.value(*b), true)?;
                    let db = gemm(self.value(*a), true, &g, false)?;
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, b.0, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a.0, g.clone());
                    acc(&mut adj, b.0, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, b.0, g.map(|x| -x));
                    acc(&mut adj, a.0, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Array2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc_v, &gv) in dr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *acc_v += gv;
                        }
                    }
                    acc(&mut adj, row.0, dr);
                    acc(&mut adj, a.0, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), "mul_bw", |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), "mul_bw", |x, y| x * y)?;
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, b.0, db);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut adj, a.0, g.map(|x| x * c));
                }
                Op::AddScalar(a) => acc(&mut adj, a.0, g),
                Op::Neg(a) => acc(&mut adj, a.0, g.map(|x| -x)),
                Op::Exp(a) => {
                    let da = g.zip_map(&self.nodes[i].value, "exp_bw", |x, y| x * y)?;
                    acc(&mut adj, a.0, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip_map(&self.nodes[i].value, "tanh_bw", |x, t| x * (1.0 - t * t))?;
                    acc(&mut adj, a.0, da);
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), "relu_bw", |x, v| if v > 0.0 { x } else { 0.0 })?;
                    acc(&mut adj, a.0, da);
                }
                Op::Logit(a) => {
                    let da = g.zip_map(self.value(*a), "logit_bw", |x, v| x / (v * (1.0 - v)))?;
                    acc(&mut adj, a.0, da);
                }
                Op::LogSigmoidSym(a) => {
                    let da = g.zip_map(self.value(*a), "lss_bw", |x, u| x * (1.0 - 2.0 * sigmoid(u)))?;
                    acc(&mut adj, a.0, da);
                }
                Op::SelectCols(a, idx) => {
                    let av = self.value(*a);
                    let mut da = Array2::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        let dst = da.row_mut(r);
                        for (&gv, &c) in src.iter().zip(idx) {
                            dst[c] += gv;
                        }
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::ScatterCols(a, idx) => {
                    let mut da = Array2::zeros(g.rows(), idx.len());
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        for (dv, &c) in da.row_mut(r).iter_mut().zip(idx) {
                            *dv = src[c];
                        }
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let mut da = Array2::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let gv = g[(r, 0)];
                        for dv in da.row_mut(r) {
                            *dv = gv;
                        }
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::MeanAll(a) => {
                    let av = self.value(*a);
                    let s = g[(0, 0)] / av.len() as f64;
                    acc(&mut adj, a.0, Array2::filled(av.rows(), av.cols(), s));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let rows = g.rows();
                    let n = rows as f64;
                    let m = g.cols();
                    let gs = self.value(*gamma).as_slice();
                    let hs = xhat.as_slice();
                    let gr_all = g.as_slice();
                    let is = inv_std.as_slice();
                    // single pass for dgamma/dbeta and the column sums the
                    // fused input-gradient rule needs
                    let mut dgamma = Array2::zeros(1, m);
                    let mut dbeta = Array2::zeros(1, m);
                    let mut sum_dh = vec![0.0; m];
                    let mut sum_dh_h = vec![0.0; m];
                    {
                        let dg = dgamma.as_mut_slice();
                        let db = dbeta.as_mut_slice();
                        for r in 0..rows {
                            let base = r * m;
                            let gr = &gr_all[base..base + m];
                            let hr = &hs[base..base + m];
                            for c in 0..m {
                                let gv = gr[c];
                                let hv = hr[c];
                                dg[c] += gv * hv;
                                db[c] += gv;
                                let dh = gv * gs[c];
                                sum_dh[c] += dh;
                                sum_dh_h[c] += dh * hv;
                            }
                        }
                    }
                    let inv_n = 1.0 / n;
                    for v in &mut sum_dh {
                        *v *= inv_n;
                    }
                    for v in &mut sum_dh_h {
                        *v *= inv_n;
                    }
                    let mut dx = Array2::uninit(rows, m);
                    {
                        let ds = dx.as_mut_slice();
                        for r in 0..rows {
                            let base = r * m;
                            let gr = &gr_all[base..base + m];
                            let hr = &hs[base..base + m];
                            let dr = &mut ds[base..base + m];
                            for c in 0..m {
                                let dh = gr[c] * gs[c];
                                dr[c] = is[c] * (dh - sum_dh[c] - hr[c] * sum_dh_h[c]);
                            }
                        }
                    }
                    acc(&mut adj, gamma.0, dgamma);
                    acc(&mut adj, beta.0, dbeta);
                    acc(&mut adj, x.0, dx);
                }
                Op::FcBnRelu {
                    a,
                    w,
                    gamma,
                    beta,
                    relu,
                    xhat,
                    inv_std,
                } => {
                    let rows = g.rows();
                    let n = rows as f64;
                    let m = g.cols();
                    let gs = self.value(*gamma).as_slice();
                    let hs = xhat.as_slice();
                    let is = inv_std.as_slice();
                    let out = self.nodes[i].value.as_slice();
                    let gr_all = g.as_slice();
                    let mut dgamma = Array2::zeros(1, m);
                    let mut dbeta = Array2::zeros(1, m);
                    let mut sum_dh = vec![0.0; m];
                    let mut sum_dh_h = vec![0.0; m];
                    // first pass: mask by the activation, fold the column sums
                    {
                        let dg = dgamma.as_mut_slice();
                        let db = dbeta.as_mut_slice();
                        for r in 0..rows {
                            let base = r * m;
                            let gr = &gr_all[base..base + m];
                            let hr = &hs[base..base + m];
                            let orow = &out[base..base + m];
                            for c in 0..m {
                                let gv = if *relu && orow[c] <= 0.0 { 0.0 } else { gr[c] };
                                let hv = hr[c];
                                dg[c] += gv * hv;
                                db[c] += gv;
                                let dh = gv * gs[c];
                                sum_dh[c] += dh;
                                sum_dh_h[c] += dh * hv;
                            }
                        }
                    }
                    let inv_n = 1.0 / n;
                    for v in &mut sum_dh {
                        *v *= inv_n;
                    }
                    for v in &mut sum_dh_h {
                        *v *= inv_n;
                    }
                    let mut dpre = Array2::uninit(rows, m);
                    {
                        let ds = dpre.as_mut_slice();
                        for r in 0..rows {
                            let base = r * m;
                            let gr = &gr_all[base..base + m];
                            let hr = &hs[base..base + m];
                            let orow = &out[base..base + m];
                            let dr = &mut ds[base..base + m];
                            for c in 0..m {
                                let gv = if *relu && orow[c] <= 0.0 { 0.0 } else { gr[c] };
                                let dh = gv * gs[c];
                                dr[c] = is[c] * (dh - sum_dh[c] - hr[c] * sum_dh_h[c]);
                            }
                        }
                    }
                    let da = gemm(&dpre, false, self.value(*w), true)?;
                    let dw = gemm(self.value(*a), true, &dpre, false)?;
                    acc(&mut adj, gamma.0, dgamma);
                    acc(&mut adj, beta.0, dbeta);
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, w.0, dw);
                }
                Op::AddRelu(a, b) => {
                    let da = g.zip_map(&self.nodes[i].value, "add_relu_bw", |x, v| {
                        if v > 0.0 {
                            x
                        } else {
                            0.0
                        }
                    })?;
                    acc(&mut adj, b.0, da.clone());
                    acc(&mut adj, a.0, da);
                }
            }
        }
        Ok(grads)
    }
}

fn acc(adj: &mut [Option<Array2>], idx: usize, grad: Array2) {
    match &mut adj[idx] {
        Some(a) => {
            for (x, g) in a.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *x += g;
            }
        }
        slot => *slot = Some(grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: usize, cols: usize, v: &[f64]) -> Array2 {
        Array2::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_tape_passes_through() {
        let mut t = Tape::new();
        let x = t.input(arr(1, 2, &[0.3, 0.7])).unwrap();
        assert_eq!(t.value(x).as_slice(), &[0.3, 0.7]);
    }

    #[test]
    fn linear_map_doubles() {
        let mut t = Tape::new();
        let x = t.input(arr(1, 1, &[1.5])).unwrap();
        let y = t.scale(x, 2.0).unwrap();
        assert_eq!(t.value(y).as_slice(), &[3.0]);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut t = Tape::new();
        let x = t.input(arr(1, 1, &[0.0])).unwrap();
        let y = t.exp(x).unwrap();
        assert_eq!(t.value(y).as_slice(), &[1.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, arr(1, 1, &[2.0])).unwrap();
        let _ = p;
        let c = t.input(arr(1, 1, &[5.0])).unwrap();
        let out = t.mean_all(c).unwrap();
        let g = t.backward(out).unwrap();
        assert!(g.get(0).is_none());
    }

    #[test]
    fn square_gradient_is_power_rule() {
        let mut t = Tape::new();
        let x = t.param(0, arr(1, 1, &[3.0])).unwrap();
        let y = t.mul(x, x).unwrap();
        let out = t.mean_all(y).unwrap();
        let g = t.backward(out).unwrap();
        assert!((g.get(0).unwrap().as_slice()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_accumulates() {
        // f = p*x1 + p*x2 -> df/dp = x1 + x2
        let mut t = Tape::new();
        let p = t.param(0, arr(1, 1, &[1.0])).unwrap();
        let x1 = t.input(arr(1, 1, &[2.0])).unwrap();
        let x2 = t.input(arr(1, 1, &[5.0])).unwrap();
        let a = t.mul(p, x1).unwrap();
        let b = t.mul(p, x2).unwrap();
        let s = t.add(a, b).unwrap();
        let out = t.mean_all(s).unwrap();
        let g = t.backward(out).unwrap();
        assert!((g.get(0).unwrap().as_slice()[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_forward_is_an_error() {
        let mut t = Tape::new();
        // logit(1.0) = ln(1/0) -> inf
        let x = t.input(arr(1, 1, &[1.0])).unwrap();
        assert!(matches!(t.logit(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_on_empty_tape_fails() {
        let t = Tape::new();
        assert!(t
            .backward_seeded(NodeId(0), Array2::filled(1, 1, 1.0))
            .is_err());
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let mut t = Tape::new();
        let p = t.param(0, arr(2, 2, &[0.3, -0.8, 1.2, 0.4])).unwrap();
        let e = t.tanh(p).unwrap();
        let y = t.mul(e, p).unwrap();
        let s1 = arr(2, 2, &[1.0, 0.5, -0.25, 2.0]);
        let s2 = arr(2, 2, &[-0.3, 1.5, 0.75, -1.0]);
        let sum = s1.zip_map(&s2, "t", |a, b| a + b).unwrap();
        let g1 = t.backward_seeded(y, s1).unwrap();
        let g2 = t.backward_seeded(y, s2).unwrap();
        let gs = t.backward_seeded(y, sum).unwrap();
        for (a, (b, c)) in gs
            .get(0)
            .unwrap()
            .as_slice()
            .iter()
            .zip(g1.get(0).unwrap().as_slice().iter().zip(g2.get(0).unwrap().as_slice()))
        {
            assert!((a - (b + c)).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn repeat_runs_are_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let p = t.param(0, arr(2, 3, &[0.1, -0.2, 0.3, 0.7, -1.1, 0.4])).unwrap();
            let x = t.input(arr(2, 3, &[0.5, 0.25, -0.7, 0.9, 0.1, -0.3])).unwrap();
            let m = t.mul(p, x).unwrap();
            let e = t.exp(m).unwrap();
            let s = t.sum_cols(e).unwrap();
            let out = t.mean_all(s).unwrap();
            let g = t.backward(out).unwrap();
            (
                t.value(out).as_slice().to_vec(),
                g.get(0).unwrap().as_slice().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn select_scatter_roundtrip() {
        let mut t = Tape::new();
        let x = t.input(arr(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let s = t.select_cols(x, &[2, 0]).unwrap();
        assert_eq!(t.value(s).as_slice(), &[3.0, 1.0, 6.0, 4.0]);
        let sc = t.scatter_cols(s, &[2, 0], 3).unwrap();
        assert_eq!(t.value(sc).as_slice(), &[1.0, 0.0, 3.0, 4.0, 0.0, 6.0]);
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let mut t = Tape::new();
        let x = t.input(arr(1, 2, &[1.0, 2.0])).unwrap();
        let g = t.input(arr(1, 2, &[1.0, 1.0])).unwrap();
        let b = t.input(arr(1, 2, &[0.0, 0.0])).unwrap();
        assert!(t.batch_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_normalizes_columns() {
        let mut t = Tape::new();
        let x = t.input(arr(4, 1, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let g = t.input(arr(1, 1, &[1.0])).unwrap();
        let b = t.input(arr(1, 1, &[0.0])).unwrap();
        let bn = t.batch_norm(x, g, b, 0.0).unwrap();
        assert!((bn.batch_mean.as_slice()[0] - 2.5).abs() < 1e-12);
        assert!((bn.batch_var.as_slice()[0] - 1.25).abs() < 1e-12);
        let out = t.value(bn.out);
        let mean: f64 = out.as_slice().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
