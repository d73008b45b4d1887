//! Scale/translation networks for the coupling layers and their optimizer.
//!
//! Each coupling layer owns a pair of towers with identical architecture:
//! a fully connected layer, residual blocks of two FC+BN stages, and another
//! FC+BN stage, all ReLU-activated, followed by a linear head. The scale
//! tower's head is squashed through `s_max * tanh` so the per-layer Jacobian
//! stays within `exp(±s_max)`. Heads start at zero, which makes the whole
//! flow an exact identity warp before any training step.

mod adam;

pub use adam::AdamState;

use crate::admath::{Array2, NodeId, Tape};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Batch-statistics momentum for the running estimates.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor inside the normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Bias-free linear layer. Layers that feed a normalization carry no bias:
/// the mean subtraction would cancel it exactly, leaving a dead parameter.
#[derive(Clone, Debug)]
struct Linear {
    w: Array2, // in x out
}

impl Linear {
    fn he_uniform(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        Linear {
            w: Array2::from_fn(in_dim, out_dim, |_, _| rng.gen_range(-limit..limit)),
        }
    }

    fn forward(&self, x: &Array2) -> Result<Array2> {
        crate::admath::gemm(x, false, &self.w, false)
    }
}

/// Linear head with bias.
#[derive(Clone, Debug)]
struct Dense {
    w: Array2, // in x out
    b: Array2, // 1 x out
}

impl Dense {
    fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: Array2::zeros(in_dim, out_dim),
            b: Array2::zeros(1, out_dim),
        }
    }

    fn forward(&self, x: &Array2) -> Result<Array2> {
        let mut y = crate::admath::gemm(x, false, &self.w, false)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(self.b.as_slice()) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: Array2,
    beta: Array2,
    run_mean: Array2,
    run_var: Array2,
    initialized: bool,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array2::filled(1, width, 1.0),
            beta: Array2::zeros(1, width),
            run_mean: Array2::zeros(1, width),
            run_var: Array2::filled(1, width, 1.0),
            initialized: false,
        }
    }

    fn update_running(&mut self, batch_mean: &Array2, batch_var: &Array2) {
        for (r, &b) in self
            .run_mean
            .as_mut_slice()
            .iter_mut()
            .zip(batch_mean.as_slice())
        {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, &b) in self
            .run_var
            .as_mut_slice()
            .iter_mut()
            .zip(batch_var.as_slice())
        {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        self.initialized = true;
    }

    /// Frozen-statistics affine transform.
    fn forward_inference(&self, x: &Array2) -> Result<Array2> {
        if !self.initialized {
            return Err(Error::Mode(
                "inference-mode normalization before any training batch".into(),
            ));
        }
        let m = x.cols();
        let mut scale = vec![0.0; m];
        let mut shift = vec![0.0; m];
        for c in 0..m {
            let a = self.gamma.as_slice()[c] / (self.run_var.as_slice()[c] + BN_EPS).sqrt();
            scale[c] = a;
            shift[c] = self.beta.as_slice()[c] - self.run_mean.as_slice()[c] * a;
        }
        let mut y = x.clone();
        for r in 0..y.rows() {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = *v * scale[c] + shift[c];
            }
        }
        Ok(y)
    }

    /// Batch-statistics path; updates the running estimates.
    fn forward_train(&mut self, x: &Array2) -> Result<Array2> {
        let (n, m) = (x.rows(), x.cols());
        if n < 2 {
            return Err(Error::Mode(format!(
                "train-mode normalization needs a batch of at least 2 rows, got {}",
                n
            )));
        }
        let mean = x.col_mean();
        let mut var = vec![0.0; m];
        for r in 0..n {
            for (acc, (&v, &mu)) in var.iter_mut().zip(x.row(r).iter().zip(mean.as_slice())) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let var = Array2::new(1, m, var)?;
        let mut y = Array2::zeros(n, m);
        for r in 0..n {
            for c in 0..m {
                let h = (x[(r, c)] - mean.as_slice()[c]) / (var.as_slice()[c] + BN_EPS).sqrt();
                y[(r, c)] = self.gamma.as_slice()[c] * h + self.beta.as_slice()[c];
            }
        }
        self.update_running(&mean, &var);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
}

/// One function tower: FC/BN/ReLU trunk with residual blocks and a linear head.
#[derive(Clone, Debug)]
pub struct FuncNet {
    in_dim: usize,
    out_dim: usize,
    hidden: usize,
    fc_in: Linear,
    bn_in: BatchNorm,
    blocks: Vec<ResBlock>,
    fc_post: Linear,
    bn_post: BatchNorm,
    fc_head: Dense,
}

/// Per-normalization batch statistics captured during a tape forward pass,
/// in the same order as [`FuncNet::update_running`] consumes them.
pub type BatchStats = Vec<(Array2, Array2)>;

impl FuncNet {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        hidden: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FuncNet {
            in_dim,
            out_dim,
            hidden,
            fc_in: Linear::he_uniform(in_dim, hidden, rng),
            bn_in: BatchNorm::new(hidden),
            blocks: (0..n_blocks)
                .map(|_| ResBlock {
                    fc1: Linear::he_uniform(hidden, hidden, rng),
                    bn1: BatchNorm::new(hidden),
                    fc2: Linear::he_uniform(hidden, hidden, rng),
                    bn2: BatchNorm::new(hidden),
                })
                .collect(),
            fc_post: Linear::he_uniform(hidden, hidden, rng),
            bn_post: BatchNorm::new(hidden),
            // zero head: the tower outputs exactly zero until trained
            fc_head: Dense::zeroed(hidden, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        8 + 6 * self.blocks.len()
    }

    pub fn head_is_zero(&self) -> bool {
        self.fc_head.w.as_slice().iter().all(|&v| v == 0.0)
            && self.fc_head.b.as_slice().iter().all(|&v| v == 0.0)
    }

    pub fn stats_initialized(&self) -> bool {
        self.bns().iter().all(|bn| bn.initialized)
    }

    fn bns(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.bn_in];
        for b in &self.blocks {
            v.push(&b.bn1);
            v.push(&b.bn2);
        }
        v.push(&self.bn_post);
        v
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.bn_in];
        for b in &mut self.blocks {
            v.push(&mut b.bn1);
            v.push(&mut b.bn2);
        }
        v.push(&mut self.bn_post);
        v
    }

    /// Parameters in canonical order. The tape path, the optimizer, and the
    /// checkpoint format all rely on this exact ordering.
    pub fn params(&self) -> Vec<&Array2> {
        let mut v = vec![&self.fc_in.w, &self.bn_in.gamma, &self.bn_in.beta];
        for b in &self.blocks {
            v.extend([
                &b.fc1.w, &b.bn1.gamma, &b.bn1.beta, &b.fc2.w, &b.bn2.gamma, &b.bn2.beta,
            ]);
        }
        v.extend([
            &self.fc_post.w,
            &self.bn_post.gamma,
            &self.bn_post.beta,
            &self.fc_head.w,
            &self.fc_head.b,
        ]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2> {
        let mut v = vec![
            &mut self.fc_in.w,
            &mut self.bn_in.gamma,
            &mut self.bn_in.beta,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.fc1.w,
                &mut b.bn1.gamma,
                &mut b.bn1.beta,
                &mut b.fc2.w,
                &mut b.bn2.gamma,
                &mut b.bn2.beta,
            ]);
        }
        v.extend([
            &mut self.fc_post.w,
            &mut self.bn_post.gamma,
            &mut self.bn_post.beta,
            &mut self.fc_head.w,
            &mut self.fc_head.b,
        ]);
        v
    }

    /// Running statistics in canonical order (mean, var per normalization).
    pub fn stats(&self) -> Vec<&Array2> {
        self.bns()
            .into_iter()
            .flat_map(|bn| [&bn.run_mean, &bn.run_var])
            .collect()
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Array2> {
        self.bns_mut()
            .into_iter()
            .flat_map(|bn| {
                let BatchNorm {
                    run_mean, run_var, ..
                } = bn;
                [run_mean, run_var]
            })
            .collect()
    }

    pub fn mark_stats_initialized(&mut self, initialized: bool) {
        for bn in self.bns_mut() {
            bn.initialized = initialized;
        }
    }

    /// Frozen-statistics forward pass; pure in (parameters, input).
    pub fn forward_inference(&self, x: &Array2) -> Result<Array2> {
        if x.cols() != self.in_dim {
            return Err(Error::shape(
                "FuncNet::forward_inference",
                format!("expected {} input columns, got {}", self.in_dim, x.cols()),
            ));
        }
        let mut h = self.bn_in.forward_inference(&self.fc_in.forward(x)?)?;
        relu_inplace(&mut h);
        for b in &self.blocks {
            let mut r = b.bn1.forward_inference(&b.fc1.forward(&h)?)?;
            relu_inplace(&mut r);
            let r = b.bn2.forward_inference(&b.fc2.forward(&r)?)?;
            h = h.zip_map(&r, "residual_add", |a, b| (a + b).max(0.0))?;
        }
        let mut h = self.bn_post.forward_inference(&self.fc_post.forward(&h)?)?;
        relu_inplace(&mut h);
        let out = self.fc_head.forward(&h)?;
        out.check_finite("FuncNet::forward_inference")?;
        Ok(out)
    }

    /// Batch-statistics forward pass; updates running statistics.
    pub fn forward_train(&mut self, x: &Array2) -> Result<Array2> {
        if x.cols() != self.in_dim {
            return Err(Error::shape(
                "FuncNet::forward_train",
                format!("expected {} input columns, got {}", self.in_dim, x.cols()),
            ));
        }
        let mut h = self.bn_in.forward_train(&self.fc_in.forward(x)?)?;
        relu_inplace(&mut h);
        for b in &mut self.blocks {
            let mut r = b.bn1.forward_train(&b.fc1.forward(&h)?)?;
            relu_inplace(&mut r);
            let r = b.bn2.forward_train(&b.fc2.forward(&r)?)?;
            h = h.zip_map(&r, "residual_add", |a, b| (a + b).max(0.0))?;
        }
        let mut h = self.bn_post.forward_train(&self.fc_post.forward(&h)?)?;
        relu_inplace(&mut h);
        let out = self.fc_head.forward(&h)?;
        out.check_finite("FuncNet::forward_train")?;
        Ok(out)
    }

    /// Differentiable train-mode forward on a tape. `pids` must hold this
    /// tower's parameter leaves in canonical order; batch statistics are
    /// returned rather than applied so gradient probes stay side-effect free.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        pids: &[NodeId],
    ) -> Result<(NodeId, BatchStats)> {
        debug_assert_eq!(pids.len(), self.param_count());
        let mut stats = Vec::with_capacity(2 + 2 * self.blocks.len());
        let mut k = 0;
        let mut next = || {
            let id = pids[k];
            k += 1;
            id
        };

        let (w, g, be) = (next(), next(), next());
        let bn = tape.fc_bn_relu(x, w, g, be, BN_EPS, true)?;
        stats.push((bn.batch_mean, bn.batch_var));
        let mut h = bn.out;
        for _ in 0..self.blocks.len() {
            let (w1, g1, be1) = (next(), next(), next());
            let (w2, g2, be2) = (next(), next(), next());
            let bn1 = tape.fc_bn_relu(h, w1, g1, be1, BN_EPS, true)?;
            stats.push((bn1.batch_mean, bn1.batch_var));
            let bn2 = tape.fc_bn_relu(bn1.out, w2, g2, be2, BN_EPS, false)?;
            stats.push((bn2.batch_mean, bn2.batch_var));
            h = tape.add_relu(h, bn2.out)?;
        }
        let (w, g, be) = (next(), next(), next());
        let bn = tape.fc_bn_relu(h, w, g, be, BN_EPS, true)?;
        stats.push((bn.batch_mean, bn.batch_var));
        let (w, b) = (next(), next());
        let lin = tape.matmul(bn.out, w)?;
        let out = tape.add_row(lin, b)?;
        Ok((out, stats))
    }

    /// Fold batch statistics from [`FuncNet::tape_forward`] into the running
    /// estimates, one entry per normalization in canonical order.
    pub fn update_running(&mut self, stats: &BatchStats) {
        for (bn, (mean, var)) in self.bns_mut().into_iter().zip(stats) {
            bn.update_running(mean, var);
        }
    }
}

fn relu_inplace(x: &mut Array2) {
    for v in x.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// The scale and translation functions of one coupling layer. Each tower has
/// its own weights; the scale output is bounded by `s_max * tanh`.
#[derive(Clone, Debug)]
pub struct StNetwork {
    pub s_net: FuncNet,
    pub t_net: FuncNet,
    mode: Mode,
    s_max: f64,
}

impl StNetwork {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        hidden: usize,
        n_blocks: usize,
        s_max: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        StNetwork {
            s_net: FuncNet::new(in_dim, out_dim, hidden, n_blocks, rng),
            t_net: FuncNet::new(in_dim, out_dim, hidden, n_blocks, rng),
            mode: Mode::Train,
            s_max,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn is_identity(&self) -> bool {
        self.s_net.head_is_zero() && self.t_net.head_is_zero()
    }

    /// Switch between batch statistics (train) and frozen statistics
    /// (inference). Freezing before any training batch is only allowed while
    /// the network is still the exact identity, whose outputs cannot depend
    /// on the statistics.
    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        if mode == Mode::Inference
            && !(self.s_net.stats_initialized() && self.t_net.stats_initialized())
            && !self.is_identity()
        {
            return Err(Error::Mode(
                "cannot switch to inference before running statistics are populated".into(),
            ));
        }
        self.mode = mode;
        Ok(())
    }

    /// Frozen-statistics evaluation: a pure function of (parameters, input).
    /// Available as soon as running statistics exist, whatever the mode flag,
    /// so validation losses can be probed mid-training.
    pub fn eval(&self, x: &Array2) -> Result<(Array2, Array2)> {
        let s_max = self.s_max;
        let s = self.s_net.forward_inference(x)?.map(|v| s_max * v.tanh());
        let t = self.t_net.forward_inference(x)?;
        Ok((s, t))
    }

    /// Train evaluation on batch statistics; updates running estimates.
    pub fn eval_train(&mut self, x: &Array2) -> Result<(Array2, Array2)> {
        let s_max = self.s_max;
        let s = self.s_net.forward_train(x)?.map(|v| s_max * v.tanh());
        let t = self.t_net.forward_train(x)?;
        Ok((s, t))
    }

    pub fn param_count(&self) -> usize {
        self.s_net.param_count() + self.t_net.param_count()
    }

    pub fn params(&self) -> Vec<&Array2> {
        let mut v = self.s_net.params();
        v.extend(self.t_net.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2> {
        let mut v = self.s_net.params_mut();
        v.extend(self.t_net.params_mut());
        v
    }

    pub fn stats(&self) -> Vec<&Array2> {
        let mut v = self.s_net.stats();
        v.extend(self.t_net.stats());
        v
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Array2> {
        let mut v = self.s_net.stats_mut();
        v.extend(self.t_net.stats_mut());
        v
    }

    /// Differentiable evaluation of both towers; `pids` holds the s-tower
    /// parameters followed by the t-tower parameters.
    pub fn tape_eval(
        &self,
        tape: &mut Tape,
        x: NodeId,
        pids: &[NodeId],
    ) -> Result<(NodeId, NodeId, BatchStats, BatchStats)> {
        let n_s = self.s_net.param_count();
        let (s_raw, s_stats) = self.s_net.tape_forward(tape, x, &pids[..n_s])?;
        let s_t = tape.tanh(s_raw)?;
        let s = tape.scale(s_t, self.s_max)?;
        let (t, t_stats) = self.t_net.tape_forward(tape, x, &pids[n_s..])?;
        Ok((s, t, s_stats, t_stats))
    }

    pub fn update_running(&mut self, s_stats: &BatchStats, t_stats: &BatchStats) {
        self.s_net.update_running(s_stats);
        self.t_net.update_running(t_stats);
    }
}
