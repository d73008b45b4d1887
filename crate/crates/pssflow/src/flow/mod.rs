//! The full cube warp: wrapper in, eight coupling layers, wrapper out.
//!
//! The forward warp turns uniform points into target-density points and its
//! log-determinant prices each sample; the inverse direction is what maximum
//! likelihood trains, since the density of a warped point is exactly the
//! Jacobian determinant of the inverse warp at that point.
//!
//! A freshly constructed model is an exact identity: the s/t heads start at
//! zero, and all warp entry points short-circuit to "clamp, density one"
//! while that holds, which keeps the uniform baseline and a never-trained
//! model bit-for-bit interchangeable.

mod checkpoint;

use crate::admath::{Array2, Gradients, NodeId, Tape};
use crate::coupling::{clamp_unit, CouplingLayer, CubeWrapper, Mask, DEFAULT_ALPHA};
use crate::nnet::{AdamState, BatchStats, Mode};
use crate::rng::{init_stream, shuffle_stream};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Coupling layers in the stack.
pub const N_LAYERS: usize = 8;

/// Architecture knobs shared by every coupling layer.
#[derive(Clone, Copy, Debug)]
pub struct NetConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub s_max: f64,
    pub alpha: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 40,
            blocks: 2,
            s_max: 4.0,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Training-loop configuration.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Optional warm-up phase of maximum likelihood on uniform samples
    /// before the real data; the zero-initialized heads already realize an
    /// identity warp, so this defaults to off.
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 512,
            lr: AdamState::DEFAULT_LR,
            val_fraction: 0.2,
            seed: 0,
            pretrain_epochs: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub wall_seconds: f64,
}

/// One record per completed epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Bit patterns of the loss values, for determinism checks that must
    /// ignore wall-clock fields.
    pub fn nll_bits(&self) -> Vec<(u64, u64)> {
        self.epochs
            .iter()
            .map(|e| (e.train_nll.to_bits(), e.val_nll.to_bits()))
            .collect()
    }
}

/// The learned warp of the unit hypercube onto itself.
#[derive(Clone, Debug)]
pub struct FlowModel {
    dim: usize,
    cfg: NetConfig,
    wrapper: CubeWrapper,
    layers: Vec<CouplingLayer>,
    mode: Mode,
}

impl FlowModel {
    pub fn new(dim: usize, cfg: NetConfig, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(
                "FlowModel::new",
                "coupling masks need at least two dimensions",
            ));
        }
        let wrapper = CubeWrapper::new(cfg.alpha)?;
        let mut rng = init_stream(seed);
        let layers = Mask::alternating(dim, N_LAYERS)?
            .into_iter()
            .map(|mask| CouplingLayer::new(mask, cfg.hidden, cfg.blocks, cfg.s_max, &mut rng))
            .collect();
        Ok(FlowModel {
            dim,
            cfg,
            wrapper,
            layers,
            mode: Mode::Train,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn net_config(&self) -> NetConfig {
        self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// True while every s/t head is exactly zero: the warp is the identity
    /// and densities are exactly one.
    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.net.is_identity())
    }

    /// Freeze normalization statistics and switch to inference mode.
    pub fn freeze(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.net.set_mode(Mode::Inference)?;
        }
        self.mode = Mode::Inference;
        Ok(())
    }

    fn set_train(&mut self) {
        for l in &mut self.layers {
            // switching into train mode is always allowed
            l.net.set_mode(Mode::Train).expect("train mode switch cannot fail");
        }
        self.mode = Mode::Train;
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.net.param_count()).sum()
    }

    /// All trainable parameters, canonical order: layers in stack order,
    /// s tower before t tower inside a layer.
    pub fn params(&self) -> Vec<&Array2> {
        self.layers.iter().flat_map(|l| l.net.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2> {
        self.layers.iter_mut().flat_map(|l| l.net.params_mut()).collect()
    }

    /// Running normalization statistics, same layer ordering as [`Self::params`].
    pub fn stats(&self) -> Vec<&Array2> {
        self.layers.iter().flat_map(|l| l.net.stats()).collect()
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Array2> {
        self.layers.iter_mut().flat_map(|l| l.net.stats_mut()).collect()
    }

    fn check_batch(&self, batch: &Array2, op: &'static str) -> Result<()> {
        if batch.rows() == 0 {
            return Err(Error::Empty { op });
        }
        if batch.cols() != self.dim {
            return Err(Error::shape(
                op,
                format!("expected {} columns, got {}", self.dim, batch.cols()),
            ));
        }
        Ok(())
    }

    fn check_cube(batch: &Array2, op: &'static str) -> Result<()> {
        if batch.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(op, "point outside the closed unit cube"));
        }
        Ok(())
    }

    /// Warp uniform points to the learned density. Returns the warped batch
    /// and the per-row log-determinant `log |d warp / d z|`.
    pub fn warp_forward(&self, z: &Array2) -> Result<(Array2, Vec<f64>)> {
        self.check_batch(z, "warp_forward")?;
        Self::check_cube(z, "warp_forward")?;
        if self.is_identity() {
            return Ok((clamp_unit(z), vec![0.0; z.rows()]));
        }
        let (mut u, mut logdet) = self.wrapper.wrap_in(z)?;
        for layer in &self.layers {
            let (next, ld) = layer.forward(&u)?;
            u = next;
            add_assign(&mut logdet, &ld);
        }
        let (y, ld) = self.wrapper.wrap_out(&u)?;
        add_assign(&mut logdet, &ld);
        Ok((y, logdet))
    }

    /// Inverse warp; the per-row log-determinant equals the log-density of
    /// `y` under the model.
    pub fn warp_inverse(&self, y: &Array2) -> Result<(Array2, Vec<f64>)> {
        self.check_batch(y, "warp_inverse")?;
        Self::check_cube(y, "warp_inverse")?;
        if self.is_identity() {
            return Ok((clamp_unit(y), vec![0.0; y.rows()]));
        }
        let (mut u, mut logdet) = self.wrapper.wrap_in(y)?;
        for layer in self.layers.iter().rev() {
            let (next, ld) = layer.inverse(&u)?;
            u = next;
            add_assign(&mut logdet, &ld);
        }
        let (z, ld) = self.wrapper.wrap_out(&u)?;
        add_assign(&mut logdet, &ld);
        Ok((z, logdet))
    }

    /// Per-row `log p(y)`; strictly greater than negative infinity on the
    /// open cube since `s` is bounded and the wrapper clamps.
    pub fn log_density(&self, y: &Array2) -> Result<Vec<f64>> {
        Ok(self.warp_inverse(y)?.1)
    }

    /// Negative mean log-density of a batch, the training objective.
    pub fn nll(&self, y: &Array2) -> Result<f64> {
        let ld = self.log_density(y)?;
        let nll = -ld.iter().sum::<f64>() / ld.len() as f64;
        if !nll.is_finite() {
            return Err(Error::NonFinite { op: "nll" });
        }
        Ok(nll)
    }

    /// Forward warp plus the implied per-sample density `exp(-logdet)`,
    /// which is available for free and avoids a round trip through the
    /// inverse.
    pub fn warp_with_density(&self, z: &Array2) -> Result<(Array2, Vec<f64>)> {
        let (y, ld) = self.warp_forward(z)?;
        let density = ld.iter().map(|&v| (-v).exp()).collect();
        Ok((y, density))
    }

    /// Draw `n` samples from the learned density with their densities.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Array2, Vec<f64>)> {
        if n == 0 {
            return Err(Error::Empty { op: "sample" });
        }
        if self.mode != Mode::Inference {
            return Err(Error::Mode("sample requires a frozen (inference-mode) model".into()));
        }
        let z = Array2::from_fn(n, self.dim, |_, _| rng.gen::<f64>());
        self.warp_with_density(&z)
    }

    /// Differentiable training objective: builds the inverse warp of `data`
    /// on the tape and returns the scalar loss node plus per-layer batch
    /// statistics (in stack order with their layer index).
    pub fn tape_nll_with_stats(
        &self,
        tape: &mut Tape,
        data: &Array2,
        pids: &[NodeId],
    ) -> Result<(NodeId, Vec<(usize, BatchStats, BatchStats)>)> {
        self.check_batch(data, "tape_nll")?;
        Self::check_cube(data, "tape_nll")?;
        if pids.len() != self.param_count() {
            return Err(Error::shape(
                "tape_nll",
                format!("{} parameter leaves for {} parameters", pids.len(), self.param_count()),
            ));
        }
        let offsets = self.layer_param_offsets();
        let yid = tape.input(clamp_unit(data))?;
        let (mut u, mut acc) = self.wrapper.tape_wrap_in(tape, yid)?;
        let mut stats = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let (start, len) = offsets[k];
            let (next, ld, s_stats, t_stats) =
                self.layers[k].tape_inverse(tape, u, &pids[start..start + len])?;
            u = next;
            acc = tape.add(acc, ld)?;
            stats.push((k, s_stats, t_stats));
        }
        let ld_out = self.wrapper.tape_wrap_out_logdet(tape, u)?;
        acc = tape.add(acc, ld_out)?;
        let mean = tape.mean_all(acc)?;
        let loss = tape.neg(mean)?;
        Ok((loss, stats))
    }

    /// [`Self::tape_nll_with_stats`] without the statistics, for gradient
    /// checking.
    pub fn tape_nll(&self, tape: &mut Tape, data: &Array2, pids: &[NodeId]) -> Result<NodeId> {
        Ok(self.tape_nll_with_stats(tape, data, pids)?.0)
    }

    fn layer_param_offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut start = 0;
        for l in &self.layers {
            let len = l.net.param_count();
            out.push((start, len));
            start += len;
        }
        out
    }

    fn train_step(&mut self, batch: &Array2, adam: &mut AdamState) -> Result<f64> {
        let mut tape = Tape::new();
        let pids: Vec<NodeId> = self
            .params()
            .into_iter()
            .enumerate()
            .map(|(slot, p)| tape.param(slot, p.clone()))
            .collect::<Result<_>>()?;
        let (loss_id, stats) = self.tape_nll_with_stats(&mut tape, batch, &pids)?;
        let loss = tape.value(loss_id).as_slice()[0];
        let grads: Gradients = tape.backward(loss_id)?;
        for (k, s_stats, t_stats) in &stats {
            self.layers[*k].net.update_running(s_stats, t_stats);
        }
        let mut params = self.params_mut();
        adam.step(&mut params, &grads)?;
        Ok(loss)
    }

    fn run_epoch(
        &mut self,
        data: &Array2,
        order: &[usize],
        batch_size: usize,
        adam: &mut AdamState,
    ) -> Result<f64> {
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two rows
            }
            let batch = gather_rows(data, chunk);
            let loss = self.train_step(&batch, adam)?;
            loss_sum += loss * chunk.len() as f64;
            rows += chunk.len();
        }
        if rows == 0 {
            return Err(Error::Empty { op: "train epoch" });
        }
        Ok(loss_sum / rows as f64)
    }

    /// Maximum-likelihood training. Shuffles and splits the data with the
    /// config seed, runs Adam on the negative log-likelihood, records one
    /// history row per epoch, and freezes the model for inference at the end.
    pub fn train(&mut self, data: &Array2, cfg: &TrainConfig) -> Result<TrainHistory> {
        self.check_batch(data, "train")?;
        Self::check_cube(data, "train")?;
        if cfg.epochs == 0 {
            return Err(Error::invalid("train", "epochs must be at least 1"));
        }
        if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
            return Err(Error::invalid("train", "validation fraction outside (0, 1)"));
        }
        if cfg.batch_size < 2 {
            return Err(Error::invalid("train", "batch size must be at least 2"));
        }

        let n = data.rows();
        let mut rng = shuffle_stream(cfg.seed);
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle(&mut idx, &mut rng);
        let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n.saturating_sub(2));
        let (val_idx, train_idx) = idx.split_at(n_val);
        if train_idx.len() < 2 {
            return Err(Error::invalid("train", "need at least 2 training rows after the split"));
        }
        let val_data = gather_rows(data, val_idx);
        let mut train_order: Vec<usize> = train_idx.to_vec();

        self.set_train();
        let params = self.params();
        let mut adam = AdamState::new(&params, cfg.lr);
        drop(params);

        if cfg.pretrain_epochs > 0 {
            let uniform =
                Array2::from_fn(train_order.len().max(cfg.batch_size), self.dim, |_, _| rng.gen());
            let order: Vec<usize> = (0..uniform.rows()).collect();
            for epoch in 0..cfg.pretrain_epochs {
                self.run_epoch(&uniform, &order, cfg.batch_size, &mut adam)
                    .map_err(|e| wrap_epoch_err(e, epoch))?;
            }
        }

        let mut history = TrainHistory::default();
        for epoch in 0..cfg.epochs {
            let t0 = Instant::now();
            shuffle(&mut train_order, &mut rng);
            let train_nll = self
                .run_epoch(data, &train_order, cfg.batch_size, &mut adam)
                .map_err(|e| wrap_epoch_err(e, epoch))?;
            let val_nll = self.nll(&val_data).map_err(|e| wrap_epoch_err(e, epoch))?;
            history.epochs.push(EpochRecord {
                epoch,
                train_nll,
                val_nll,
                wall_seconds: t0.elapsed().as_secs_f64(),
            });
        }
        self.freeze()?;
        Ok(history)
    }
}

fn wrap_epoch_err(e: Error, epoch: usize) -> Error {
    match e {
        e @ Error::Train { .. } => e,
        other => Error::Train {
            epoch,
            detail: other.to_string(),
        },
    }
}

fn add_assign(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

fn gather_rows(data: &Array2, idx: &[usize]) -> Array2 {
    let mut out = Array2::zeros(idx.len(), data.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(data.row(i));
    }
    out
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::pss_stream;

    fn uniform_batch(n: usize, dim: usize, seed: u64) -> Array2 {
        let mut rng = pss_stream(seed, 0);
        Array2::from_fn(n, dim, |_, _| rng.gen())
    }

    /// Mixture-ish 2-D data for quick training runs: two blobs.
    fn blob_data(n: usize, seed: u64) -> Array2 {
        let mut rng = pss_stream(seed, 1);
        Array2::from_fn(n, 2, |_, c| {
            let center = if rng.gen::<f64>() < 0.5 { 0.3 } else { 0.7 };
            let _ = c;
            (center + 0.08 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn identity_model_is_exactly_identity() {
        let model = FlowModel::new(3, NetConfig::default(), 0).unwrap();
        assert!(model.is_identity());
        let z = uniform_batch(32, 3, 5);
        let (y, ld) = model.warp_forward(&z).unwrap();
        for (a, b) in y.as_slice().iter().zip(z.as_slice()) {
            assert!((a - b).abs() <= 1e-6); // boundary clamp only
        }
        assert!(ld.iter().all(|&v| v == 0.0));
        assert!(model.log_density(&z).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(model.nll(&z).unwrap(), 0.0);
    }

    #[test]
    fn identity_sampling_has_unit_density() {
        let mut model = FlowModel::new(2, NetConfig::default(), 0).unwrap();
        assert!(matches!(model.sample(4, &mut pss_stream(0, 0)), Err(Error::Mode(_))));
        model.freeze().unwrap();
        let (y, dens) = model.sample(64, &mut pss_stream(0, 0)).unwrap();
        assert_eq!(y.rows(), 64);
        assert!(dens.iter().all(|&d| d == 1.0));
        assert!(model.sample(0, &mut pss_stream(0, 0)).is_err());
    }

    fn small_cfg() -> NetConfig {
        NetConfig {
            hidden: 10,
            blocks: 1,
            ..NetConfig::default()
        }
    }

    fn quick_train(dim: usize, n: usize, epochs: usize, seed: u64) -> (FlowModel, TrainHistory) {
        let mut model = FlowModel::new(dim, small_cfg(), seed).unwrap();
        let data = if dim == 2 {
            blob_data(n, seed)
        } else {
            uniform_batch(n, dim, seed)
        };
        let cfg = TrainConfig {
            epochs,
            batch_size: 128,
            seed,
            ..TrainConfig::default()
        };
        let hist = model.train(&data, &cfg).unwrap();
        (model, hist)
    }

    #[test]
    fn trained_roundtrip_and_logdet_consistency() {
        let (model, _) = quick_train(2, 4096, 3, 11);
        assert!(!model.is_identity());
        let z = uniform_batch(256, 2, 12);
        let (y, ld_f) = model.warp_forward(&z).unwrap();
        let (back, ld_i) = model.warp_inverse(&y).unwrap();
        for (a, b) in back.as_slice().iter().zip(z.as_slice()) {
            assert!((a - b).abs() < 1e-8, "roundtrip error {}", (a - b).abs());
        }
        // forward logdet at z negates inverse logdet at y = warp(z)
        for (f, i) in ld_f.iter().zip(&ld_i) {
            assert!((f + i).abs() < 1e-8);
        }
        // sampling density matches log_density at the sampled points
        let mut rng = pss_stream(13, 0);
        let (pts, dens) = model.sample(128, &mut rng).unwrap();
        let ld = model.log_density(&pts).unwrap();
        for (d, l) in dens.iter().zip(&ld) {
            assert!((d.ln() - l).abs() < 1e-8);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (m1, h1) = quick_train(2, 2048, 2, 21);
        let (m2, h2) = quick_train(2, 2048, 2, 21);
        assert_eq!(h1.nll_bits(), h2.nll_bits());
        for (a, b) in m1.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        let z = uniform_batch(64, 2, 22);
        let (y1, d1) = m1.warp_with_density(&z).unwrap();
        let (y2, d2) = m2.warp_with_density(&z).unwrap();
        assert_eq!(y1.as_slice(), y2.as_slice());
        assert_eq!(d1, d2);
    }

    #[test]
    fn loss_decreases_on_blob_data() {
        let (_, hist) = quick_train(2, 8192, 6, 31);
        let first = hist.epochs.first().unwrap().train_nll;
        let last = hist.epochs.last().unwrap().train_nll;
        assert!(
            last < first,
            "loss should decrease: first {} last {}",
            first,
            last
        );
        assert!(last < 0.0, "blob data should beat the uniform baseline");
    }

    #[test]
    fn trained_density_is_higher_at_modes_than_corners() {
        let (model, _) = quick_train(2, 8192, 6, 41);
        let modes = Array2::new(2, 2, vec![0.3, 0.3, 0.7, 0.7]).unwrap();
        let corners = Array2::new(2, 2, vec![0.02, 0.98, 0.98, 0.02]).unwrap();
        let lm = model.log_density(&modes).unwrap();
        let lc = model.log_density(&corners).unwrap();
        assert!(lm.iter().cloned().fold(f64::INFINITY, f64::min)
            > lc.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let mut model = FlowModel::new(2, small_cfg(), 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            model.train(&Array2::zeros(0, 2), &cfg),
            Err(Error::Empty { .. })
        ));
        let bad = Array2::new(4, 2, vec![0.1, 0.2, 1.4, 0.3, 0.5, 0.5, 0.2, 0.2]).unwrap();
        assert!(model.train(&bad, &cfg).is_err());
        let data = uniform_batch(64, 2, 1);
        let cfg0 = TrainConfig { epochs: 0, ..cfg };
        assert!(model.train(&data, &cfg0).is_err());
        let cfgv = TrainConfig { val_fraction: 1.5, ..cfg };
        assert!(model.train(&data, &cfgv).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = FlowModel::new(3, small_cfg(), 0).unwrap();
        let z5 = uniform_batch(4, 5, 2);
        assert!(matches!(model.warp_forward(&z5), Err(Error::Shape { .. })));
    }

    #[test]
    fn full_flow_gradient_matches_finite_differences() {
        use crate::admath::grad_check;
        // small architecture keeps the full sweep tractable
        let cfg = NetConfig { hidden: 6, blocks: 1, ..NetConfig::default() };
        let mut model = FlowModel::new(2, cfg, 51).unwrap();
        let mut rng = init_stream(52);
        for p in model.params_mut() {
            for v in p.as_mut_slice() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let data = uniform_batch(8, 2, 53);
        let params: Vec<Array2> = model.params().into_iter().cloned().collect();
        let err = grad_check(&params, 1e-6, &move |t: &mut Tape, ps: &[NodeId]| {
            model.tape_nll(t, &data, ps)
        })
        .unwrap();
        assert!(err < 1e-4, "flow nll fd error {}", err);
    }

    #[test]
    fn pretrain_phase_runs_and_stays_near_identity() {
        let mut model = FlowModel::new(2, small_cfg(), 61).unwrap();
        let data = uniform_batch(2048, 2, 62);
        let cfg = TrainConfig {
            epochs: 1,
            pretrain_epochs: 2,
            batch_size: 128,
            seed: 61,
            ..TrainConfig::default()
        };
        model.train(&data, &cfg).unwrap();
        // trained on uniform data only: density should stay near 1
        let probe = uniform_batch(512, 2, 63);
        let nll = model.nll(&probe).unwrap();
        assert!(nll.abs() < 0.2, "uniform-trained nll {}", nll);
    }
}
