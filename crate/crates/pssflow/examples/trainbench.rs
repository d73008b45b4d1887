use pssflow::admath::Array2;
use pssflow::flow::{FlowModel, NetConfig, TrainConfig};
use pssflow::rng::pss_stream;
use rand::Rng;
use std::time::Instant;

fn main() {
    // acceptance-scale step: D=2, hidden 40, blocks 2, batch 512
    let mut model = FlowModel::new(2, NetConfig::default(), 0).unwrap();
    let mut rng = pss_stream(1, 0);
    let n = 4096 * 4;
    let data = Array2::from_fn(n, 2, |_, _| rng.gen());
    let cfg = TrainConfig { epochs: 2, batch_size: 512, seed: 0, ..TrainConfig::default() };
    let t0 = Instant::now();
    let hist = model.train(&data, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let steps = 2.0 * ((n as f64 * 0.8) / 512.0).floor();
    println!("{} steps in {:.2}s -> {:.1} steps/s ({:.2} ms/step)", steps, dt, steps / dt, 1e3 * dt / steps);
    println!("~{:.1} GFlop/s effective (0.44 GFlop/step est)", 0.44 * steps / dt);
    for e in &hist.epochs { println!("epoch {} train {:.4} val {:.4} ({:.2}s)", e.epoch, e.train_nll, e.val_nll, e.wall_seconds); }
}
