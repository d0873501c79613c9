use drivelab_core::model::{loss_and_grads, predict, NetConfig, NetSample, PolicyNet};
use drivelab_core::rng::SimRng;
use drivelab_core::HighLevelCommand;
use std::time::Instant;

fn main() {
    let cfg = NetConfig::desk();
    let net = PolicyNet::new(&cfg, 1);
    println!("desk net params: {}", net.n_params());
    let mut rng = SimRng::new(2);
    let batch: Vec<NetSample> = (0..120)
        .map(|i| NetSample {
            grid: (0..cfg.grid_len()).map(|_| rng.uniform()).collect(),
            speed_mps: rng.uniform_in(0.0, 10.0),
            command: HighLevelCommand::ALL[i % 4],
            target_action: [0.1, 0.5, 0.0],
        })
        .collect();
    // Warm up then time.
    let _ = loss_and_grads(&net, &batch, 0.25, 1).unwrap();
    let t0 = Instant::now();
    let iters = 8;
    for i in 0..iters {
        let _ = loss_and_grads(&net, &batch, 0.25, i).unwrap();
    }
    let per_iter = t0.elapsed().as_secs_f64() / iters as f64;
    println!("train iter (batch 120): {:.3} s -> 600 iters = {:.1} min", per_iter, 600.0 * per_iter / 60.0);

    let t1 = Instant::now();
    let n_inf = 200;
    for _ in 0..n_inf {
        let _ = predict(&net, &batch[0].grid, 3.0, HighLevelCommand::LaneFollow).unwrap();
    }
    println!("inference: {:.2} ms/tick", t1.elapsed().as_secs_f64() * 1000.0 / n_inf as f64);
}
