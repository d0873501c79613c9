//! Full-network gradient check: analytic reverse-mode gradients against a
//! central finite-difference oracle on a tiny network.

use drivelab_core::model::{loss_and_grads, NetConfig, NetSample, PolicyNet};
use drivelab_core::rng::SimRng;
use drivelab_core::HighLevelCommand;

fn random_batch(cfg: &NetConfig, seed: u64, n: usize) -> Vec<NetSample> {
    let mut rng = SimRng::new(seed);
    (0..n)
        .map(|i| NetSample {
            grid: (0..cfg.grid_len()).map(|_| rng.uniform()).collect(),
            speed_mps: rng.uniform_in(0.0, 11.0),
            command: HighLevelCommand::ALL[i % 4],
            target_action: [rng.uniform_in(-1.0, 1.0), rng.uniform(), rng.uniform()],
        })
        .collect()
}

/// Compare every class of parameter against central differences. Returns the
/// worst relative error over the sampled parameters.
pub fn run_gradient_check(n_samples: usize, seed: u64) -> (f64, usize) {
    let cfg = NetConfig::gradcheck_tiny();
    let net = PolicyNet::new(&cfg, seed);
    let batch = random_batch(&cfg, seed ^ 0xB00, 4);
    let lambda = 0.25;
    let dropout_seed = 77;

    let (_, grads) = loss_and_grads(&net, &batch, lambda, dropout_seed).unwrap();

    // Deterministic parameter candidates spread across every tensor; dead
    // units (zero both ways) are skipped, so draw generously.
    let vars = net.vars();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    let mut rng = SimRng::new(seed ^ 0xF00D);
    while picks.len() < n_samples * 6 {
        for v in &vars {
            picks.push((v.slot, rng.index(v.len())));
        }
    }

    let (l0, _) = loss_and_grads(&net, &batch, lambda, dropout_seed).unwrap();
    let l0 = l0.total();
    let h = 1e-4;
    let mut worst_rel = 0.0f64;
    let mut checked = 0usize;
    for (slot, idx) in picks {
        if checked >= n_samples {
            break;
        }
        let mut plus = net.clone();
        {
            let mut vs = plus.vars_mut();
            vs[slot].w[idx] += h;
        }
        let (lp, _) = loss_and_grads(&plus, &batch, lambda, dropout_seed).unwrap();
        let mut minus = net.clone();
        {
            let mut vs = minus.vars_mut();
            vs[slot].w[idx] -= h;
        }
        let (lm, _) = loss_and_grads(&minus, &batch, lambda, dropout_seed).unwrap();
        let lp = lp.total();
        let lm = lm.total();
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.by_slot[slot][idx];
        let denom = fd.abs().max(an.abs());
        if denom < 1e-8 {
            // Both zero: a dead ReLU path or a masked unit; consistent.
            continue;
        }
        // A ReLU or L1 kink inside [-h, +h] makes the central difference
        // meaningless at that point: the two one-sided slopes disagree. The
        // oracle only applies where the loss is locally linear.
        let fd_plus = (lp - l0) / h;
        let fd_minus = (l0 - lm) / h;
        let sided_gap = (fd_plus - fd_minus).abs();
        if sided_gap > 1e-3 * fd_plus.abs().max(fd_minus.abs()).max(1e-6) {
            continue;
        }
        let rel = (fd - an).abs() / denom;
        worst_rel = worst_rel.max(rel);
        checked += 1;
    }
    (worst_rel, checked)
}

#[test]
fn gradients_match_central_differences() {
    let start = std::time::Instant::now();
    let (worst, checked) = run_gradient_check(220, 4242);
    assert!(checked >= 200, "only {checked} informative parameters");
    assert!(
        worst < 1e-3,
        "max relative error {worst:.3e} over {checked} parameters"
    );
    assert!(start.elapsed().as_secs() < 60);
}
