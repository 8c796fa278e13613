//! Pairwise bootstrap on synthetic per-sentence scores: identical systems,
//! a small noisy gap and a large consistent gap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smrt::eval::pairwise_bootstrap;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..60.0)).collect();
    let noisy: Vec<f64> = base.iter().map(|x| x + rng.gen_range(-10.0..12.0)).collect();
    let better: Vec<f64> = base.iter().map(|x| x + 10.0).collect();

    for (name, a, b) in [
        ("identical", &base, &base),
        ("small noisy gap", &noisy, &base),
        ("+10 everywhere", &better, &base),
    ] {
        let r = pairwise_bootstrap(a, b, 1000, 0.05, 1)?;
        println!(
            "{name:<16} verdict {:<4} A wins {:.3}  B wins {:.3}",
            r.verdict.as_str(),
            r.a_wins,
            r.b_wins
        );
    }
    Ok(())
}
