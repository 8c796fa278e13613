//! Central-difference gradient check of the full SMRT objective on a tiny
//! 1-layer model.

use smrt::model::ModelConfig;
use smrt::objectives::ObjectiveConfig;
use smrt::runner::grad_check_objective;

fn main() -> anyhow::Result<()> {
    let config = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        max_len: 16,
        ..ModelConfig::desk(0)
    };
    let start = std::time::Instant::now();
    for (name, objective) in [
        ("nll", ObjectiveConfig::nll(0.1)),
        ("smrt", ObjectiveConfig::smrt(0.2, 50)),
    ] {
        let err = grad_check_objective(&config, &objective, 1e-5, usize::MAX, 7)?;
        println!("{name:<5} max relative error {err:.3e}");
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
