//! Probability of backtest overfitting for a pure-noise strategy family and
//! for the same family with one genuinely skilled member.
//!
//! cargo run --example overfitting_pbo

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lowfreq::validation::{cscv, CscvMetric, ReturnsMatrix};

fn family(skill: f64) -> lowfreq::Result<ReturnsMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let data = Array2::from_shape_fn((1000, 40), |(_, j)| noise.sample(&mut rng) + if j == 0 { skill } else { 0.0 });
    ReturnsMatrix::new((0..40).map(|j| format!("cfg{j}")).collect(), data)
}

fn main() -> lowfreq::Result<()> {
    for (name, skill) in [("noise", 0.0), ("one skilled", 0.003)] {
        let r = cscv(&family(skill)?, 16, CscvMetric::Sharpe)?;
        let chosen: Vec<_> = r.best_is.iter().take(5).collect();
        println!("{name}: PBO {:.3} over {} combinations, first picks {chosen:?}", r.pbo, r.n_combinations());
    }
    Ok(())
}
