//! Clusters correlated strategy returns into independent trials, then deflates
//! the best Sharpe ratio by the number of effective trials.
//!
//! cargo run --example clustered_dsr

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use lowfreq::validation::{dsr, onc, sharpe, OncConfig, ReturnsMatrix};

fn main() -> lowfreq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, groups, per) = (750, 4, 6);
    let factors: Vec<Vec<f64>> = (0..groups).map(|_| (0..t).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let data = Array2::from_shape_fn((t, groups * per), |(i, j)| {
        let e: f64 = StandardNormal.sample(&mut rng);
        0.01 * (0.85 * factors[j / per][i] + 0.5 * e) + 0.0002 * (j / per) as f64
    });
    let m = ReturnsMatrix::new((0..groups * per).map(|j| format!("s{j}")).collect(), data)?;

    let clusters = onc(&m, &OncConfig::default())?;
    println!("{} clusters, quality {:.3}", clusters.n_clusters, clusters.quality);
    for (k, sr) in clusters.cluster_sr.iter().enumerate() {
        println!("  cluster {k}: {:?} annualised SR {sr:.3}", clusters.members(k));
    }

    let (best, best_sr) = (0..m.n_cols())
        .map(|j| (j, sharpe(&m.column(j), 252).unwrap_or(f64::NEG_INFINITY)))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let stats = dsr(&clusters.trial_srs(), &m.column(best), 252)?;
    println!("best {} SR {best_sr:.3}; expected max under null {:.3}; DSR {:.4}", m.labels()[best], stats.sr_star, stats.psr_value);
    Ok(())
}
