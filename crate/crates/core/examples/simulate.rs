//! Simulate a nested factor model and check the sample moments of the
//! volatility driver and the returns against the model.
//!
//! ```text
//! cargo run --release --example simulate
//! ```

use nalgebra::DMatrix;
use nested_factor::linfactor::LinearFactorModel;
use nested_factor::simengine::{beta_shape_moments, Generator, GeneratorSpec, OmegaLaw};
use nested_factor::volcal::VolModel;

fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c = |k: i32| x.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    (mean, c(2), c(3) / c(2).powf(1.5), c(4) / c(2).powi(2) - 3.0)
}

fn main() -> nested_factor::Result<()> {
    let (m, n, t) = (2, 8, 200_000);
    // a market factor and a long/short factor
    let w = DMatrix::from_fn(m, n, |k, i| if k == 0 { 0.6 } else if i < n / 2 { 0.3 } else { -0.3 });
    let linear = LinearFactorModel::new(w)?;
    let vol = VolModel::uniform(m, n, 0.4, 0.3, 0.2, 0.2, -0.5, -0.8);
    let spec = GeneratorSpec::new(linear, vol, t, 2024)?;
    println!("generator file:\n{}", spec.to_toml());

    let generator = Generator::new(&spec)?;
    let (skew, kurt) = match generator.law() {
        OmegaLaw::Beta(p) => {
            println!("Omega_0 ~ affine Beta({:.3}, {:.3})", p.alpha, p.beta);
            beta_shape_moments(p.alpha, p.beta)
        }
        OmegaLaw::Gaussian { .. } => (0.0, 0.0),
    };
    let (mean, var, s, k) = moments(&generator.omega0_sample(t));
    println!("Omega_0   mean {mean:+.4}  var {var:.4}  skew {s:+.4} (target {skew:+.4})  ex.kurt {k:+.4} (target {kurt:+.4})");

    let panel = generator.simulate()?;
    let r = panel.returns();
    for i in [0, n - 1] {
        let col: Vec<f64> = r.column(i).iter().copied().collect();
        let (_, var, _, k) = moments(&col);
        println!("asset {i}: variance {var:.4} (model 1), excess kurtosis {k:.3}");
    }
    let model = spec.linear.model_correlation();
    let sample = nested_factor::linfactor::sample_correlation(r);
    println!(
        "correlation (0, 1): sample {:.4}, model {:.4}; (0, {}): sample {:.4}, model {:.4}",
        sample[(0, 1)],
        model[(0, 1)],
        n - 1,
        sample[(0, n - 1)],
        model[(0, n - 1)]
    );
    Ok(())
}
