use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svchange::pearson;

fn naive_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Two-sided Student-t tail by Simpson integration of the unnormalised
/// density under t = tan(θ).
fn t_tail_oracle(t: f64, df: f64) -> f64 {
    let f = |theta: f64| {
        let u = theta.tan();
        (1.0 + u * u / df).powf(-(df + 1.0) / 2.0) / theta.cos().powi(2)
    };
    let simpson = |a: f64, b: f64| {
        let m = 200_000;
        let h = (b - a) / m as f64;
        let mut s = f(a) + f(b);
        for i in 1..m {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let edge = std::f64::consts::FRAC_PI_2 - 1e-12;
    let tail = simpson(t.abs().atan(), edge);
    let total = 2.0 * simpson(0.0, edge);
    2.0 * tail / total
}

#[test]
fn pearson_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..40 {
        let n = rng.random_range(4..40);
        let slope: f64 = rng.random_range(-1.0..1.0);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v + rng.random_range(-5.0..5.0)).collect();
        let got = pearson(&x, &y).unwrap();
        let r = naive_r(&x, &y);
        assert!((got.r - r).abs() < 1e-9, "trial {trial}");
        assert!((got.r_squared - r * r).abs() < 1e-9);
        assert_eq!(got.n, n);
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let p = t_tail_oracle(t, df);
        assert!((got.p_value - p).abs() < 1e-9, "trial {trial}: {} vs {p}", got.p_value);
    }
}

#[test]
fn undefined_inputs_are_errors() {
    assert!(pearson(&[1.0, 2.0], &[3.0, 4.0]).is_err());
    assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
}
