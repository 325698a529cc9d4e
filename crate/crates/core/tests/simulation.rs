use std::path::Path;

use nalgebra::{DMatrix, DVector};
use srivw::estimators::{estimate, srivw};
use srivw::simulate::summary::{default_correlation, StrengthPreset, SummarySampler, TrueModel};
use srivw::simulate::{monte_carlo, template, SimConfig};
use srivw::Method;

fn config(text: &str, seed: u64, reps: usize) -> SimConfig {
    SimConfig::from_toml_str(text, Path::new("."), Some(seed), Some(reps)).unwrap()
}

const WEAK: &str = r#"
mode = "summary"
estimators = ["mv_ivw", "srivw"]
[summary]
causal = "beta_a"
strength = "first_weak"
divisor = 9.25
"#;

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    let lam = (ne + 0.12 + 0.11 / ne) * d;
    if lam < 0.3 {
        // The series does not converge near 0; Q(0.3) = 1 to 6 digits.
        return (d, 1.0);
    }
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lam * lam).exp()
        })
        .sum();
    (d, p.clamp(0.0, 1.0))
}

#[test]
fn ks_helper_sanity() {
    let a: Vec<f64> = (0..500).map(|i| i as f64).collect();
    let shifted: Vec<f64> = a.iter().map(|x| x + 250.0).collect();
    assert!(ks_two_sample(&a, &a).1 > 0.99);
    assert!(ks_two_sample(&a, &shifted).1 < 1e-10);
}

#[test]
fn metrics_table_is_bit_reproducible() {
    let c = config(WEAK, 99, 40);
    let a = monte_carlo(&c, &c.estimators).unwrap();
    let b = monte_carlo(&c, &c.estimators).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let other = monte_carlo(&config(WEAK, 100, 40), &c.estimators).unwrap();
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&other).unwrap());
}

#[test]
fn noiseless_limit_recovers_beta0() {
    let mut t = template::builtin();
    t.se_x *= 1e-6;
    t.se_y *= 1e-6;
    let beta0 = DVector::from_row_slice(&[0.8, 0.4, 0.0]);
    let overlap = DMatrix::from_fn(4, 4, |a, b| match (a, b) {
        (3, 3) => 1.0,
        (a, b) if a < 3 && b < 3 => default_correlation()[(a, b)],
        _ => 0.1,
    });
    let truth = TrueModel::from_template(
        &t,
        beta0.clone(),
        StrengthPreset::FirstWeak,
        2.5,
        default_correlation(),
        0.0,
        Some(overlap),
    )
    .unwrap();
    let data = SummarySampler::new(truth).unwrap().draw(3, 0).unwrap();
    for m in [Method::MvIvw, Method::Srivw, Method::SrivwPleiotropy, Method::SrivwOverlap] {
        let e = estimate(&data, m, 0.0).unwrap();
        for k in 0..3 {
            assert!((e.beta[k] - beta0[k]).abs() < 1e-6, "{m}: {}", e.beta[k]);
        }
    }
}

#[test]
fn block_diagonal_overlap_matches_plain_generator() {
    let t = template::builtin();
    let beta0 = DVector::from_row_slice(&[0.8, 0.4, 0.0]);
    let mut block = DMatrix::identity(4, 4);
    block.view_mut((0, 0), (3, 3)).copy_from(&default_correlation());
    let make = |ov: Option<DMatrix<f64>>| {
        let truth = TrueModel::from_template(&t, beta0.clone(), StrengthPreset::FirstWeak, 9.25, default_correlation(), 0.0, ov)
            .unwrap();
        SummarySampler::new(truth).unwrap()
    };
    let (plain, over) = (make(None), make(Some(block)));
    let reps = 2000;
    let draws = |s: &SummarySampler, seed: u64| -> Vec<DVector<f64>> {
        (0..reps).map(|r| srivw(&s.draw(seed, r).unwrap(), 1.0).unwrap().beta).collect()
    };
    let (a, b) = (draws(&plain, 21), draws(&over, 22));
    for k in 0..3 {
        let xa: Vec<f64> = a.iter().map(|v| v[k]).collect();
        let xb: Vec<f64> = b.iter().map(|v| v[k]).collect();
        let (d, p) = ks_two_sample(&xa, &xb);
        assert!(p > 0.01, "exposure {}: D = {d}, p = {p}", k + 1);
    }
}

#[test]
fn weak_setting_mv_ivw_undercovers_null_effect() {
    let c = config(WEAK, 2024, 2000);
    let t = monte_carlo(&c, &c.estimators).unwrap();
    assert!(t.mean_lambda_min_over_sqrt_p < 9.0);
    let ivw3 = t.row(Method::MvIvw, 3).unwrap().coverage;
    assert!(ivw3 < 0.50, "MV-IVW coverage of beta_03 = {ivw3}");
    for k in 1..=3 {
        let cp = t.row(Method::Srivw, k).unwrap().coverage;
        assert!((0.93..=0.98).contains(&cp), "SRIVW coverage {k} = {cp}");
    }
}
