//! Paired significance testing and multi-seed summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discordant-pair counts of two classifiers on the same queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discordant {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
}

impl Discordant {
    pub fn count(a: &[bool], b: &[bool]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::dim(
                "mcnemar",
                format!("paired predictions differ in length: {} vs {}", a.len(), b.len()),
            ));
        }
        let mut out = Discordant { b: 0, c: 0 };
        for (&x, &y) in a.iter().zip(b) {
            match (x, y) {
                (true, false) => out.b += 1,
                (false, true) => out.c += 1,
                _ => {}
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub b: u64,
    pub c: u64,
    pub chi2: f64,
    pub p_value: f64,
    pub continuity_correction: bool,
}

/// McNemar's test, `χ² = (|b − c| − 1)² / (b + c)` with the continuity
/// correction or `(b − c)² / (b + c)` without, against χ² with one degree
/// of freedom.
pub fn mcnemar(counts: Discordant, continuity_correction: bool) -> Result<McNemar> {
    let Discordant { b, c } = counts;
    if b + c == 0 {
        return Err(Error::UndefinedTest("no discordant pairs (b + c = 0)".into()));
    }
    let diff = (b as f64 - c as f64).abs();
    let num = if continuity_correction { diff - 1.0 } else { diff };
    let chi2 = num * num / (b + c) as f64;
    Ok(McNemar {
        b,
        c,
        chi2,
        p_value: chi2_sf(chi2, 1.0),
        continuity_correction,
    })
}

/// Test on paired per-query correctness vectors.
pub fn mcnemar_paired(a: &[bool], b: &[bool], continuity_correction: bool) -> Result<McNemar> {
    mcnemar(Discordant::count(a, b)?, continuity_correction)
}

/// Survival function of the χ² distribution with `dof` degrees of freedom.
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof / 2.0, x / 2.0)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized upper incomplete gamma `Q(a, x)`: a power series for
/// `x < a + 1`, a Lentz continued fraction otherwise.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..GAMMA_MAX_ITER {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        (1.0 - sum * log_prefix.exp()).clamp(0.0, 1.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        (log_prefix.exp() * h).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedSummary> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no seed results to aggregate".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "aggregate_seeds".into(),
        });
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    // sums run over the sorted values so any input order gives identical bits
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SeedSummary { n, median, mean, std })
}
