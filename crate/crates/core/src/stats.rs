//! Population statistics over bias measurements.

use crate::error::{Error, Result};

const BETA_TOL: f64 = 1e-12;
const BETA_MAX_ITER: usize = 300;
const MIN_BANDWIDTH: f64 = 0.01;

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::contract(format!(
            "standard deviation needs at least 2 values, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::contract("mean of an empty sample"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::contract(format!(
            "pearson needs two samples of equal length >= 3, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::numeric("pearson correlation undefined for a constant sample"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrTestResult {
    pub rho: f64,
    pub t: f64,
    pub df: usize,
    /// Tail in the direction of the sign of `rho`.
    pub p_one_tail: f64,
}

pub fn corr_t_test(rho: f64, n: usize) -> Result<CorrTestResult> {
    if n < 3 {
        return Err(Error::contract(format!("correlation test needs n >= 3, got {n}")));
    }
    if !rho.is_finite() || rho.abs() > 1.0 {
        return Err(Error::contract(format!("correlation {rho} outside [-1, 1]")));
    }
    if rho.abs() == 1.0 {
        return Err(Error::numeric("perfect correlation makes the t statistic infinite"));
    }
    let df = n - 2;
    let t = rho * (df as f64).sqrt() / (1.0 - rho * rho).sqrt();
    let lower = student_t_cdf(t, df as f64)?;
    let p_one_tail = if rho >= 0.0 { 1.0 - lower } else { lower };
    Ok(CorrTestResult { rho, t, df, p_one_tail })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub df: usize,
    pub p_two_tail: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract(format!(
            "paired t-test needs two samples of equal length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, s) = mean_std(&d)?;
    let df = d.len() - 1;
    if s == 0.0 {
        if m == 0.0 {
            return Ok(PairedTTest { t: 0.0, df, p_two_tail: 1.0 });
        }
        return Err(Error::numeric("paired differences are constant and nonzero; t is infinite"));
    }
    let t = m / (s / (d.len() as f64).sqrt());
    let p = 2.0 * student_t_cdf(-t.abs(), df as f64)?;
    Ok(PairedTTest { t, df, p_two_tail: p.min(1.0) })
}

/// `P(T ≤ t)` for Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> Result<f64> {
    if !(df >= 1.0) || !df.is_finite() {
        return Err(Error::contract(format!("degrees of freedom must be >= 1, got {df}")));
    }
    if t.is_nan() {
        return Err(Error::numeric("t statistic is NaN"));
    }
    if t == 0.0 {
        return Ok(0.5);
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x)?;
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}

/// `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::contract(format!("incomplete beta needs a, b > 0 and x in [0, 1], got ({a}, {b}, {x})")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the continued fraction converges fast only below the mean of the distribution
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(b, a, 1.0 - x)? / b)
    }
}

/// Modified Lentz evaluation.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < BETA_TOL {
            return Ok(h);
        }
    }
    Err(Error::numeric(format!(
        "incomplete beta continued fraction did not converge in {BETA_MAX_ITER} iterations (a={a}, b={b}, x={x})"
    )))
}

/// Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
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
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Grid point with the largest density (first one on ties).
    pub fn peak(&self) -> f64 {
        let mut best = 0;
        for (i, &d) in self.density.iter().enumerate() {
            if d > self.density[best] {
                best = i;
            }
        }
        self.grid[best]
    }
}

/// `1.06 · σ̂ · n^(−1/5)`, floored for near-degenerate samples.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("bandwidth of an empty sample"));
    }
    let sd = if values.len() < 2 { 0.0 } else { mean_std(values)?.1 };
    Ok((1.06 * sd * (values.len() as f64).powf(-0.2)).max(MIN_BANDWIDTH))
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn kde(values: &[f64], grid: &[f64], bandwidth: Option<f64>) -> Result<DensityEstimate> {
    if values.is_empty() {
        return Err(Error::contract("kernel density estimate of an empty sample"));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::contract("kde grid must be sorted ascending"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::contract(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(values)?,
    };
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| {
                    let z = (x - v) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(DensityEstimate { grid: grid.to_vec(), density, bandwidth: h })
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}
