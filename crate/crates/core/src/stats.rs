//! Per-group summaries and two-sample t-tests over morphometric properties.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::StatsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Perimeter,
    Area,
    Radius,
    NonSmoothness,
    NonCircularity,
}

impl Property {
    pub const ALL: [Property; 5] = [
        Property::Perimeter,
        Property::Area,
        Property::Radius,
        Property::NonSmoothness,
        Property::NonCircularity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::Perimeter => "perimeter",
            Property::Area => "area",
            Property::Radius => "radius",
            Property::NonSmoothness => "non_smoothness",
            Property::NonCircularity => "non_circularity",
        }
    }

    pub fn parse(s: &str) -> Option<Property> {
        Property::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub group_label: String,
    pub property: Property,
    pub values: Vec<f64>,
}

impl GroupSample {
    pub fn new(group_label: impl Into<String>, property: Property, values: Vec<f64>) -> Self {
        GroupSample {
            group_label: group_label.into(),
            property,
            values,
        }
    }
}

/// Descriptive statistics of one sample. Every statistic is `None` for an
/// empty sample, and `sd` is `None` below two values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub group: String,
    pub property: Property,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl Summary {
    pub fn empty(group: impl Into<String>, property: Property) -> Self {
        Summary {
            group: group.into(),
            property,
            n: 0,
            mean: None,
            sd: None,
            median: None,
            q1: None,
            q3: None,
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance, two-pass.
fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// Quantile of sorted data by linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(sample: &GroupSample) -> Result<Summary, StatsError> {
    let v = &sample.values;
    if v.is_empty() {
        return Err(StatsError::EmptySample {
            group: sample.group_label.clone(),
            property: sample.property.name().into(),
        });
    }
    let mut sorted = v.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        group: sample.group_label.clone(),
        property: sample.property,
        n: v.len(),
        mean: Some(mean(v)),
        sd: (v.len() >= 2).then(|| variance(v).sqrt()),
        median: Some(quantile(&sorted, 0.5)),
        q1: Some(quantile(&sorted, 0.25)),
        q3: Some(quantile(&sorted, 0.75)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// Mean of `a` below mean of `b`.
    Less,
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub alpha: f64,
    /// Unequal-variance (Welch) test instead of the pooled Student test.
    pub welch: bool,
    pub alternative: Alternative,
    /// Compare `p × number of tests` against alpha.
    pub bonferroni: bool,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            alpha: 0.05,
            welch: false,
            alternative: Alternative::TwoSided,
            bonferroni: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTestResult {
    pub group_a: String,
    pub group_b: String,
    pub property: Property,
    pub t_statistic: f64,
    /// Integral for the pooled test; fractional under Welch.
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub significant: bool,
    /// Both samples were constant, so `t` is not defined by the formula.
    pub zero_variance: bool,
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
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
    let mut sum = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Continued fraction for the incomplete beta function, modified Lentz.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-12;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability `P(|T| ≥ |t|)` of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

fn one_sided(p_two: f64, t: f64, alternative: Alternative) -> f64 {
    let lower = if t < 0.0 {
        p_two / 2.0
    } else {
        1.0 - p_two / 2.0
    };
    match alternative {
        Alternative::TwoSided => p_two,
        Alternative::Less => lower,
        Alternative::Greater => 1.0 - lower,
    }
}

/// Two-sample t-test of `a` against `b`; significance uses `options.alpha`
/// without multiple-comparison adjustment.
pub fn student_t_test(
    a: &GroupSample,
    b: &GroupSample,
    options: &TestOptions,
) -> Result<TTestResult, StatsError> {
    if a.property != b.property {
        return Err(StatsError::PropertyMismatch {
            a: a.property.name().into(),
            b: b.property.name().into(),
        });
    }
    for s in [a, b] {
        if s.values.len() < 2 {
            return Err(StatsError::InsufficientSample {
                group: s.group_label.clone(),
                property: s.property.name().into(),
                n: s.values.len(),
            });
        }
    }
    let (na, nb) = (a.values.len() as f64, b.values.len() as f64);
    let (ma, mb) = (mean(&a.values), mean(&b.values));
    let (va, vb) = (variance(&a.values), variance(&b.values));

    let (se, df) = if options.welch {
        let (wa, wb) = (va / na, vb / nb);
        let df = (wa + wb).powi(2) / (wa * wa / (na - 1.0) + wb * wb / (nb - 1.0));
        ((wa + wb).sqrt(), df)
    } else {
        let df = na + nb - 2.0;
        let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
        ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), df)
    };

    let diff = ma - mb;
    let zero_variance = va == 0.0 && vb == 0.0;
    let (t, df, p) = if se == 0.0 {
        if diff == 0.0 {
            (0.0, na + nb - 2.0, 1.0)
        } else {
            let t = diff.signum() * f64::INFINITY;
            (t, na + nb - 2.0, one_sided(0.0, t, options.alternative))
        }
    } else {
        let t = diff / se;
        (
            t,
            df,
            one_sided(t_two_sided_p(t, df), t, options.alternative),
        )
    };

    Ok(TTestResult {
        group_a: a.group_label.clone(),
        group_b: b.group_label.clone(),
        property: a.property,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        significant: p < options.alpha,
        zero_variance,
    })
}

fn pairs_by_property(samples: &[GroupSample]) -> Vec<(&GroupSample, &GroupSample)> {
    let mut by_key: BTreeMap<(&str, Property), &GroupSample> = BTreeMap::new();
    for s in samples {
        by_key.insert((s.group_label.as_str(), s.property), s);
    }
    let mut groups: Vec<&str> = samples.iter().map(|s| s.group_label.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();

    let mut out = Vec::new();
    for (i, ga) in groups.iter().enumerate() {
        for gb in &groups[i + 1..] {
            for prop in Property::ALL {
                if let (Some(a), Some(b)) = (by_key.get(&(*ga, prop)), by_key.get(&(*gb, prop))) {
                    out.push((*a, *b));
                }
            }
        }
    }
    out
}

fn apply_bonferroni(results: &mut [TTestResult], options: &TestOptions) {
    if options.bonferroni {
        let m = results.len() as f64;
        for r in results {
            r.significant = (r.p_value * m).min(1.0) < options.alpha;
        }
    }
}

/// One test per unordered group pair per property, ordered by
/// `(group_a, group_b)` and then by property. Fewer than two groups yields
/// no tests.
pub fn compare_all_pairs(
    samples: &[GroupSample],
    options: &TestOptions,
) -> Result<Vec<TTestResult>, StatsError> {
    let mut results = pairs_by_property(samples)
        .into_iter()
        .map(|(a, b)| student_t_test(a, b, options))
        .collect::<Result<Vec<_>, _>>()?;
    apply_bonferroni(&mut results, options);
    Ok(results)
}

/// Like [`compare_all_pairs`], but skips pairs where either sample has
/// fewer than two values.
pub fn compare_available_pairs(samples: &[GroupSample], options: &TestOptions) -> Vec<TTestResult> {
    let mut results: Vec<_> = pairs_by_property(samples)
        .into_iter()
        .filter(|(a, b)| a.values.len() >= 2 && b.values.len() >= 2)
        .filter_map(|(a, b)| student_t_test(a, b, options).ok())
        .collect();
    apply_bonferroni(&mut results, options);
    results
}
