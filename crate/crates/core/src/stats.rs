//! Run metrics and between-configuration statistics: one-way ANOVA and
//! Tukey HSD (Tukey-Kramer for unequal group sizes).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: String,
    pub seed: u64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

/// Confusion counts of binary predictions against binary truth.
pub fn accuracy_and_confusion(predicted: &[u8], truth: &[u8]) -> Result<Confusion> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "accuracy_and_confusion",
            &[predicted.len()],
            &[truth.len()],
        ));
    }
    let mut c = Confusion::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => {
                return Err(Error::Data(format!(
                    "non-binary prediction/label pair ({p}, {t})"
                )))
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunGroup {
    pub label: String,
    pub values: Vec<f64>,
}

impl RunGroup {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation (`n - 1` denominator).
    pub fn sd(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    /// `+inf` when all within-group variance is zero (see `infinite_f`).
    pub f: f64,
    pub infinite_f: bool,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
    pub ss_between: f64,
    pub ss_within: f64,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl AnovaResult {
    pub fn ms_within(&self) -> f64 {
        self.ss_within / self.df_within as f64
    }
}

fn check_groups(groups: &[RunGroup]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::Argument(format!(
            "ANOVA needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    for g in groups {
        if g.values.len() < 2 {
            return Err(Error::Argument(format!(
                "group {:?} has {} values; at least 2 required",
                g.label,
                g.values.len()
            )));
        }
        if g.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "group {:?} contains a non-finite value",
                g.label
            )));
        }
    }
    Ok(())
}

/// Survival function of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f.is_infinite() {
        return 0.0;
    }
    if f <= 0.0 {
        return 1.0;
    }
    statrs::function::beta::beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

pub fn one_way_anova(groups: &[RunGroup]) -> Result<AnovaResult> {
    check_groups(groups)?;
    let all: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.values.iter().copied())
        .collect();
    if all.iter().all(|&v| v == all[0]) {
        return Err(Error::Data(
            "every value is identical; ANOVA is undefined".into(),
        ));
    }
    let n = all.len();
    let k = groups.len();
    let grand = all.iter().sum::<f64>() / n as f64;
    let means: Vec<f64> = groups.iter().map(RunGroup::mean).collect();
    let ss_between: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.values.len() as f64 * (m - grand).powi(2))
        .sum();
    let ss_within: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.values.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let (df_between, df_within) = (k - 1, n - k);
    let infinite_f = ss_within == 0.0;
    let f = if infinite_f {
        f64::INFINITY
    } else {
        (ss_between / df_between as f64) / (ss_within / df_within as f64)
    };
    Ok(AnovaResult {
        f,
        infinite_f,
        df_between,
        df_within,
        p: f_survival(f, df_between as f64, df_within as f64),
        ss_between,
        ss_within,
        means,
        sds: groups.iter().map(RunGroup::sd).collect(),
    })
}

/// Degrees of freedom of the embedded studentized-range table; `None` is infinity.
const Q_DF: [Option<f64>; 12] = [
    Some(5.0),
    Some(6.0),
    Some(7.0),
    Some(8.0),
    Some(9.0),
    Some(10.0),
    Some(20.0),
    Some(30.0),
    Some(40.0),
    Some(60.0),
    Some(120.0),
    None,
];

/// Upper 5% points of the studentized range, columns k = 2..=6.
const Q_05: [[f64; 5]; 12] = [
    [3.635, 4.602, 5.218, 5.673, 6.033],
    [3.461, 4.339, 4.896, 5.305, 5.628],
    [3.344, 4.165, 4.681, 5.060, 5.359],
    [3.261, 4.041, 4.529, 4.886, 5.167],
    [3.199, 3.948, 4.415, 4.755, 5.024],
    [3.151, 3.877, 4.327, 4.654, 4.912],
    [2.950, 3.578, 3.958, 4.232, 4.445],
    [2.888, 3.486, 3.845, 4.102, 4.302],
    [2.858, 3.442, 3.791, 4.039, 4.232],
    [2.829, 3.399, 3.737, 3.977, 4.163],
    [2.800, 3.356, 3.685, 3.917, 4.096],
    [2.772, 3.314, 3.633, 3.858, 4.030],
];

/// Critical studentized range `q(alpha, k, df)` by linear interpolation in `1/df`.
pub fn studentized_range_critical(alpha: f64, k: usize, df: f64) -> Result<f64> {
    if alpha != 0.05 {
        return Err(Error::Argument(format!(
            "unsupported alpha {alpha}: only 0.05 is tabulated"
        )));
    }
    if !(2..=6).contains(&k) {
        return Err(Error::Argument(format!(
            "studentized range table covers 2 to 6 groups, got {k}"
        )));
    }
    if df.is_nan() || df < 5.0 {
        return Err(Error::Argument(format!(
            "studentized range table starts at 5 degrees of freedom, got {df}"
        )));
    }
    let inv = |d: Option<f64>| d.map_or(0.0, |d| 1.0 / d);
    let x = if df.is_infinite() { 0.0 } else { 1.0 / df };
    let col = k - 2;
    for i in 0..Q_DF.len() - 1 {
        let (hi, lo) = (inv(Q_DF[i]), inv(Q_DF[i + 1]));
        if x <= hi && x >= lo {
            let t = if hi == lo { 0.0 } else { (x - lo) / (hi - lo) };
            return Ok(Q_05[i + 1][col] + t * (Q_05[i][col] - Q_05[i + 1][col]));
        }
    }
    unreachable!("1/df lies in [0, 0.2]")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub first: usize,
    pub second: usize,
    pub first_label: String,
    pub second_label: String,
    /// `mean(first) - mean(second)`.
    pub mean_difference: f64,
    /// Smallest absolute difference that counts as significant for this pair.
    pub critical_difference: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TukeyResult {
    pub alpha: f64,
    pub q_critical: f64,
    pub pairs: Vec<TukeyPair>,
}

impl TukeyResult {
    /// Order-insensitive lookup of a pair's significance.
    pub fn significant(&self, a: usize, b: usize) -> Option<bool> {
        self.pairs
            .iter()
            .find(|p| (p.first, p.second) == (a.min(b), a.max(b)))
            .map(|p| p.significant)
    }

    pub fn significant_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.significant).count()
    }
}

/// All pairwise comparisons; a pair is significant iff
/// `|mean_i - mean_j| > q * sqrt(MSW / 2 * (1/n_i + 1/n_j))`.
pub fn tukey_hsd(groups: &[RunGroup], alpha: f64) -> Result<TukeyResult> {
    check_groups(groups)?;
    let n: usize = groups.iter().map(|g| g.values.len()).sum();
    let k = groups.len();
    let df_within = n - k;
    let q = studentized_range_critical(alpha, k, df_within as f64)?;
    let means: Vec<f64> = groups.iter().map(RunGroup::mean).collect();
    let ss_within: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.values.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let msw = ss_within / df_within as f64;
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let (ni, nj) = (groups[i].values.len() as f64, groups[j].values.len() as f64);
            let critical = q * (msw / 2.0 * (1.0 / ni + 1.0 / nj)).sqrt();
            let diff = means[i] - means[j];
            pairs.push(TukeyPair {
                first: i,
                second: j,
                first_label: groups[i].label.clone(),
                second_label: groups[j].label.clone(),
                mean_difference: diff,
                critical_difference: critical,
                significant: diff.abs() > critical,
            });
        }
    }
    Ok(TukeyResult {
        alpha,
        q_critical: q,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_hand_counts() {
        let c = accuracy_and_confusion(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 1, 1, 0));
        assert_eq!(c.accuracy(), 0.75);
        assert_eq!(
            accuracy_and_confusion(&[0, 1], &[1, 0]).unwrap().accuracy(),
            0.0
        );
        assert_eq!(
            accuracy_and_confusion(&[0, 1], &[0, 1]).unwrap().accuracy(),
            1.0
        );
        assert!(accuracy_and_confusion(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn equal_means_give_zero_f() {
        let g = [
            RunGroup::new("a", vec![1.0, 3.0]),
            RunGroup::new("b", vec![3.0, 1.0]),
            RunGroup::new("c", vec![2.0, 2.0]),
        ];
        let r = one_way_anova(&g).unwrap();
        assert_eq!(r.f, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!((r.df_between, r.df_within), (2, 3));
    }

    #[test]
    fn zero_within_variance_and_degenerate_input() {
        let g = [
            RunGroup::new("a", vec![1.0, 1.0]),
            RunGroup::new("b", vec![2.0, 2.0]),
        ];
        let r = one_way_anova(&g).unwrap();
        assert!(r.infinite_f && r.f.is_infinite() && r.p == 0.0);
        let same = [
            RunGroup::new("a", vec![1.0, 1.0]),
            RunGroup::new("b", vec![1.0, 1.0]),
        ];
        assert!(matches!(one_way_anova(&same), Err(Error::Data(_))));
        assert!(one_way_anova(&[RunGroup::new("a", vec![1.0, 2.0])]).is_err());
        assert!(one_way_anova(&[
            RunGroup::new("a", vec![1.0]),
            RunGroup::new("b", vec![1.0, 2.0])
        ])
        .is_err());
    }

    #[test]
    fn table_lookup_and_interpolation() {
        assert_eq!(studentized_range_critical(0.05, 2, 10.0).unwrap(), 3.151);
        assert_eq!(
            studentized_range_critical(0.05, 5, f64::INFINITY).unwrap(),
            3.858
        );
        // halfway in 1/df between 40 and 60 is df = 48
        let q = studentized_range_critical(0.05, 5, 48.0).unwrap();
        assert!((q - (4.039 + 3.977) / 2.0).abs() < 1e-12);
        assert!(studentized_range_critical(0.01, 5, 48.0).is_err());
        assert!(studentized_range_critical(0.05, 7, 48.0).is_err());
        assert!(studentized_range_critical(0.05, 3, 4.0).is_err());
    }

    #[test]
    fn far_apart_groups_are_significant() {
        let a: Vec<f64> = (0..10)
            .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 })
            .collect();
        let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        let t = tukey_hsd(&[RunGroup::new("a", a), RunGroup::new("b", b)], 0.05).unwrap();
        assert_eq!(t.significant(1, 0), Some(true));
        assert_eq!(t.pairs[0].mean_difference, -100.0);
    }
}
