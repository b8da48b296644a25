//! Accuracy bookkeeping across phases and the three summary metrics:
//! average incremental accuracy, final accuracy and average forgetting.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Exact accuracy as a count pair; converted to `f64` only on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Fraction {
    pub correct: u64,
    pub total: u64,
}

impl Fraction {
    pub fn new(correct: u64, total: u64) -> Self {
        Self { correct, total }
    }

    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl core::ops::Add for Fraction {
    type Output = Fraction;
    fn add(self, o: Fraction) -> Fraction {
        Fraction::new(self.correct + o.correct, self.total + o.total)
    }
}

/// `entries[t][p]`: accuracy on task `p`'s test classes after phase `t`,
/// defined for `p <= t`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AccuracyMatrix {
    pub phases: usize,
    pub entries: Vec<Vec<Fraction>>,
}

impl AccuracyMatrix {
    /// Empty matrix expecting `phases` rows (tasks `0..phases`).
    pub fn new(phases: usize) -> Self {
        Self {
            phases,
            entries: Vec::new(),
        }
    }

    /// Builds a complete matrix from real-valued rows using a common
    /// denominator, for hand-written examples and reports.
    pub fn from_values(rows: &[&[f64]], denominator: u64) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for r in rows {
            let row = r
                .iter()
                .map(|&v| Fraction::new(libm::round(v * denominator as f64) as u64, denominator))
                .collect();
            m.push_phase(row)?;
        }
        Ok(m)
    }

    /// Appends the row measured after the next phase.
    pub fn push_phase(&mut self, row: Vec<Fraction>) -> Result<()> {
        let t = self.entries.len();
        if t >= self.phases {
            return Err(Error::Protocol(format!("matrix already holds {} phases", self.phases)));
        }
        if row.len() != t + 1 {
            return Err(Error::Protocol(format!("phase {} needs {} task entries, got {}", t, t + 1, row.len())));
        }
        if row.iter().any(|f| f.correct > f.total) {
            return Err(Error::Argument("accuracy above 1".into()));
        }
        self.entries.push(row);
        Ok(())
    }

    pub fn completed(&self) -> usize {
        self.entries.len()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.phases && self.phases > 0
    }

    pub fn get(&self, t: usize, p: usize) -> Option<f64> {
        self.entries.get(t)?.get(p).map(|f| f.value())
    }

    /// Accuracy over every class seen by phase `t` (test-size weighted).
    pub fn phase_overall(&self, t: usize) -> Option<f64> {
        let row = self.entries.get(t)?;
        Some(row.iter().fold(Fraction::default(), |a, &b| a + b).value())
    }

    pub fn overall_curve(&self) -> Vec<f64> {
        (0..self.entries.len()).filter_map(|t| self.phase_overall(t)).collect()
    }

    /// Accuracy on task `p` across the phases where it is defined.
    pub fn task_curve(&self, p: usize) -> Vec<f64> {
        self.entries.iter().skip(p).map(|row| row[p].value()).collect()
    }

    fn require_complete(&self) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::Protocol(format!(
                "accuracy matrix has {} of {} phases",
                self.entries.len(),
                self.phases
            )));
        }
        Ok(())
    }
}

/// Exact non-negative rational; metrics are accumulated here and divided
/// once, so each result is the `f64` nearest the true value.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: i128,
    den: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    fn new(num: i128, den: i128) -> Self {
        let g = gcd(num, den).max(1);
        Self { num: num / g, den: den / g }
    }

    fn of(f: Fraction) -> Self {
        if f.total == 0 {
            Self::new(0, 1)
        } else {
            Self::new(f.correct as i128, f.total as i128)
        }
    }

    fn add(self, o: Self) -> Self {
        Self::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }

    fn sub(self, o: Self) -> Self {
        Self::new(self.num * o.den - o.num * self.den, self.den * o.den)
    }

    fn div(self, k: usize) -> Self {
        Self::new(self.num, self.den * k as i128)
    }

    fn gt(self, o: Self) -> bool {
        self.num * o.den > o.num * self.den
    }

    fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn overall(row: &[Fraction]) -> Fraction {
    row.iter().fold(Fraction::default(), |a, &b| a + b)
}

/// Mean of the overall accuracy after every phase, including the first.
pub fn average_incremental_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let sum = m.entries.iter().fold(Ratio::new(0, 1), |a, row| a.add(Ratio::of(overall(row))));
    Ok(sum.div(m.entries.len()).value())
}

/// Overall accuracy after the last phase.
pub fn final_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    Ok(m.phase_overall(m.phases - 1).expect("complete"))
}

/// Mean over tasks `0..T` (final task excluded) of peak minus final accuracy.
pub fn average_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    average_forgetting_with(m, false)
}

/// [`average_forgetting`], optionally averaging over the final task too
/// (its term is always zero).
pub fn average_forgetting_with(m: &AccuracyMatrix, include_final: bool) -> Result<f64> {
    m.require_complete()?;
    let last = m.phases - 1;
    if last == 0 {
        return Err(Error::Protocol("forgetting is undefined with a single phase".into()));
    }
    let tasks = if include_final { last + 1 } else { last };
    let mut total = Ratio::new(0, 1);
    for p in 0..tasks {
        let curve: Vec<Ratio> = m.entries[p..].iter().map(|row| Ratio::of(row[p])).collect();
        let peak = curve.iter().copied().fold(curve[0], |a, b| if b.gt(a) { b } else { a });
        total = total.add(peak.sub(curve[curve.len() - 1]));
    }
    Ok(total.div(tasks).value())
}

/// Scalar summary of a completed run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricSummary {
    pub average_incremental_accuracy: f64,
    pub final_accuracy: f64,
    /// `None` for single-phase runs.
    pub average_forgetting: Option<f64>,
}

impl MetricSummary {
    pub fn from_matrix(m: &AccuracyMatrix) -> Result<Self> {
        Ok(Self {
            average_incremental_accuracy: average_incremental_accuracy(m)?,
            final_accuracy: final_accuracy(m)?,
            average_forgetting: if m.phases > 1 { Some(average_forgetting(m)?) } else { None },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand() -> AccuracyMatrix {
        AccuracyMatrix::from_values(&[&[0.90], &[0.80, 0.85], &[0.70, 0.80, 0.60]], 100).unwrap()
    }

    #[test]
    fn forgetting_hand_example() {
        let f = average_forgetting(&hand()).unwrap();
        assert_eq!(f, 0.125);
    }

    #[test]
    fn average_and_final() {
        let m = AccuracyMatrix::from_values(&[&[0.9], &[0.8, 0.8], &[0.7, 0.7, 0.7]], 10).unwrap();
        assert_eq!(average_incremental_accuracy(&m).unwrap(), 0.8);
        assert_eq!(final_accuracy(&m).unwrap(), 0.7);
        let single = AccuracyMatrix::from_values(&[&[0.6]], 10).unwrap();
        assert_eq!(average_incremental_accuracy(&single).unwrap(), final_accuracy(&single).unwrap());
        assert!(matches!(average_forgetting(&single), Err(Error::Protocol(_))));
        let constant = AccuracyMatrix::from_values(&[&[0.5], &[0.5, 0.5]], 10).unwrap();
        assert_eq!(average_incremental_accuracy(&constant).unwrap(), 0.5);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let mut m = AccuracyMatrix::new(3);
        m.push_phase(vec![Fraction::new(1, 2)]).unwrap();
        assert!(matches!(final_accuracy(&m), Err(Error::Protocol(_))));
        assert!(m.push_phase(vec![Fraction::new(1, 2)]).is_err());
    }

    #[test]
    fn non_decreasing_curves_do_not_forget() {
        let m = AccuracyMatrix::from_values(&[&[0.5], &[0.6, 0.4], &[0.6, 0.9, 0.2]], 10).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 0.0);
        assert_eq!(average_forgetting_with(&m, true).unwrap(), 0.0);
    }

    fn arb_matrix() -> impl Strategy<Value = AccuracyMatrix> {
        (2usize..7).prop_flat_map(|phases| {
            let cells = phases * (phases + 1) / 2;
            (
                proptest::collection::vec((0u64..=50, 1u64..=50), cells),
                Just(phases),
            )
                .prop_map(|(cells, phases)| {
                    let mut m = AccuracyMatrix::new(phases);
                    let mut it = cells.into_iter();
                    for t in 0..phases {
                        let row = (0..=t)
                            .map(|_| {
                                let (c, n) = it.next().unwrap();
                                Fraction::new(c.min(n), n)
                            })
                            .collect();
                        m.push_phase(row).unwrap();
                    }
                    m
                })
        })
    }

    proptest! {
        #[test]
        fn forgetting_matches_naive_loops(m in arb_matrix()) {
            let last = m.phases - 1;
            let mut naive = 0.0;
            for p in 0..last {
                let mut peak = f64::NEG_INFINITY;
                for t in p..=last {
                    let v = m.entries[t][p].correct as f64 / m.entries[t][p].total as f64;
                    if v > peak { peak = v; }
                }
                naive += peak - m.entries[last][p].correct as f64 / m.entries[last][p].total as f64;
            }
            naive /= last as f64;
            let f = average_forgetting(&m).unwrap();
            prop_assert!((f - naive).abs() < 1e-12);
            prop_assert!(f >= 0.0);
        }

        #[test]
        fn overall_is_weighted_mean_of_tasks(m in arb_matrix()) {
            for t in 0..m.phases {
                let row = &m.entries[t];
                let n: u64 = row.iter().map(|f| f.total).sum();
                let weighted: f64 = row.iter().map(|f| f.value() * f.total as f64 / n as f64).sum();
                prop_assert!((m.phase_overall(t).unwrap() - weighted).abs() < 1e-12);
            }
        }
    }
}
