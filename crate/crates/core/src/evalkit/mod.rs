//! Metrics, significance testing, back-testing and multi-seed experiments.

mod backtest;
mod experiment;

pub use backtest::{backtest, equal_weight, oracle_probabilities, top_k, BacktestPolicy, BacktestResult};
pub use experiment::{
    prepare, run_experiment, run_prepared, run_seed, ExperimentOutcome, MethodRun, Prepared, SeedOutcome, Variant,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{DishftError, Result};
use crate::marketdata::WindowSample;




/// Confusion counts with class 1 as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Zero when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den.sqrt()
        }
    }
}

fn check_lengths(pred: &[bool], truth: &[bool]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(DishftError::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<Confusion> {
    check_lengths(pred, truth)?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Which labels a window's decision is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counting {
    /// One decision per stock and window, against the horizon label.
    #[default]
    Horizon,
    /// The same decision scored against each day's label in the horizon.
    PerDay,
}

/// Confusion of `prob_up > 0.5` decisions over windows.
pub fn decision_confusion(windows: &[WindowSample], prob_up: &[Vec<f64>], counting: Counting) -> Result<Confusion> {
    if windows.len() != prob_up.len() {
        return Err(DishftError::Shape(format!(
            "{} prediction rows for {} windows",
            prob_up.len(),
            windows.len()
        )));
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (w, p) in windows.iter().zip(prob_up) {
        if p.len() != w.n_stocks {
            return Err(DishftError::Shape(format!("{} probabilities for {} stocks", p.len(), w.n_stocks)));
        }
        match counting {
            Counting::Horizon => {
                pred.extend(p.iter().map(|&q| q > 0.5));
                truth.extend_from_slice(&w.label);
            }
            Counting::PerDay => {
                let days = w
                    .label_per_day
                    .as_ref()
                    .ok_or_else(|| DishftError::InsufficientData("window lacks per-day labels".into()))?;
                for (s, &q) in p.iter().enumerate() {
                    pred.extend(std::iter::repeat_n(q > 0.5, w.horizon));
                    truth.extend_from_slice(&days[s * w.horizon..(s + 1) * w.horizon]);
                }
            }
        }
    }
    confusion(&pred, &truth)
}

pub fn accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.is_empty() {
        return Err(DishftError::InsufficientData("accuracy of zero decisions".into()));
    }
    Ok(confusion(pred, truth)?.accuracy())
}

pub fn mcc(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(confusion(pred, truth)?.mcc())
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's t statistic for `mean(a) > mean(b)` and its one-sided p-value.
pub fn ttest(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DishftError::InsufficientData(
            "t-test needs at least 2 values per group".into(),
        ));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma > mb {
            (f64::INFINITY, 0.0)
        } else if ma < mb {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| DishftError::Range(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        mean_var(xs).1.sqrt()
    }
}

/// Metrics of one method, optionally compared against a reference method.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub mcc: f64,
    pub confusion: Confusion,
    pub per_seed: Vec<(u64, f64, f64)>,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
}

impl EvalReport {
    /// Pooled confusion over seeds plus the per-seed rows.
    pub fn from_seeds(per_seed: Vec<(u64, Confusion)>) -> Self {
        let mut pooled = Confusion::default();
        for (_, c) in &per_seed {
            pooled.tp += c.tp;
            pooled.fp += c.fp;
            pooled.tn += c.tn;
            pooled.fn_ += c.fn_;
        }
        let rows: Vec<(u64, f64, f64)> = per_seed
            .iter()
            .map(|(s, c)| (*s, c.accuracy(), c.mcc()))
            .collect();
        let accs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mccs: Vec<f64> = rows.iter().map(|r| r.2).collect();
        Self {
            acc: mean(&accs),
            mcc: mean(&mccs),
            confusion: pooled,
            per_seed: rows,
            t_stat: None,
            p_value: None,
        }
    }

    pub fn accs(&self) -> Vec<f64> {
        self.per_seed.iter().map(|r| r.1).collect()
    }

    pub fn mccs(&self) -> Vec<f64> {
        self.per_seed.iter().map(|r| r.2).collect()
    }
}
