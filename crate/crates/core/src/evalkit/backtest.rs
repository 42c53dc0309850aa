use serde::{Deserialize, Serialize};

use crate::error::{DishftError, Result};
use crate::marketdata::StockPanel;

/// Long-only top-k rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestPolicy {
    pub top_k: usize,
    /// Trading days between rebalances.
    pub rebalance_every: usize,
    /// Proportional charge on traded value at each rebalance; 0 disables costs.
    pub transaction_cost: f64,
}

impl Default for BacktestPolicy {
    fn default() -> Self {
        Self {
            top_k: 10,
            rebalance_every: 20,
            transaction_cost: 0.0,
        }
    }
}

impl BacktestPolicy {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.top_k == 0 {
            out.push("top_k must be >= 1".into());
        }
        if self.rebalance_every == 0 {
            out.push("rebalance_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.transaction_cost) {
            out.push(format!("transaction_cost = {} must be in [0, 1)", self.transaction_cost));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    /// Portfolio value per test day, starting at 1.0 on the first anchor.
    pub equity_curve: Vec<f64>,
    /// `equity[k+1] / equity[k] − 1`.
    pub daily_returns: Vec<f64>,
    pub final_return: f64,
    /// Holdings chosen at each rebalance day, as `(day, stock indices)`.
    pub positions_log: Vec<(usize, Vec<usize>)>,
    /// Panel day of `equity_curve[0]`.
    pub first_day: usize,
}

/// Indices of the `k` largest probabilities; ties go to the lower index.
pub fn top_k(prob_up: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..prob_up.len()).collect();
    idx.sort_by(|&a, &b| prob_up[b].total_cmp(&prob_up[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Simulates the policy over the days spanned by `anchors`.
///
/// `prob_up[w]` holds the class-1 probabilities of the window anchored at
/// `anchors[w]`; anchors must be strictly increasing and include every
/// rebalance day `anchors[0] + j·rebalance_every`.
pub fn backtest(
    prob_up: &[Vec<f64>],
    anchors: &[usize],
    panel: &StockPanel,
    policy: &BacktestPolicy,
) -> Result<BacktestResult> {
    let p = policy.problems();
    if !p.is_empty() {
        return Err(DishftError::Config(p.join("; ")));
    }
    let n = panel.n_stocks();
    if policy.top_k > n {
        return Err(DishftError::Range(format!("top_k = {} exceeds {n} stocks", policy.top_k)));
    }
    if prob_up.len() != anchors.len() || anchors.is_empty() {
        return Err(DishftError::Shape(format!(
            "{} prediction rows for {} anchors",
            prob_up.len(),
            anchors.len()
        )));
    }
    if anchors.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DishftError::Range("anchors must be strictly increasing".into()));
    }
    if let Some(row) = prob_up.iter().find(|r| r.len() != n) {
        return Err(DishftError::Shape(format!("prediction row of {} for {n} stocks", row.len())));
    }
    let (first, last) = (anchors[0], anchors[anchors.len() - 1]);
    if last >= panel.n_days() {
        return Err(DishftError::Range(format!("anchor {last} beyond panel of {} days", panel.n_days())));
    }

    let mut equity = vec![1.0];
    let mut positions_log = Vec::new();
    let mut holdings: Vec<usize> = Vec::new();
    // Value held in each position, in units of current equity.
    let mut values: Vec<f64> = Vec::new();
    for day in first..=last {
        if day > first {
            for (v, &s) in values.iter_mut().zip(&holdings) {
                *v *= panel.close(s, day) / panel.close(s, day - 1);
            }
            equity.push(values.iter().sum());
        }
        if day < last && (day - first) % policy.rebalance_every == 0 {
            let w = anchors
                .binary_search(&day)
                .map_err(|_| DishftError::Range(format!("no prediction for rebalance day {day}")))?;
            let chosen = top_k(&prob_up[w], policy.top_k);
            let total = *equity.last().expect("non-empty");
            let target = total / chosen.len() as f64;
            let mut traded = 0.0;
            for &s in &chosen {
                let held = holdings.iter().position(|&h| h == s).map_or(0.0, |i| values[i]);
                traded += (target - held).abs();
            }
            for (&s, &v) in holdings.iter().zip(&values) {
                if !chosen.contains(&s) {
                    traded += v;
                }
            }
            let after = total - policy.transaction_cost * traded;
            if let Some(e) = equity.last_mut() {
                *e = after;
            }
            values = vec![after / chosen.len() as f64; chosen.len()];
            positions_log.push((day, chosen.clone()));
            holdings = chosen;
        }
    }
    let daily_returns = equity.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let final_return = equity[equity.len() - 1] - 1.0;
    Ok(BacktestResult {
        equity_curve: equity,
        daily_returns,
        final_return,
        positions_log,
        first_day: first,
    })
}

/// Equal-weight portfolio of every stock on the same rebalance schedule.
pub fn equal_weight(anchors: &[usize], panel: &StockPanel, policy: &BacktestPolicy) -> Result<BacktestResult> {
    let flat = vec![vec![0.5; panel.n_stocks()]; anchors.len()];
    let all = BacktestPolicy {
        top_k: panel.n_stocks(),
        ..policy.clone()
    };
    backtest(&flat, anchors, panel, &all)
}

/// Perfect-foresight probabilities: each window ranks stocks by their realized
/// return over the holding period that starts at its anchor.
pub fn oracle_probabilities(anchors: &[usize], panel: &StockPanel, policy: &BacktestPolicy) -> Vec<Vec<f64>> {
    let last = anchors.last().copied().unwrap_or(0);
    anchors
        .iter()
        .map(|&a| {
            let end = (a + policy.rebalance_every).min(last).max(a);
            (0..panel.n_stocks())
                .map(|s| {
                    let r = panel.close(s, end) / panel.close(s, a) - 1.0;
                    1.0 / (1.0 + (-r).exp())
                })
                .collect()
        })
        .collect()
}
