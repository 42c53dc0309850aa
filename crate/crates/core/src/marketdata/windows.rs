use crate::error::{DishftError, Result};

use super::StockPanel;

/// One training example anchored at trading day `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub anchor: usize,
    pub n_stocks: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub n_indicators: usize,
    /// `[stock][step][indicator]`, z-scored per stock and indicator over the lookback.
    pub history: Vec<f64>,
    /// `[stock][k]`: close rose from day `anchor + k` to `anchor + k + 1`.
    pub future_trend: Vec<bool>,
    /// Horizon label at `anchor + horizon`.
    pub label: Vec<bool>,
    /// `[stock][k]`: label rule applied at `anchor + k + 1`.
    pub label_per_day: Option<Vec<bool>>,
}

fn check_horizon(panel: &StockPanel, t: usize, horizon: usize) -> Result<()> {
    if horizon == 0 || t + horizon >= panel.n_days() {
        return Err(DishftError::Range(format!(
            "anchor {t} with horizon {horizon} exceeds panel of {} days",
            panel.n_days()
        )));
    }
    Ok(())
}

#[inline]
fn rises_above(p_from: f64, p_to: f64, delta: f64) -> bool {
    (p_to - p_from) / p_from > delta
}

/// Horizon labels `[N]` and per-day labels `[N × T]` for anchor `t`.
///
/// A label is 1 iff the relative close change from `t` strictly exceeds `delta`.
pub fn make_labels(
    panel: &StockPanel,
    t: usize,
    horizon: usize,
    delta: f64,
) -> Result<(Vec<bool>, Vec<bool>)> {
    check_horizon(panel, t, horizon)?;
    if delta.is_nan() || delta < 0.0 {
        return Err(DishftError::Range(format!("delta {delta} must be >= 0")));
    }
    let n = panel.n_stocks();
    let mut label = Vec::with_capacity(n);
    let mut per_day = Vec::with_capacity(n * horizon);
    for s in 0..n {
        let p0 = panel.close(s, t);
        label.push(rises_above(p0, panel.close(s, t + horizon), delta));
        for k in 1..=horizon {
            per_day.push(rises_above(p0, panel.close(s, t + k), delta));
        }
    }
    Ok((label, per_day))
}

/// Day-over-day up/down bits over the horizon, `[N × T]`.
pub fn make_future_trend(panel: &StockPanel, t: usize, horizon: usize) -> Result<Vec<bool>> {
    check_horizon(panel, t, horizon)?;
    let n = panel.n_stocks();
    let mut out = Vec::with_capacity(n * horizon);
    for s in 0..n {
        for k in 0..horizon {
            out.push(panel.close(s, t + k + 1) > panel.close(s, t + k));
        }
    }
    Ok(out)
}

fn zscored_history(panel: &StockPanel, t: usize, lookback: usize) -> Vec<f64> {
    let (n, m) = (panel.n_stocks(), panel.n_indicators());
    let start = t + 1 - lookback;
    let mut out = vec![0.0; n * lookback * m];
    for s in 0..n {
        for k in 0..m {
            let mean = (start..=t).map(|d| panel.value(s, d, k)).sum::<f64>() / lookback as f64;
            let var = (start..=t)
                .map(|d| (panel.value(s, d, k) - mean).powi(2))
                .sum::<f64>()
                / lookback as f64;
            let sd = var.sqrt();
            for (step, d) in (start..=t).enumerate() {
                let centered = panel.value(s, d, k) - mean;
                out[(s * lookback + step) * m + k] = if sd > 1e-12 { centered / sd } else { 0.0 };
            }
        }
    }
    out
}

/// Sliding windows over the panel in chronological order.
///
/// Anchors run from `lookback − 1` to `days − horizon − 1` every `stride` days.
pub fn windows(
    panel: &StockPanel,
    lookback: usize,
    horizon: usize,
    delta: f64,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(DishftError::Range(
            "lookback, horizon and stride must be >= 1".into(),
        ));
    }
    let days = panel.n_days();
    if days < lookback + horizon {
        return Ok(Vec::new());
    }
    let last = days - horizon - 1;
    (lookback - 1..=last)
        .step_by(stride)
        .map(|t| {
            let (label, per_day) = make_labels(panel, t, horizon, delta)?;
            Ok(WindowSample {
                anchor: t,
                n_stocks: panel.n_stocks(),
                lookback,
                horizon,
                n_indicators: panel.n_indicators(),
                history: zscored_history(panel, t, lookback),
                future_trend: make_future_trend(panel, t, horizon)?,
                label,
                label_per_day: Some(per_day),
            })
        })
        .collect()
}

/// Chronological train / validation / test partition.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// 85 / 7.5 / 7.5 chronological split; every part must be non-empty.
pub fn split_chronological(mut all: Vec<WindowSample>) -> Result<Split> {
    let n = all.len();
    let n_train = (n as f64 * 0.85).floor() as usize;
    let n_val = (n as f64 * 0.075).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(DishftError::InsufficientData(format!(
            "{n} windows cannot fill a train/val/test split"
        )));
    }
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Split {
        train: all,
        val,
        test,
    })
}
