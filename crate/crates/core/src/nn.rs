//! Shared layer plumbing: named-parameter scopes, initialization and batching.

use ndgrad::{BoundParams, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{DishftError, Result};
use crate::marketdata::WindowSample;

/// Parameter lookup under a name prefix.
#[derive(Clone, Copy)]
pub struct Scope<'b, 'p, 't> {
    bound: &'b BoundParams<'p, 't>,
    prefix: &'b str,
}

impl<'b, 'p, 't> Scope<'b, 'p, 't> {
    pub fn new(bound: &'b BoundParams<'p, 't>, prefix: &'b str) -> Self {
        Self { bound, prefix }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        Ok(self.bound.get(&format!("{}{name}", self.prefix))?)
    }
}

/// `x · W + b` on rows of a rank-2 input.
pub fn linear<'t>(scope: &Scope<'_, '_, 't>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = scope.get(&format!("{name}.w"))?;
    let b = scope.get(&format!("{name}.b"))?;
    Ok(x.matmul(w)?.add(b)?)
}

/// `[fan_in × fan_out]` matrix from `uniform(±1/√fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    Ok(Tensor::uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)?)
}

/// Adds `{name}.w` and a zero `{name}.b`.
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParamSet,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    params.insert(format!("{name}.w"), init_weight(rng, fan_in, fan_out)?);
    params.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out])?);
    Ok(())
}

/// Windows stacked stock-major: row `b·N + n` is stock `n` of window `b`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n_windows: usize,
    pub n_stocks: usize,
    /// `[B·N × L × M]`.
    pub history: Tensor,
    /// `[B·N × T]` of 0/1.
    pub future: Tensor,
    /// Class index per row.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_windows(ws: &[&WindowSample]) -> Result<Self> {
        let first = ws
            .first()
            .ok_or_else(|| DishftError::InsufficientData("empty batch".into()))?;
        let (n, l, m, t) = (first.n_stocks, first.lookback, first.n_indicators, first.horizon);
        let mut history = Vec::with_capacity(ws.len() * n * l * m);
        let mut future = Vec::with_capacity(ws.len() * n * t);
        let mut labels = Vec::with_capacity(ws.len() * n);
        for w in ws {
            if (w.n_stocks, w.lookback, w.n_indicators, w.horizon) != (n, l, m, t) {
                return Err(DishftError::Shape("windows in a batch differ in shape".into()));
            }
            history.extend_from_slice(&w.history);
            future.extend(w.future_trend.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            labels.extend(w.label.iter().map(|&b| b as usize));
        }
        let rows = ws.len() * n;
        Ok(Self {
            n_windows: ws.len(),
            n_stocks: n,
            history: Tensor::new(vec![rows, l, m], history)?,
            future: Tensor::new(vec![rows, t], future)?,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.n_windows * self.n_stocks
    }
}

/// Mean negative log-likelihood of `labels` under row-wise `log_probs [R × C]`.
pub fn nll<'t>(log_probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let c = log_probs.shape()[1];
    let flat: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    Ok(log_probs.select(&flat, &[labels.len()])?.mean()?.neg()?)
}

/// Constant copy of `[N × N]` repeated `b` times.
pub fn repeat_matrix<'t>(tape: &'t Tape, n: usize, values: &[f64], b: usize) -> Result<Var<'t>> {
    let mut data = Vec::with_capacity(b * n * n);
    for _ in 0..b {
        data.extend_from_slice(values);
    }
    Ok(tape.constant(Tensor::new(vec![b, n, n], data)?)?)
}

/// Class-1 probability per window and stock, evaluated `chunk` windows at a time.
pub fn prob_up_by_window(
    windows: &[WindowSample],
    chunk: usize,
    probs: impl Fn(&Batch) -> Result<Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    let refs: Vec<&WindowSample> = windows.iter().collect();
    for part in refs.chunks(chunk.max(1)) {
        let batch = Batch::from_windows(part)?;
        let p = probs(&batch)?;
        for w in p.data().chunks(2 * batch.n_stocks) {
            out.push(w.chunks(2).map(|r| r[1]).collect());
        }
    }
    Ok(out)
}

/// Confusion of horizon labels against `prob_up > 0.5` decisions.
pub fn window_confusion(
    windows: &[WindowSample],
    prob_up: &[Vec<f64>],
) -> Result<crate::evalkit::Confusion> {
    let pred: Vec<bool> = prob_up.iter().flatten().map(|&p| p > 0.5).collect();
    let truth: Vec<bool> = windows.iter().flat_map(|w| w.label.iter().copied()).collect();
    crate::evalkit::confusion(&pred, &truth)
}
