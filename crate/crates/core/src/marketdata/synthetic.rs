use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DishftError, Result};

use super::{StockPanel, OHLCV};

/// From `day` onward, every stock of `sector` drifts by an extra `drift_shift` per day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeEvent {
    pub day: usize,
    pub sector: usize,
    pub drift_shift: f64,
}

fn default_sector_corr() -> f64 {
    0.5
}

fn default_start_price() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_days: usize,
    pub n_sectors: usize,
    #[serde(default)]
    pub regime_schedule: Vec<RegimeEvent>,
    pub base_vol: f64,
    #[serde(default)]
    pub base_drift: f64,
    pub seed: u64,
    /// Share of daily shock variance common to a sector, in `[0, 1]`.
    #[serde(default = "default_sector_corr")]
    pub sector_corr: f64,
    #[serde(default = "default_start_price")]
    pub start_price: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DishftError::InvalidSpec(m));
        if self.n_stocks < 2 {
            return bad(format!("n_stocks = {} must be >= 2", self.n_stocks));
        }
        if self.n_days < 2 {
            return bad(format!("n_days = {} must be >= 2", self.n_days));
        }
        if self.n_sectors == 0 || self.n_sectors > self.n_stocks {
            return bad(format!(
                "n_sectors = {} must lie in [1, n_stocks = {}]",
                self.n_sectors, self.n_stocks
            ));
        }
        if !(self.base_vol > 0.0 && self.base_vol.is_finite()) {
            return bad(format!("base_vol = {} must be > 0", self.base_vol));
        }
        if !self.base_drift.is_finite() {
            return bad("base_drift must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.sector_corr) {
            return bad(format!("sector_corr = {} must lie in [0, 1]", self.sector_corr));
        }
        if !(self.start_price > 0.0 && self.start_price.is_finite()) {
            return bad(format!("start_price = {} must be > 0", self.start_price));
        }
        for (i, ev) in self.regime_schedule.iter().enumerate() {
            if ev.day >= self.n_days {
                return bad(format!("event {i}: day {} outside [0, {})", ev.day, self.n_days));
            }
            if ev.sector >= self.n_sectors {
                return bad(format!("event {i}: sector {} outside [0, {})", ev.sector, self.n_sectors));
            }
            if !ev.drift_shift.is_finite() {
                return bad(format!("event {i}: drift_shift must be finite"));
            }
        }
        Ok(())
    }

    /// Sector of stock `s`; stocks are dealt round-robin.
    pub fn sector_of(&self, s: usize) -> usize {
        s % self.n_sectors
    }

    /// Sector drift on each day, `[sector][day]`.
    pub fn drift_path(&self) -> Vec<Vec<f64>> {
        let mut shift = vec![vec![0.0; self.n_days]; self.n_sectors];
        for ev in &self.regime_schedule {
            shift[ev.sector][ev.day] += ev.drift_shift;
        }
        shift
            .into_iter()
            .map(|row| {
                let mut acc = self.base_drift;
                row.into_iter()
                    .map(|s| {
                        acc += s;
                        acc
                    })
                    .collect()
            })
            .collect()
    }
}

/// Monday–Friday calendar starting at 2019-01-01.
fn business_days(n: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut d = NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date");
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d.format("%Y-%m-%d").to_string());
        }
        d = d + Days::new(1);
    }
    out
}

/// Geometric random walk with sector-correlated shocks and scheduled drift shifts.
///
/// Log-return of stock `s` on day `d ≥ 1` is
/// `μ_sector(d) − σ²/2 + σ(√ρ·z_sector,d + √(1−ρ)·ε_s,d)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<StockPanel> {
    spec.validate()?;
    let (n, days, m) = (spec.n_stocks, spec.n_days, OHLCV.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let drift = spec.drift_path();
    let sigma = spec.base_vol;
    let (w_sec, w_idio) = (spec.sector_corr.sqrt(), (1.0 - spec.sector_corr).sqrt());

    let mut values = vec![0.0; n * days * m];
    let mut prev_close = vec![spec.start_price; n];
    for d in 0..days {
        let z_sector: Vec<f64> = (0..spec.n_sectors).map(|_| normal()).collect();
        for s in 0..n {
            let sec = spec.sector_of(s);
            let eps = normal();
            let (gap, wick_hi, wick_lo, vol_noise) = (normal(), normal(), normal(), normal());
            let ret = if d == 0 {
                0.0
            } else {
                drift[sec][d] - 0.5 * sigma * sigma + sigma * (w_sec * z_sector[sec] + w_idio * eps)
            };
            let close = prev_close[s] * ret.exp();
            let open = prev_close[s] * (0.25 * sigma * gap).exp();
            let high = open.max(close) * (0.5 * sigma * wick_hi.abs()).exp();
            let low = open.min(close) * (-0.5 * sigma * wick_lo.abs()).exp();
            let volume = (13.0 + 0.3 * vol_noise + 10.0 * ret.abs()).exp().round();
            let base = (s * days + d) * m;
            values[base..base + m].copy_from_slice(&[open, high, low, close, volume]);
            prev_close[s] = close;
        }
    }

    let symbols: Vec<String> = (0..n).map(|s| format!("S{s:03}")).collect();
    let industry: BTreeMap<String, String> = symbols
        .iter()
        .enumerate()
        .map(|(s, sym)| (sym.clone(), format!("SEC{}", spec.sector_of(s))))
        .collect();
    StockPanel::new(
        symbols,
        business_days(days),
        OHLCV.iter().map(|s| s.to_string()).collect(),
        super::CLOSE_COL,
        values,
        industry,
    )
}
