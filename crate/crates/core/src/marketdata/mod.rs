//! Stock panels: loading, export, relation matrices, labels and windows.

mod relation;
mod synthetic;
mod windows;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::Deserialize;

use crate::error::{DishftError, Result};

pub use relation::{build_relation, RelationKind, RelationMatrix};
pub use synthetic::{generate_synthetic, RegimeEvent, SyntheticSpec};
pub use windows::{
    make_future_trend, make_labels, split_chronological, windows, Split, WindowSample,
};

/// Indicator columns of the price CSV, in file order.
pub const OHLCV: [&str; 5] = ["open", "high", "low", "close", "volume"];
const CLOSE_COL: usize = 3;

/// Per-stock, per-day indicator cube with industry tags.
///
/// `indicators` is laid out `[stock][day][indicator]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StockPanel {
    symbols: Vec<String>,
    dates: Vec<String>,
    indicator_names: Vec<String>,
    close_col: usize,
    indicators: Vec<f64>,
    industry: BTreeMap<String, String>,
}

impl StockPanel {
    pub fn new(
        symbols: Vec<String>,
        dates: Vec<String>,
        indicator_names: Vec<String>,
        close_col: usize,
        indicators: Vec<f64>,
        industry: BTreeMap<String, String>,
    ) -> Result<Self> {
        let (n, days, m) = (symbols.len(), dates.len(), indicator_names.len());
        if n < 2 {
            return Err(DishftError::InsufficientData(format!(
                "a panel needs at least 2 stocks, got {n}"
            )));
        }
        if m == 0 || close_col >= m {
            return Err(DishftError::Shape(format!(
                "close column {close_col} invalid for {m} indicators"
            )));
        }
        if indicators.len() != n * days * m {
            return Err(DishftError::Shape(format!(
                "expected {} indicator values, got {}",
                n * days * m,
                indicators.len()
            )));
        }
        let panel = Self {
            symbols,
            dates,
            indicator_names,
            close_col,
            indicators,
            industry,
        };
        for s in 0..n {
            for d in 0..days {
                let c = panel.close(s, d);
                if !(c > 0.0 && c.is_finite()) {
                    return Err(DishftError::Range(format!(
                        "close of {} on {} is {c}; must be positive",
                        panel.symbols[s], panel.dates[d]
                    )));
                }
            }
        }
        Ok(panel)
    }

    pub fn n_stocks(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_indicators(&self) -> usize {
        self.indicator_names.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicator_names
    }

    pub fn industry(&self) -> &BTreeMap<String, String> {
        &self.industry
    }

    pub fn close_col(&self) -> usize {
        self.close_col
    }

    #[inline]
    pub fn value(&self, stock: usize, day: usize, indicator: usize) -> f64 {
        let m = self.indicator_names.len();
        self.indicators[(stock * self.dates.len() + day) * m + indicator]
    }

    #[inline]
    pub fn close(&self, stock: usize, day: usize) -> f64 {
        self.value(stock, day, self.close_col)
    }

    /// `[day][indicator]` block of one stock.
    pub fn stock_block(&self, stock: usize) -> &[f64] {
        let w = self.dates.len() * self.indicator_names.len();
        &self.indicators[stock * w..(stock + 1) * w]
    }

    /// Copy with every indicator at days `> t` replaced by `sentinel`.
    pub fn with_values_after(&self, t: usize, sentinel: f64) -> StockPanel {
        let mut out = self.clone();
        let (days, m) = (self.dates.len(), self.indicator_names.len());
        for s in 0..self.symbols.len() {
            for d in (t + 1)..days {
                for k in 0..m {
                    out.indicators[(s * days + d) * m + k] = sentinel;
                }
            }
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    symbol: String,
    date: String,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

#[derive(Debug, Deserialize)]
struct RelationRow {
    symbol: String,
    industry: String,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> DishftError {
    DishftError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DishftError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_err(path, line, e.to_string())
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, got `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

/// Reads a price CSV and a relation CSV into a panel.
///
/// Stocks missing any trading day present elsewhere in the file are
/// dropped; the survivors are sorted by symbol.
pub fn load_panel(csv_path: impl AsRef<Path>, relation_path: impl AsRef<Path>) -> Result<StockPanel> {
    let csv_path = csv_path.as_ref();
    let relation_path = relation_path.as_ref();

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(csv_path)?;
    let price_header = ["symbol", "date", "open", "high", "low", "close", "volume"];
    check_header(csv_path, &mut rdr, &price_header)?;
    let headers = rdr.headers().map_err(|e| csv_err(csv_path, e))?.clone();

    let mut by_symbol: HashMap<String, BTreeMap<String, [f64; 5]>> = HashMap::new();
    let mut all_dates = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(csv_path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row: PriceRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(csv_path, line, e.to_string()))?;
        NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| parse_err(csv_path, line, format!("bad date `{}`: {e}", row.date)))?;
        let vals = [row.open, row.high, row.low, row.close, row.volume];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(csv_path, line, "non-finite value"));
        }
        if row.close <= 0.0 {
            return Err(parse_err(
                csv_path,
                line,
                format!("close price {} must be positive", row.close),
            ));
        }
        all_dates.insert(row.date.clone());
        let series = by_symbol.entry(row.symbol.clone()).or_default();
        if series.insert(row.date.clone(), vals).is_some() {
            return Err(parse_err(
                csv_path,
                line,
                format!("duplicate row for {} on {}", row.symbol, row.date),
            ));
        }
    }

    let dates: Vec<String> = all_dates.into_iter().collect();
    let mut symbols: Vec<String> = by_symbol
        .iter()
        .filter(|(_, s)| s.len() == dates.len())
        .map(|(k, _)| k.clone())
        .collect();
    symbols.sort();
    if symbols.len() < 2 {
        return Err(DishftError::InsufficientData(format!(
            "{} stock(s) with complete coverage of {} days; need at least 2",
            symbols.len(),
            dates.len()
        )));
    }

    let mut indicators = Vec::with_capacity(symbols.len() * dates.len() * OHLCV.len());
    for s in &symbols {
        for vals in by_symbol[s].values() {
            indicators.extend_from_slice(vals);
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(relation_path)?;
    check_header(relation_path, &mut rdr, &["symbol", "industry"])?;
    let mut industry = BTreeMap::new();
    for row in rdr.deserialize::<RelationRow>() {
        let row = row.map_err(|e| csv_err(relation_path, e))?;
        if by_symbol.contains_key(&row.symbol) && symbols.binary_search(&row.symbol).is_ok() {
            industry.insert(row.symbol, row.industry);
        }
    }

    StockPanel::new(
        symbols,
        dates,
        OHLCV.iter().map(|s| s.to_string()).collect(),
        CLOSE_COL,
        indicators,
        industry,
    )
}

/// Formats with 10 significant digits, trimming trailing zeros.
pub fn fmt_sig10(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&exp) {
        return format!("{v:.9e}");
    }
    let decimals = (9 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes the panel back out in the price and relation CSV formats.
///
/// Only OHLCV panels can be exported.
pub fn export_panel(
    panel: &StockPanel,
    csv_path: impl AsRef<Path>,
    relation_path: impl AsRef<Path>,
) -> Result<()> {
    if panel.indicator_names != OHLCV {
        return Err(DishftError::Shape(format!(
            "export needs OHLCV indicators, panel has {:?}",
            panel.indicator_names
        )));
    }
    let mut w = BufWriter::new(File::create(csv_path)?);
    writeln!(w, "symbol,date,open,high,low,close,volume")?;
    for (s, sym) in panel.symbols.iter().enumerate() {
        for (d, date) in panel.dates.iter().enumerate() {
            write!(w, "{sym},{date}")?;
            for k in 0..OHLCV.len() {
                write!(w, ",{}", fmt_sig10(panel.value(s, d, k)))?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(relation_path)?);
    writeln!(w, "symbol,industry")?;
    for sym in &panel.symbols {
        if let Some(ind) = panel.industry.get(sym) {
            writeln!(w, "{sym},{ind}")?;
        }
    }
    w.flush()?;
    Ok(())
}
