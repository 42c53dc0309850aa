//! Spatiotemporal encoder: a GRU over each stock's lookback followed by
//! graph layers over the relation matrix.

use ndgrad::{ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DishftError, Result};
use crate::marketdata::RelationMatrix;
use crate::nn::{init_linear, init_weight, repeat_matrix, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    #[default]
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKind {
    #[default]
    Gcn,
    Gat,
}

impl std::fmt::Display for SpatialKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpatialKind::Gcn => "gcn",
            SpatialKind::Gat => "gat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct STConfig {
    pub temporal_kind: TemporalKind,
    pub spatial_kind: SpatialKind,
    pub hidden_dim: usize,
    pub spatial_layers: usize,
    pub output_dim: usize,
}

impl STConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(DishftError::Config("encoder dimensions must be >= 1".into()));
        }
        if !(1..=2).contains(&self.spatial_layers) {
            return Err(DishftError::Config(format!(
                "spatial_layers = {} must be 1 or 2",
                self.spatial_layers
            )));
        }
        Ok(())
    }
}

const GAT_SLOPE: f64 = 0.2;
const MASKED: f64 = -1e9;

/// Encoder shape: configuration plus the indicator count it reads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct STArch {
    pub cfg: STConfig,
    pub input_dim: usize,
}

impl STArch {
    pub fn new(cfg: STConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(DishftError::Config("input_dim must be >= 1".into()));
        }
        Ok(Self { cfg, input_dim })
    }

    /// Fresh parameters named `st.<component>.<layer>.<matrix>`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let (m, h) = (self.input_dim, self.cfg.hidden_dim);
        let mut p = ParamSet::new();
        for g in ["z", "r", "n"] {
            p.insert(format!("st.gru.0.w_{g}"), init_weight(rng, m, h)?);
            p.insert(format!("st.gru.0.u_{g}"), init_weight(rng, h, h)?);
            p.insert(format!("st.gru.0.b_{g}"), Tensor::zeros(vec![h])?);
        }
        p.insert("st.gru.0.b_hn", Tensor::zeros(vec![h])?);
        for i in 0..self.cfg.spatial_layers {
            match self.cfg.spatial_kind {
                SpatialKind::Gcn => {
                    p.insert(format!("st.gcn.{i}.w"), init_weight(rng, h, h)?);
                }
                SpatialKind::Gat => {
                    p.insert(format!("st.gat.{i}.w"), init_weight(rng, h, h)?);
                    p.insert(format!("st.gat.{i}.a_src"), init_weight(rng, h, 1)?);
                    p.insert(format!("st.gat.{i}.a_dst"), init_weight(rng, h, 1)?);
                }
            }
        }
        init_linear(&mut p, rng, "st.out.0", 2 * h, self.cfg.output_dim)?;
        Ok(p)
    }

    /// Final GRU state per row: `[R × L × M] → [R × D_s]`.
    pub fn temporal_encode<'t>(
        &self,
        scope: &Scope<'_, '_, 't>,
        tape: &'t Tape,
        history: &Tensor,
    ) -> Result<Var<'t>> {
        let shape = history.shape();
        if shape.len() != 3 || shape[2] != self.input_dim || shape[1] == 0 {
            return Err(DishftError::Shape(format!(
                "history {:?} does not match [R × L × {}]",
                shape, self.input_dim
            )));
        }
        if !history.is_finite() {
            return Err(DishftError::Range("history contains NaN or infinite values".into()));
        }
        let (rows, l, m) = (shape[0], shape[1], shape[2]);
        let hd = self.cfg.hidden_dim;
        let g = |n: &str| scope.get(&format!("gru.0.{n}"));
        let (w_z, u_z, b_z) = (g("w_z")?, g("u_z")?, g("b_z")?);
        let (w_r, u_r, b_r) = (g("w_r")?, g("u_r")?, g("b_r")?);
        let (w_n, u_n, b_n, b_hn) = (g("w_n")?, g("u_n")?, g("b_n")?, g("b_hn")?);

        let data = history.data();
        let mut h = tape.constant(Tensor::zeros(vec![rows, hd])?)?;
        for step in 0..l {
            let mut x = Vec::with_capacity(rows * m);
            for r in 0..rows {
                let base = (r * l + step) * m;
                x.extend_from_slice(&data[base..base + m]);
            }
            let x = tape.constant(Tensor::new(vec![rows, m], x)?)?;
            let z = x.matmul(w_z)?.add(h.matmul(u_z)?)?.add(b_z)?.sigmoid()?;
            let r = x.matmul(w_r)?.add(h.matmul(u_r)?)?.add(b_r)?.sigmoid()?;
            let hn = h.matmul(u_n)?.add(b_hn)?;
            let n = x.matmul(w_n)?.add(b_n)?.add(r.mul(hn)?)?.tanh()?;
            // (1 − z)·n + z·h
            h = n.add(z.mul(h.sub(n)?)?)?;
        }
        Ok(h)
    }

    /// Graph layers over `[B·N × D_s]` node states, windows mixed independently.
    pub fn spatial_aggregate<'t>(
        &self,
        scope: &Scope<'_, '_, 't>,
        tape: &'t Tape,
        states: Var<'t>,
        n_windows: usize,
        a: &RelationMatrix,
    ) -> Result<Var<'t>> {
        let n = a.n();
        let hd = self.cfg.hidden_dim;
        if states.shape() != [n_windows * n, hd] {
            return Err(DishftError::Shape(format!(
                "node states {:?} do not match {n_windows} windows of {n} stocks × {hd}",
                states.shape()
            )));
        }
        let mut s = states;
        match self.cfg.spatial_kind {
            SpatialKind::Gcn => {
                let adj = repeat_matrix(tape, n, a.values(), n_windows)?;
                for i in 0..self.cfg.spatial_layers {
                    let w = scope.get(&format!("gcn.{i}.w"))?;
                    let mixed = adj.batched_matmul(s.reshape(&[n_windows, n, hd])?)?;
                    s = mixed.reshape(&[n_windows * n, hd])?.matmul(w)?.relu()?;
                }
            }
            SpatialKind::Gat => {
                let mask = gat_mask(a);
                let mask = tape.constant(Tensor::new(vec![n, n], mask)?)?;
                let ones_row = tape.constant(Tensor::full(vec![n_windows, 1, n], 1.0)?)?;
                let ones_col = tape.constant(Tensor::full(vec![n_windows, n, 1], 1.0)?)?;
                for i in 0..self.cfg.spatial_layers {
                    let alpha = self.gat_coefficients(scope, i, s, n_windows, n, mask, ones_row, ones_col)?;
                    let z = s.matmul(scope.get(&format!("gat.{i}.w"))?)?;
                    let mixed = alpha.batched_matmul(z.reshape(&[n_windows, n, hd])?)?;
                    s = mixed.reshape(&[n_windows * n, hd])?.relu()?;
                }
            }
        }
        Ok(s)
    }

    /// Attention over each node's neighbourhood, `[B × N × N]`, rows summing to 1.
    #[allow(clippy::too_many_arguments)]
    fn gat_coefficients<'t>(
        &self,
        scope: &Scope<'_, '_, 't>,
        layer: usize,
        s: Var<'t>,
        n_windows: usize,
        n: usize,
        mask: Var<'t>,
        ones_row: Var<'t>,
        ones_col: Var<'t>,
    ) -> Result<Var<'t>> {
        let z = s.matmul(scope.get(&format!("gat.{layer}.w"))?)?;
        let src = z.matmul(scope.get(&format!("gat.{layer}.a_src"))?)?;
        let dst = z.matmul(scope.get(&format!("gat.{layer}.a_dst"))?)?;
        // e_ij = src_i + dst_j
        let e = src
            .reshape(&[n_windows, n, 1])?
            .batched_matmul(ones_row)?
            .add(ones_col.batched_matmul(dst.reshape(&[n_windows, 1, n])?)?)?;
        Ok(e.leaky_relu(GAT_SLOPE)?.add(mask)?.softmax(2)?)
    }

    /// Attention coefficients of one layer evaluated on concrete node states.
    pub fn gat_attention(
        &self,
        params: &ParamSet,
        layer: usize,
        states: &Tensor,
        a: &RelationMatrix,
    ) -> Result<Tensor> {
        if self.cfg.spatial_kind != SpatialKind::Gat || layer >= self.cfg.spatial_layers {
            return Err(DishftError::Config(format!("no attention layer {layer}")));
        }
        let n = a.n();
        let n_windows = states.shape()[0] / n;
        let tape = Tape::new();
        let bound = params.bind(&tape, false)?;
        let scope = Scope::new(&bound, "st.");
        let mask = tape.constant(Tensor::new(vec![n, n], gat_mask(a))?)?;
        let ones_row = tape.constant(Tensor::full(vec![n_windows, 1, n], 1.0)?)?;
        let ones_col = tape.constant(Tensor::full(vec![n_windows, n, 1], 1.0)?)?;
        let s = tape.constant(states.clone())?;
        Ok(self
            .gat_coefficients(&scope, layer, s, n_windows, n, mask, ones_row, ones_col)?
            .value())
    }

    /// `[B·N × L × M] → [B·N × output_dim]`.
    ///
    /// The output layer reads the GRU state alongside the graph output so
    /// stocks sharing a fully connected neighbourhood stay distinguishable.
    pub fn forward<'t>(
        &self,
        scope: &Scope<'_, '_, 't>,
        tape: &'t Tape,
        history: &Tensor,
        n_windows: usize,
        a: &RelationMatrix,
    ) -> Result<Var<'t>> {
        let s = self.temporal_encode(scope, tape, history)?;
        let g = self.spatial_aggregate(scope, tape, s, n_windows, a)?;
        let joined = Var::concat(&[s, g], 1)?;
        crate::nn::linear(scope, "out.0", joined)
    }
}

fn gat_mask(a: &RelationMatrix) -> Vec<f64> {
    let n = a.n();
    (0..n * n)
        .map(|k| if a.is_edge(k / n, k % n) { 0.0 } else { MASKED })
        .collect()
}

/// An encoder with its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct STModel {
    pub arch: STArch,
    pub params: ParamSet,
}

impl STModel {
    pub fn new<R: Rng + ?Sized>(cfg: STConfig, input_dim: usize, rng: &mut R) -> Result<Self> {
        let arch = STArch::new(cfg, input_dim)?;
        let params = arch.init_params(rng)?;
        Ok(Self { arch, params })
    }

    /// Evaluates the encoder on `[B·N × L × M]` history.
    pub fn st_forward(&self, history: &Tensor, a: &RelationMatrix) -> Result<Tensor> {
        let n_windows = history.shape()[0] / a.n().max(1);
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        let scope = Scope::new(&bound, "st.");
        Ok(self.arch.forward(&scope, &tape, history, n_windows, a)?.value())
    }

    pub fn temporal_encode(&self, history: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        let scope = Scope::new(&bound, "st.");
        Ok(self.arch.temporal_encode(&scope, &tape, history)?.value())
    }

    pub fn spatial_aggregate(&self, states: &Tensor, a: &RelationMatrix) -> Result<Tensor> {
        let n_windows = states.shape()[0] / a.n().max(1);
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        let scope = Scope::new(&bound, "st.");
        let s = tape.constant(states.clone())?;
        Ok(self.arch.spatial_aggregate(&scope, &tape, s, n_windows, a)?.value())
    }
}
