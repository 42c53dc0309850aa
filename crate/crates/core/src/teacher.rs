//! Future-aware teacher: encodes the realised trend over the horizon, fuses it
//! with the spatiotemporal embedding through channel attention and predicts.

use ndgrad::{BoundParams, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DishftError, Result};
use crate::marketdata::{RelationMatrix, Split, WindowSample};
use crate::nn::{init_linear, init_weight, linear, prob_up_by_window, window_confusion, Batch, Scope};
use crate::stgnn::{STArch, STConfig, SpatialKind, TemporalKind};
use crate::train::{fit, EpochLog, Objective, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Attention,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Spatial layer of both the teacher and the student.
    #[serde(rename = "backbone")]
    pub spatial_kind: SpatialKind,
    pub hidden_dim: usize,
    pub spatial_layers: usize,
    /// Fusion width `D`, also the student's embedding width.
    pub d: usize,
    /// Spatiotemporal embedding width `D_p`.
    pub d_p: usize,
    /// Future embedding width `D_f`.
    pub d_f: usize,
    /// Attention scaling factor; `None` means `D`.
    pub k_d: Option<f64>,
    pub fusion: FusionKind,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            spatial_kind: SpatialKind::Gcn,
            hidden_dim: 32,
            spatial_layers: 1,
            d: 32,
            d_p: 32,
            d_f: 16,
            k_d: None,
            fusion: FusionKind::Attention,
        }
    }
}

impl TeacherConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden_dim == 0 || self.d == 0 || self.d_p == 0 || self.d_f == 0 {
            out.push("hidden_dim, d, d_p and d_f must be >= 1".into());
        }
        if !(1..=2).contains(&self.spatial_layers) {
            out.push(format!("spatial_layers = {} must be 1 or 2", self.spatial_layers));
        }
        if let Some(k) = self.k_d {
            if !(k > 0.0 && k.is_finite()) {
                out.push(format!("k_d = {k} must be > 0"));
            }
        }
        out
    }

    /// Encoder of the teacher (output `D_p`).
    pub fn teacher_st(&self) -> STConfig {
        STConfig {
            temporal_kind: TemporalKind::Gru,
            spatial_kind: self.spatial_kind,
            hidden_dim: self.hidden_dim,
            spatial_layers: self.spatial_layers,
            output_dim: self.d_p,
        }
    }

    /// Encoder of the student: same architecture, output `D`.
    pub fn student_st(&self) -> STConfig {
        STConfig {
            output_dim: self.d,
            ..self.teacher_st()
        }
    }

    pub fn k_d(&self) -> f64 {
        self.k_d.unwrap_or(self.d as f64)
    }
}

/// Shapes and constants of a teacher, without parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherArch {
    pub cfg: TeacherConfig,
    pub st: STArch,
    pub horizon: usize,
    pub tau: f64,
}

/// `q = ReLU(FFN(f))`, one hidden layer of width `D_f`: `[R × T] → [R × D_f]`.
pub fn encode_future_var<'t>(scope: &Scope<'_, '_, 't>, future: Var<'t>) -> Result<Var<'t>> {
    let hidden = linear(scope, "future.0", future)?.relu()?;
    Ok(linear(scope, "future.1", hidden)?.relu()?)
}

/// `V_d = pᵀ·F^d·q` for every row: `p [R × D_p]`, `q [R × D_f]`, `F [D × D_p × D_f]` → `[R × D]`.
pub fn vmv_var<'t>(p: Var<'t>, q: Var<'t>, f: Var<'t>) -> Result<Var<'t>> {
    let (fs, ps, qs) = (f.shape(), p.shape(), q.shape());
    if fs.len() != 3 || ps.len() != 2 || qs.len() != 2 || ps[1] != fs[1] || qs[1] != fs[2] || ps[0] != qs[0] {
        return Err(DishftError::Shape(format!(
            "vmv of p {ps:?}, q {qs:?} with F {fs:?}"
        )));
    }
    let (d, dp, df, rows) = (fs[0], fs[1], fs[2], ps[0]);
    // pᵀF^d for all d at once, then contract with q.
    let f2 = f.transpose(0, 1)?.reshape(&[dp, d * df])?;
    let pf = p.matmul(f2)?.reshape(&[rows, d, df])?;
    Ok(pf.batched_matmul(q.reshape(&[rows, df, 1])?)?.reshape(&[rows, d])?)
}

/// Channel-gated fusion: `h = D·softmax(τ·Q∘K/√K_d)∘V`. Returns `(h, α)`.
pub fn fuse_attention_var<'t>(
    scope: &Scope<'_, '_, 't>,
    p: Var<'t>,
    q: Var<'t>,
    tau: f64,
    k_d: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let f = scope.get("fusion.f")?;
    let d = f.shape()[0];
    let v = vmv_var(p, q, f)?;
    let qv = q.matmul(scope.get("fusion.w_q")?)?;
    let kv = p.matmul(scope.get("fusion.w_k")?)?;
    let alpha = qv.mul(kv)?.scale(tau / k_d.sqrt())?.softmax(1)?;
    let h = alpha.mul(v)?.scale(d as f64)?;
    Ok((h, alpha))
}

/// `ReLU(W·[p ‖ q] + b)`.
pub fn fuse_concat_var<'t>(scope: &Scope<'_, '_, 't>, p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    Ok(linear(scope, "fusion", Var::concat(&[p, q], 1)?)?.relu()?)
}

/// Two-class logits of the prediction head.
pub fn head_logits<'t>(scope: &Scope<'_, '_, 't>, h: Var<'t>) -> Result<Var<'t>> {
    linear(scope, "head", h)
}

/// Row-wise class probabilities `[N × 2]` of `h [N × D]` under head parameters
/// `head.w [D × 2]` and `head.b [2]`.
pub fn predict(h: &Tensor, head: &ParamSet) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = head.bind(&tape, false)?;
    let scope = Scope::new(&bound, "");
    let hv = tape.constant(h.clone())?;
    Ok(head_logits(&scope, hv)?.softmax(1)?.value())
}

/// Bilinear channels of concrete tensors, see [`vmv_var`].
pub fn vmv_channels(p: &Tensor, q: &Tensor, f: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let (p, q, f) = (tape.constant(p.clone())?, tape.constant(q.clone())?, tape.constant(f.clone())?);
    Ok(vmv_var(p, q, f)?.value())
}

impl TeacherArch {
    pub fn new(cfg: TeacherConfig, input_dim: usize, horizon: usize, tau: f64) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(DishftError::Config(problems.join("; ")));
        }
        if !(tau > 0.0 && tau.is_finite()) || horizon == 0 {
            return Err(DishftError::Config(format!(
                "tau = {tau} must be > 0 and horizon = {horizon} >= 1"
            )));
        }
        Ok(Self {
            cfg,
            st: STArch::new(cfg.teacher_st(), input_dim)?,
            horizon,
            tau,
        })
    }

    /// Fresh parameters under `teacher.`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let c = &self.cfg;
        let mut p = ParamSet::new();
        p.extend_prefixed("teacher", &self.st.init_params(rng)?);
        init_linear(&mut p, rng, "teacher.future.0", self.horizon, c.d_f)?;
        init_linear(&mut p, rng, "teacher.future.1", c.d_f, c.d_f)?;
        match c.fusion {
            FusionKind::Attention => {
                let bound = 1.0 / ((c.d_p * c.d_f) as f64).sqrt();
                p.insert(
                    "teacher.fusion.f",
                    Tensor::uniform(vec![c.d, c.d_p, c.d_f], bound, rng)?,
                );
                p.insert("teacher.fusion.w_q", init_weight(rng, c.d_f, c.d)?);
                p.insert("teacher.fusion.w_k", init_weight(rng, c.d_p, c.d)?);
            }
            FusionKind::Concat => init_linear(&mut p, rng, "teacher.fusion", c.d_p + c.d_f, c.d)?,
        }
        init_linear(&mut p, rng, "teacher.head", c.d, 2)?;
        Ok(p)
    }

    /// Future-aware representation `[R × D]` and attention weights when present.
    pub fn represent<'t>(
        &self,
        bound: &BoundParams<'_, 't>,
        tape: &'t Tape,
        batch: &Batch,
        a: &RelationMatrix,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        if batch.future.shape()[1] != self.horizon {
            return Err(DishftError::Shape(format!(
                "future trend has {} steps, teacher expects {}",
                batch.future.shape()[1],
                self.horizon
            )));
        }
        let st_scope = Scope::new(bound, "teacher.st.");
        let scope = Scope::new(bound, "teacher.");
        let p = self.st.forward(&st_scope, tape, &batch.history, batch.n_windows, a)?;
        let q = encode_future_var(&scope, tape.constant(batch.future.clone())?)?;
        Ok(match self.cfg.fusion {
            FusionKind::Attention => {
                let (h, alpha) = fuse_attention_var(&scope, p, q, self.tau, self.cfg.k_d())?;
                (h, Some(alpha))
            }
            FusionKind::Concat => (fuse_concat_var(&scope, p, q)?, None),
        })
    }

    pub fn logits<'t>(
        &self,
        bound: &BoundParams<'_, 't>,
        tape: &'t Tape,
        batch: &Batch,
        a: &RelationMatrix,
    ) -> Result<Var<'t>> {
        let (h, _) = self.represent(bound, tape, batch, a)?;
        head_logits(&Scope::new(bound, "teacher."), h)
    }

    /// Mean cross-entropy of the horizon labels.
    pub fn loss<'t>(
        &self,
        bound: &BoundParams<'_, 't>,
        tape: &'t Tape,
        batch: &Batch,
        a: &RelationMatrix,
    ) -> Result<Var<'t>> {
        crate::nn::nll(self.logits(bound, tape, batch, a)?.log_softmax(1)?, &batch.labels)
    }
}

/// A teacher with parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub arch: TeacherArch,
    pub params: ParamSet,
}

impl TeacherModel {
    pub fn new(arch: TeacherArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch.init_params(&mut rng)?;
        Ok(Self { arch, params })
    }

    /// Rebuilds a model from a checkpoint, checking every tensor shape.
    pub fn from_params(arch: TeacherArch, params: ParamSet) -> Result<Self> {
        let template = arch.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        check_like(&template, &params)?;
        Ok(Self { arch, params })
    }

    /// Head parameters named `head.w` and `head.b`.
    pub fn head(&self) -> ParamSet {
        self.params.sub("teacher")
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .fold(ParamSet::new(), |mut acc, (n, t)| {
                acc.insert(n, t.clone());
                acc
            })
    }

    /// `q` for each row of a `[R × T]` bit matrix.
    pub fn encode_future(&self, future: &Tensor) -> Result<Tensor> {
        if future.rank() != 2 || future.shape()[1] != self.arch.horizon {
            return Err(DishftError::Shape(format!(
                "future trend {:?} does not match [R × {}]",
                future.shape(),
                self.arch.horizon
            )));
        }
        if future.data().iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(DishftError::Range("future trend must be 0/1".into()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        let scope = Scope::new(&bound, "teacher.");
        Ok(encode_future_var(&scope, tape.constant(future.clone())?)?.value())
    }

    /// Fused representation of `p [R × D_p]` and `q [R × D_f]` and the attention weights
    /// (all ones for concatenation).
    pub fn fuse(&self, p: &Tensor, q: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        let scope = Scope::new(&bound, "teacher.");
        let (pv, qv) = (tape.constant(p.clone())?, tape.constant(q.clone())?);
        match self.arch.cfg.fusion {
            FusionKind::Attention => {
                let (h, a) = fuse_attention_var(&scope, pv, qv, self.arch.tau, self.arch.cfg.k_d())?;
                Ok((h.value(), a.value()))
            }
            FusionKind::Concat => {
                let h = fuse_concat_var(&scope, pv, qv)?.value();
                let ones = Tensor::full(h.shape().to_vec(), 1.0)?;
                Ok((h, ones))
            }
        }
    }

    /// Future-aware representation `h^{t+}` per row of `batch`.
    pub fn representation(&self, batch: &Batch, a: &RelationMatrix) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        Ok(self.arch.represent(&bound, &tape, batch, a)?.0.value())
    }

    pub fn predict_batch(&self, batch: &Batch, a: &RelationMatrix) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        Ok(self.arch.logits(&bound, &tape, batch, a)?.softmax(1)?.value())
    }

    /// Class-1 probability per window and stock.
    pub fn prob_up(&self, windows: &[WindowSample], a: &RelationMatrix, chunk: usize) -> Result<Vec<Vec<f64>>> {
        prob_up_by_window(windows, chunk, |b| self.predict_batch(b, a))
    }
}

pub(crate) fn check_like(template: &ParamSet, params: &ParamSet) -> Result<()> {
    for (name, t) in template.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(DishftError::Shape(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(DishftError::Shape(format!("checkpoint lacks tensor `{name}`"))),
        }
    }
    if params.len() != template.len() {
        return Err(DishftError::Shape(format!(
            "checkpoint has {} tensors, model expects {}",
            params.len(),
            template.len()
        )));
    }
    Ok(())
}

struct TeacherObjective<'a> {
    arch: TeacherArch,
    a: &'a RelationMatrix,
    val: &'a [WindowSample],
    chunk: usize,
}

impl Objective for TeacherObjective<'_> {
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'_, 't>,
        batch: &Batch,
    ) -> Result<(Var<'t>, [f64; 2])> {
        let loss = self.arch.loss(bound, tape, batch, self.a)?;
        let v = loss.item();
        Ok((loss, [v, 0.0]))
    }

    fn validate(&self, params: &ParamSet) -> Result<(f64, f64)> {
        let model = TeacherModel {
            arch: self.arch,
            params: params.clone(),
        };
        let probs = model.prob_up(self.val, self.a, self.chunk)?;
        let c = window_confusion(self.val, &probs)?;
        Ok((c.accuracy(), c.mcc()))
    }
}

/// Cross-entropy training with early stopping on validation accuracy.
///
/// Log rows carry the training loss in `losses[0]`.
pub fn train_teacher(
    split: &Split,
    a: &RelationMatrix,
    cfg: &TeacherConfig,
    train: &TrainConfig,
) -> Result<(TeacherModel, Vec<EpochLog>)> {
    train.validate()?;
    let first = split
        .train
        .first()
        .ok_or_else(|| DishftError::InsufficientData("empty training split".into()))?;
    if split.val.is_empty() {
        return Err(DishftError::InsufficientData("empty validation split".into()));
    }
    let arch = TeacherArch::new(*cfg, first.n_indicators, first.horizon, train.tau)?;
    let mut model = TeacherModel::new(arch, train.seed)?;
    let objective = TeacherObjective {
        arch,
        a,
        val: &split.val,
        chunk: train.chunk_size,
    };
    let log = fit(&mut model.params, &|_| true, &split.train, train, &objective)?;
    Ok((model, log))
}
