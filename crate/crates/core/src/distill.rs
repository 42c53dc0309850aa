//! Student training under teacher supervision: a dependence (HSIC) or MSE
//! term between student and teacher representations, added to the
//! prediction loss of the shared frozen head.

use ndgrad::{BoundParams, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DishftError, Result};
use crate::marketdata::{RelationMatrix, Split, WindowSample};
use crate::nn::{nll, prob_up_by_window, window_confusion, Batch, Scope};
use crate::stgnn::{STArch, STConfig};
use crate::teacher::{check_like, head_logits, TeacherModel};
use crate::train::{fit, EpochLog, Objective, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HsicMode {
    /// Samples are the `D` coordinates of one stock's two embeddings.
    #[default]
    PerStockDims,
    /// Samples are the rows of a batch.
    BatchSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HsicSign {
    /// The distillation term is `−HSIC`.
    #[default]
    MaximizeDependence,
    /// The distillation term is `+HSIC`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HsicConfig {
    pub kernel: KernelKind,
    pub bandwidth: Bandwidth,
    pub mode: HsicMode,
    pub sign: HsicSign,
}

impl HsicConfig {
    pub fn problems(&self) -> Vec<String> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                vec![format!("fixed bandwidth {s} must be > 0")]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    #[default]
    Hsic,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub loss: DistillKind,
    pub hsic: HsicConfig,
    /// Let the prediction head train with the student instead of staying frozen.
    pub train_head: bool,
}

/// Gram matrices `[B × m × m]` of `x [B × m × d]`.
fn kernel_matrix<'t>(x: Var<'t>, cfg: &HsicConfig) -> Result<Var<'t>> {
    let tape = x.tape();
    let s = x.shape();
    let (b, m) = (s[0], s[1]);
    match cfg.kernel {
        KernelKind::Linear => Ok(x.batched_matmul(x.transpose(1, 2)?)?),
        KernelKind::Rbf => {
            let d2 = x.pairwise_sq_dist()?;
            let sigma2 = match cfg.bandwidth {
                Bandwidth::Fixed(sigma) => return Ok(d2.scale(-0.5 / (sigma * sigma))?.exp()?),
                Bandwidth::Median => {
                    let values = d2.value();
                    let mut picks = Vec::with_capacity(b);
                    let mut fallback = Vec::with_capacity(b);
                    for g in 0..b {
                        let mut upper: Vec<(f64, usize)> = Vec::with_capacity(m * (m - 1) / 2);
                        for i in 0..m {
                            for j in (i + 1)..m {
                                let k = g * m * m + i * m + j;
                                upper.push((values.data()[k], k));
                            }
                        }
                        let mid = (upper.len() - 1) / 2;
                        let (_, &mut (v, k), _) =
                            upper.select_nth_unstable_by(mid, |a, c| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1)));
                        picks.push(k);
                        fallback.push(if v > 0.0 { 0.0 } else { 1.0 });
                    }
                    // σ² = median squared distance, or 1 when that median is zero.
                    d2.select(&picks, &[b])?
                        .add(tape.constant(Tensor::new(vec![b], fallback)?)?)?
                }
            };
            Ok(d2.scale_leading(sigma2.recip()?.scale(-0.5)?)?.exp()?)
        }
    }
}

/// `tr(K H L H)/(m−1)²` for every group of `x, y [B × m × d]`, shape `[B]`.
///
/// Expanded as `ΣK∘L − (2/m)·(K𝟏)ᵀ(L𝟏) + (𝟏ᵀK𝟏)(𝟏ᵀL𝟏)/m²` so no centred
/// matrix is ever formed.
pub fn hsic_var<'t>(x: Var<'t>, y: Var<'t>, cfg: &HsicConfig) -> Result<Var<'t>> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx.len() != 3 || sx != sy {
        return Err(DishftError::Shape(format!("hsic of {sx:?} and {sy:?}")));
    }
    let m = sx[1];
    if m < 2 {
        return Err(DishftError::InsufficientData(format!("hsic needs m >= 2 samples, got {m}")));
    }
    let mf = m as f64;
    let k = kernel_matrix(x, cfg)?;
    let l = kernel_matrix(y, cfg)?;
    let cross = k.mul(l)?.sum_axis(2)?.sum_axis(1)?;
    let (kr, lr) = (k.sum_axis(2)?, l.sum_axis(2)?);
    let rows = kr.mul(lr)?.sum_axis(1)?;
    let totals = kr.sum_axis(1)?.mul(lr.sum_axis(1)?)?;
    let tr = cross.sub(rows.scale(2.0 / mf)?)?.add(totals.scale(1.0 / (mf * mf))?)?;
    Ok(tr.scale(1.0 / ((m - 1) * (m - 1)) as f64)?)
}

/// Gram matrices of fixed samples `y [B × m × d]`, centred on both sides (`H L H`).
///
/// Mirrors [`kernel_matrix`] without recording anything on a tape.
pub fn centered_gram(y: &Tensor, cfg: &HsicConfig) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 3 || s[1] < 2 {
        return Err(DishftError::Shape(format!("centred gram of {s:?}")));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; b * m * m];
    let mut d2 = vec![0.0; m * m];
    let mut upper = Vec::with_capacity(m * (m - 1) / 2);
    for g in 0..b {
        let yg = &y.data()[g * m * d..(g + 1) * m * d];
        let lg = &mut out[g * m * m..(g + 1) * m * m];
        for i in 0..m {
            for j in 0..m {
                d2[i * m + j] = match cfg.kernel {
                    KernelKind::Linear => 0.0,
                    KernelKind::Rbf => (0..d).map(|k| (yg[i * d + k] - yg[j * d + k]).powi(2)).sum(),
                };
            }
        }
        match cfg.kernel {
            KernelKind::Linear => {
                for i in 0..m {
                    for j in 0..m {
                        lg[i * m + j] = (0..d).map(|k| yg[i * d + k] * yg[j * d + k]).sum();
                    }
                }
            }
            KernelKind::Rbf => {
                let sigma2 = match cfg.bandwidth {
                    Bandwidth::Fixed(sigma) => sigma * sigma,
                    Bandwidth::Median => {
                        upper.clear();
                        for i in 0..m {
                            for j in (i + 1)..m {
                                upper.push(d2[i * m + j]);
                            }
                        }
                        let mid = (upper.len() - 1) / 2;
                        let v = *upper.select_nth_unstable_by(mid, f64::total_cmp).1;
                        if v > 0.0 {
                            v
                        } else {
                            1.0
                        }
                    }
                };
                for (l, &dist) in lg.iter_mut().zip(&d2) {
                    *l = (-0.5 * dist / sigma2).exp();
                }
            }
        }
        let rows: Vec<f64> = lg.chunks(m).map(|r| r.iter().sum::<f64>() / m as f64).collect();
        let total = rows.iter().sum::<f64>() / m as f64;
        for i in 0..m {
            for j in 0..m {
                lg[i * m + j] += total - rows[i] - rows[j];
            }
        }
    }
    Ok(Tensor::new(vec![b, m, m], out)?)
}

/// HSIC of `x [B × m × d]` against fixed samples whose centred Gram
/// matrices `[B × m × m]` come from [`centered_gram`].
pub fn hsic_fixed<'t>(x: Var<'t>, centered: &Tensor, cfg: &HsicConfig) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 || centered.shape() != [s[0], s[1], s[1]] {
        return Err(DishftError::Shape(format!(
            "hsic of {s:?} against centred gram {:?}",
            centered.shape()
        )));
    }
    let m = s[1];
    let k = kernel_matrix(x, cfg)?;
    let w = x.tape().constant(centered.clone())?;
    let tr = k.mul(w)?.sum_axis(2)?.sum_axis(1)?;
    Ok(tr.scale(1.0 / ((m - 1) * (m - 1)) as f64)?)
}

/// `I − 𝟏𝟏ᵀ/m`.
pub fn centering(m: usize) -> Tensor {
    let inv = 1.0 / m as f64;
    Tensor::from_fn(vec![m, m], |k| if k / m == k % m { 1.0 - inv } else { -inv })
        .expect("square shape")
}

/// HSIC of two sample sets: `[m]` scalars or `[m × d]` rows.
pub fn hsic(x: &Tensor, y: &Tensor, cfg: &HsicConfig) -> Result<f64> {
    let as_groups = |t: &Tensor| -> Result<Tensor> {
        match t.shape() {
            [m] => Ok(t.clone().reshape(vec![1, *m, 1])?),
            [m, d] => Ok(t.clone().reshape(vec![1, *m, *d])?),
            s => Err(DishftError::Shape(format!("hsic input {s:?} must be [m] or [m × d]"))),
        }
    };
    let tape = Tape::new();
    let xv = tape.constant(as_groups(x)?)?;
    let yv = tape.constant(as_groups(y)?)?;
    Ok(hsic_var(xv, yv, cfg)?.item())
}

/// Distillation term between `student [R × D]` and `teacher [R × D]`.
pub fn distill_loss_var<'t>(student: Var<'t>, teacher: Var<'t>, cfg: &DistillConfig) -> Result<Var<'t>> {
    let (ss, ts) = (student.shape(), teacher.shape());
    if ss.len() != 2 || ss != ts {
        return Err(DishftError::Shape(format!(
            "student embedding {ss:?} vs teacher embedding {ts:?}"
        )));
    }
    let (r, d) = (ss[0], ss[1]);
    match cfg.loss {
        DistillKind::Mse => {
            let diff = student.sub(teacher)?;
            Ok(diff.mul(diff)?.mean()?)
        }
        DistillKind::Hsic => {
            let shape = match cfg.hsic.mode {
                HsicMode::PerStockDims => [r, d, 1],
                HsicMode::BatchSamples => [1, r, d],
            };
            let dep = hsic_var(student.reshape(&shape)?, teacher.reshape(&shape)?, &cfg.hsic)?.mean()?;
            Ok(match cfg.hsic.sign {
                HsicSign::MaximizeDependence => dep.neg()?,
                HsicSign::Literal => dep,
            })
        }
    }
}

/// Distillation term against a fixed teacher embedding `[R × D]`.
pub fn distill_loss_fixed<'t>(student: Var<'t>, teacher: &Tensor, cfg: &DistillConfig) -> Result<Var<'t>> {
    let ss = student.shape();
    if ss.len() != 2 || ss != teacher.shape() {
        return Err(DishftError::Shape(format!(
            "student embedding {ss:?} vs teacher embedding {:?}",
            teacher.shape()
        )));
    }
    let (r, d) = (ss[0], ss[1]);
    match cfg.loss {
        DistillKind::Mse => distill_loss_var(student, student.tape().constant(teacher.clone())?, cfg),
        DistillKind::Hsic => {
            let shape = match cfg.hsic.mode {
                HsicMode::PerStockDims => [r, d, 1],
                HsicMode::BatchSamples => [1, r, d],
            };
            let centered = centered_gram(&teacher.clone().reshape(shape.to_vec())?, &cfg.hsic)?;
            let dep = hsic_fixed(student.reshape(&shape)?, &centered, &cfg.hsic)?.mean()?;
            Ok(match cfg.hsic.sign {
                HsicSign::MaximizeDependence => dep.neg()?,
                HsicSign::Literal => dep,
            })
        }
    }
}

pub fn distill_loss(student: &Tensor, teacher: &Tensor, cfg: &DistillConfig) -> Result<f64> {
    let tape = Tape::new();
    let (s, t) = (tape.constant(student.clone())?, tape.constant(teacher.clone())?);
    Ok(distill_loss_var(s, t, cfg)?.item())
}

/// `L_p + λ·L_d`.
pub fn combined_loss<'t>(pred: Var<'t>, distill: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DishftError::Config(format!("lambda = {lambda} must be >= 0")));
    }
    Ok(pred.add(distill.scale(lambda)?)?)
}

/// A history-only encoder sharing the teacher's prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub st: STArch,
    /// `student.st.*` and `student.head.*`.
    pub params: ParamSet,
}

fn student_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5757
}

impl StudentModel {
    /// Fresh encoder plus a copy of `head` (`head.w`, `head.b`).
    pub fn new(st: STArch, head: &ParamSet, seed: u64) -> Result<Self> {
        let w = head
            .get("head.w")
            .ok_or_else(|| DishftError::Config("head lacks `head.w`".into()))?;
        if w.shape() != [st.cfg.output_dim, 2] {
            return Err(DishftError::Config(format!(
                "student output dim {} does not match head input {:?}",
                st.cfg.output_dim,
                w.shape()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(student_seed(seed));
        let mut params = ParamSet::new();
        params.extend_prefixed("student", &st.init_params(&mut rng)?);
        params.extend_prefixed("student", head);
        Ok(Self { st, params })
    }

    pub fn from_params(st: STArch, params: ParamSet) -> Result<Self> {
        let mut head = ParamSet::new();
        head.insert("head.w", Tensor::zeros(vec![st.cfg.output_dim, 2])?);
        head.insert("head.b", Tensor::zeros(vec![2])?);
        let template = Self::new(st, &head, 0)?;
        check_like(&template.params, &params)?;
        Ok(Self { st, params })
    }

    pub fn head(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.params.sub("student").iter() {
            if n.starts_with("head.") {
                out.insert(n, t.clone());
            }
        }
        out
    }

    fn logits<'t>(
        &self,
        bound: &BoundParams<'_, 't>,
        tape: &'t Tape,
        history: &Tensor,
        a: &RelationMatrix,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n_windows = history.shape()[0] / a.n().max(1);
        let emb = self.st.forward(&Scope::new(bound, "student.st."), tape, history, n_windows, a)?;
        Ok((emb, head_logits(&Scope::new(bound, "student."), emb)?))
    }

    /// `L_p + λ·L_d` on a batch, plus both terms' values. Without a teacher
    /// embedding only `L_p` is formed.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<'t>(
        &self,
        bound: &BoundParams<'_, 't>,
        tape: &'t Tape,
        batch: &Batch,
        a: &RelationMatrix,
        teacher_embedding: Option<&Tensor>,
        lambda: f64,
        distill: &DistillConfig,
    ) -> Result<(Var<'t>, [f64; 2])> {
        let (emb, logits) = self.logits(bound, tape, &batch.history, a)?;
        let pred = nll(logits.log_softmax(1)?, &batch.labels)?;
        match teacher_embedding {
            None => {
                let v = pred.item();
                Ok((pred, [v, 0.0]))
            }
            Some(target) => {
                let dist = distill_loss_fixed(emb, target, distill)?;
                let parts = [pred.item(), dist.item()];
                Ok((combined_loss(pred, dist, lambda)?, parts))
            }
        }
    }

    /// Student embedding `h̃` for `[B·N × L × M]` history.
    pub fn embedding(&self, history: &Tensor, a: &RelationMatrix) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        Ok(self.logits(&bound, &tape, history, a)?.0.value())
    }

    /// Class probabilities `[B·N × 2]` from history and relations only.
    pub fn student_infer(&self, history: &Tensor, a: &RelationMatrix) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        Ok(self.logits(&bound, &tape, history, a)?.1.softmax(1)?.value())
    }

    pub fn prob_up(&self, windows: &[WindowSample], a: &RelationMatrix, chunk: usize) -> Result<Vec<Vec<f64>>> {
        prob_up_by_window(windows, chunk, |b| self.student_infer(&b.history, a))
    }
}

struct StudentObjective<'a> {
    skeleton: StudentModel,
    teacher: Option<&'a TeacherModel>,
    lambda: f64,
    distill: DistillConfig,
    a: &'a RelationMatrix,
    val: &'a [WindowSample],
    chunk: usize,
}

impl Objective for StudentObjective<'_> {
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'_, 't>,
        batch: &Batch,
    ) -> Result<(Var<'t>, [f64; 2])> {
        let target = match self.teacher {
            Some(teacher) => Some(teacher.representation(batch, self.a)?),
            None => None,
        };
        self.skeleton
            .loss(bound, tape, batch, self.a, target.as_ref(), self.lambda, &self.distill)
    }

    fn validate(&self, params: &ParamSet) -> Result<(f64, f64)> {
        let model = StudentModel {
            st: self.skeleton.st,
            params: params.clone(),
        };
        let probs = model.prob_up(self.val, self.a, self.chunk)?;
        let c = window_confusion(self.val, &probs)?;
        Ok((c.accuracy(), c.mcc()))
    }
}

fn train_inner(
    st_cfg: STConfig,
    head: &ParamSet,
    teacher: Option<&TeacherModel>,
    split: &Split,
    a: &RelationMatrix,
    train: &TrainConfig,
    distill: &DistillConfig,
) -> Result<(StudentModel, Vec<EpochLog>)> {
    train.validate()?;
    let problems = distill.hsic.problems();
    if !problems.is_empty() {
        return Err(DishftError::Config(problems.join("; ")));
    }
    let first = split
        .train
        .first()
        .ok_or_else(|| DishftError::InsufficientData("empty training split".into()))?;
    if split.val.is_empty() {
        return Err(DishftError::InsufficientData("empty validation split".into()));
    }
    let st = STArch::new(st_cfg, first.n_indicators)?;
    let mut model = StudentModel::new(st, head, train.seed)?;
    let objective = StudentObjective {
        skeleton: model.clone(),
        teacher,
        lambda: train.lambda,
        distill: *distill,
        a,
        val: &split.val,
        chunk: train.chunk_size,
    };
    let train_head = distill.train_head;
    let trainable = move |n: &str| n.starts_with("student.st.") || (train_head && n.starts_with("student.head."));
    let log = fit(&mut model.params, &trainable, &split.train, train, &objective)?;
    Ok((model, log))
}

/// Distils a converged teacher into a history-only student.
///
/// Log rows carry the prediction loss in `losses[0]` and the distillation
/// term in `losses[1]`.
pub fn train_student(
    teacher: &TeacherModel,
    split: &Split,
    a: &RelationMatrix,
    train: &TrainConfig,
    distill: &DistillConfig,
) -> Result<(StudentModel, Vec<EpochLog>)> {
    let st_cfg = teacher.arch.cfg.student_st();
    if st_cfg.output_dim != teacher.arch.cfg.d {
        return Err(DishftError::Config(format!(
            "student output dim {} differs from teacher fusion dim {}",
            st_cfg.output_dim, teacher.arch.cfg.d
        )));
    }
    train_inner(st_cfg, &teacher.head(), Some(teacher), split, a, train, distill)
}

/// The same student trained on the prediction loss alone, with no teacher in the loop.
pub fn train_baseline(
    st_cfg: STConfig,
    head: &ParamSet,
    split: &Split,
    a: &RelationMatrix,
    train: &TrainConfig,
) -> Result<(StudentModel, Vec<EpochLog>)> {
    train_inner(st_cfg, head, None, split, a, train, &DistillConfig::default())
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn linear() -> HsicConfig {
        HsicConfig {
            kernel: KernelKind::Linear,
            ..HsicConfig::default()
        }
    }

    /// Dense `tr(K H L H)/(m−1)²` with plain loops.
    fn dense_hsic(k: &[f64], l: &[f64], m: usize) -> f64 {
        let h = centering(m);
        let mul = |a: &[f64], b: &[f64]| {
            let mut out = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    out[i * m + j] = (0..m).map(|t| a[i * m + t] * b[t * m + j]).sum();
                }
            }
            out
        };
        let khlh = mul(&mul(&mul(k, h.data()), l), h.data());
        (0..m).map(|i| khlh[i * m + i]).sum::<f64>() / ((m - 1) * (m - 1)) as f64
    }

    #[test]
    fn linear_hand_case_is_one() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 1.0]);
        let k: Vec<f64> = (0..9).map(|i| x.data()[i / 3] * x.data()[i % 3]).collect();
        assert!((dense_hsic(&k, &k, 3) - 1.0).abs() < 1e-12);
        assert!((hsic(&x, &x, &linear()).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_input_gives_zero() {
        let x = Tensor::from_vec(vec![2.5; 6]);
        let y = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.0, 4.0]);
        assert!(hsic(&x, &y, &HsicConfig::default()).unwrap().abs() < 1e-12);
        assert!(hsic(&x, &y, &linear()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rbf_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = 7;
        let x: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v: &f64| v.sin() + 0.1 * v).collect();
        let gram = |v: &[f64]| {
            let mut d2: Vec<f64> = Vec::new();
            for i in 0..m {
                for j in (i + 1)..m {
                    d2.push((v[i] - v[j]).powi(2));
                }
            }
            d2.sort_by(f64::total_cmp);
            let s2 = d2[(d2.len() - 1) / 2];
            (0..m * m)
                .map(|k| (-(v[k / m] - v[k % m]).powi(2) / (2.0 * s2)).exp())
                .collect::<Vec<_>>()
        };
        let oracle = dense_hsic(&gram(&x), &gram(&y), m);
        let got = hsic(&Tensor::from_vec(x), &Tensor::from_vec(y), &HsicConfig::default()).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn fixed_bandwidth_and_degenerate_inputs() {
        let x = Tensor::from_vec(vec![0.0, 1.0, 3.0]);
        let cfg = HsicConfig {
            bandwidth: Bandwidth::Fixed(2.0),
            ..HsicConfig::default()
        };
        assert!(hsic(&x, &x, &cfg).unwrap() > 0.0);
        assert!(hsic(&Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![1.0]), &cfg).is_err());
        // Mostly tied samples have a zero median distance and fall back to σ = 1.
        let tied = Tensor::from_vec(vec![0.0, 0.0, 0.0, 1.0]);
        let v = hsic(&tied, &tied, &HsicConfig::default()).unwrap();
        let unit = HsicConfig {
            bandwidth: Bandwidth::Fixed(1.0),
            ..HsicConfig::default()
        };
        assert!((v - hsic(&tied, &tied, &unit).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn distill_loss_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let s = Tensor::uniform(vec![3, 4], 1.0, &mut rng).unwrap();
        let mse = DistillConfig {
            loss: DistillKind::Mse,
            ..DistillConfig::default()
        };
        assert_eq!(distill_loss(&s, &s, &mse).unwrap(), 0.0);
        assert!(distill_loss(&s, &s, &DistillConfig::default()).unwrap() < 0.0);
        let literal = DistillConfig {
            hsic: HsicConfig {
                sign: HsicSign::Literal,
                ..HsicConfig::default()
            },
            ..DistillConfig::default()
        };
        assert!(distill_loss(&s, &s, &literal).unwrap() > 0.0);
        let batch = DistillConfig {
            hsic: HsicConfig {
                mode: HsicMode::BatchSamples,
                ..HsicConfig::default()
            },
            ..DistillConfig::default()
        };
        assert!(distill_loss(&s, &s, &batch).unwrap() < 0.0);
        let t = Tensor::zeros(vec![3, 5]).unwrap();
        assert!(distill_loss(&s, &t, &mse).is_err());
    }

    #[test]
    fn fixed_target_path_matches_general_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = Tensor::uniform(vec![5, 6], 1.0, &mut rng).unwrap();
        let t = Tensor::uniform(vec![5, 6], 1.0, &mut rng).unwrap();
        let modes = [HsicMode::PerStockDims, HsicMode::BatchSamples];
        let kernels = [
            (KernelKind::Rbf, Bandwidth::Median),
            (KernelKind::Rbf, Bandwidth::Fixed(0.7)),
            (KernelKind::Linear, Bandwidth::Median),
        ];
        for mode in modes {
            for (kernel, bandwidth) in kernels {
                for loss in [DistillKind::Hsic, DistillKind::Mse] {
                    let cfg = DistillConfig {
                        loss,
                        hsic: HsicConfig { kernel, bandwidth, mode, ..HsicConfig::default() },
                        ..DistillConfig::default()
                    };
                    let general = distill_loss(&s, &t, &cfg).unwrap();
                    let tape = Tape::new();
                    let fixed = distill_loss_fixed(tape.constant(s.clone()).unwrap(), &t, &cfg)
                        .unwrap()
                        .item();
                    assert!((general - fixed).abs() < 1e-12, "{cfg:?}: {general} vs {fixed}");
                }
            }
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v)).unwrap();
        assert_eq!(combined_loss(c(0.7), c(0.2), 0.0).unwrap().item(), 0.7);
        assert_eq!(combined_loss(c(0.7), c(0.0), 1.0).unwrap().item(), 0.7);
        assert!((combined_loss(c(0.7), c(0.2), 0.5).unwrap().item() - 0.8).abs() < 1e-15);
        assert!(combined_loss(c(0.7), c(0.2), -1.0).is_err());
    }
}
