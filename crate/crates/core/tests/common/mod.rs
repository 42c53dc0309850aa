#![allow(dead_code)]

use std::collections::BTreeMap;

use dishft::distill::{DistillConfig, StudentModel};
use dishft::marketdata::{build_relation, windows, RelationMatrix, StockPanel, WindowSample};
use dishft::nn::Batch;
use dishft::stgnn::SpatialKind;
use dishft::teacher::{FusionKind, TeacherArch, TeacherConfig, TeacherModel};
use ndgrad::{finite_difference_check, BoundParams, GradCheckReport, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random-walk panel with `m` indicators; column 0 is the close, the others are noise.
pub fn random_panel(n: usize, days: usize, m: usize, seed: u64) -> StockPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols: Vec<String> = (0..n).map(|i| format!("S{i:02}")).collect();
    let dates: Vec<String> = (0..days).map(|d| format!("d{d:04}")).collect();
    let names: Vec<String> = (0..m).map(|k| if k == 0 { "close".into() } else { format!("x{k}") }).collect();
    let mut values = vec![0.0; n * days * m];
    for s in 0..n {
        let mut price = rng.random_range(20.0..80.0);
        for d in 0..days {
            price *= (rng.random_range(-0.03..0.03f64)).exp();
            values[(s * days + d) * m] = price;
            for k in 1..m {
                values[(s * days + d) * m + k] = rng.random_range(-1.0..1.0);
            }
        }
    }
    let industry: BTreeMap<String, String> = symbols
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), format!("ind{}", i % 2)))
        .collect();
    StockPanel::new(symbols, dates, names, 0, values, industry).unwrap()
}

pub struct Mini {
    pub panel: StockPanel,
    pub a: RelationMatrix,
    pub windows: Vec<WindowSample>,
}

/// N = 3, M = 2, L = 4, T = 2 with zero label threshold.
pub fn mini(seed: u64) -> Mini {
    let panel = random_panel(3, 14, 2, seed);
    let a = build_relation(&panel).unwrap();
    let windows = windows(&panel, 4, 2, 0.0, 1).unwrap();
    Mini { panel, a, windows }
}

pub fn batch_of(ws: &[WindowSample]) -> Batch {
    Batch::from_windows(&ws.iter().collect::<Vec<_>>()).unwrap()
}

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn cfg(spatial_kind: SpatialKind, fusion: FusionKind) -> TeacherConfig {
    TeacherConfig {
        spatial_kind,
        hidden_dim: 4,
        spatial_layers: 1,
        d: 4,
        d_p: 4,
        d_f: 3,
        k_d: None,
        fusion,
    }
}

/// Moves every parameter off its initial value; zero biases with all-zero
/// future bits would otherwise sit exactly on a ReLU kink.
pub fn jitter(params: &ParamSet, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    out
}

/// Differentiates `loss` with respect to every parameter named by `trainable`.
pub fn check<F>(params: &ParamSet, trainable: &dyn Fn(&str) -> bool, loss: F) -> GradCheckReport
where
    F: for<'t> Fn(&BoundParams<'_, 't>, &'t Tape) -> dishft::Result<Var<'t>>,
{
    let names: Vec<String> = params.names().iter().filter(|n| trainable(n)).cloned().collect();
    assert!(!names.is_empty());
    let tape = Tape::new();
    let bound = params.bind_where(&tape, trainable).unwrap();
    let out = loss(&bound, &tape).unwrap();
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = names
        .iter()
        .map(|n| {
            let v = bound.get(n).unwrap();
            grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()).unwrap())
        })
        .collect();
    let points: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let value = |pts: &[Tensor]| {
        let mut moved = params.clone();
        for (n, t) in names.iter().zip(pts) {
            moved.insert(n.as_str(), t.clone());
        }
        let tape = Tape::new();
        let bound = moved.bind(&tape, false)?;
        Ok(loss(&bound, &tape).expect("loss evaluates").item())
    };
    finite_difference_check(value, &analytic, &points, EPS, TOL).unwrap()
}

pub fn teacher_report(spatial: SpatialKind, fusion: FusionKind, seed: u64) -> GradCheckReport {
    let m = mini(seed);
    let batch = batch_of(&m.windows[..2]);
    let arch = TeacherArch::new(cfg(spatial, fusion), 2, 2, 0.5).unwrap();
    let params = jitter(&TeacherModel::new(arch, seed).unwrap().params, seed);
    let a: &RelationMatrix = &m.a;
    check(&params, &|_| true, |bound, tape| arch.loss(bound, tape, &batch, a))
}

pub fn student_report(distill: DistillConfig, lambda: f64, seed: u64) -> GradCheckReport {
    let m = mini(seed);
    let batch: Batch = batch_of(&m.windows[..2]);
    let tcfg = cfg(SpatialKind::Gcn, FusionKind::Attention);
    let arch = TeacherArch::new(tcfg, 2, 2, 0.5).unwrap();
    let teacher = TeacherModel::from_params(arch, jitter(&TeacherModel::new(arch, seed).unwrap().params, seed)).unwrap();
    let target = teacher.representation(&batch, &m.a).unwrap();
    let st = dishft::stgnn::STArch::new(tcfg.student_st(), 2).unwrap();
    let student = StudentModel::new(st, &teacher.head(), seed).unwrap();
    let params = jitter(&student.params, seed + 100);
    let a = &m.a;
    check(&params, &|_| true, |bound, tape| {
        Ok(student.loss(bound, tape, &batch, a, Some(&target), lambda, &distill)?.0)
    })
}

