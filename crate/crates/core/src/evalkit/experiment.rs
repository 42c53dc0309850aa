use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{backtest, decision_confusion, equal_weight, mean, std_dev, ttest, BacktestResult, Confusion, EvalReport};
use crate::config::RunConfig;
use crate::distill::{train_baseline, train_student, DistillConfig, DistillKind, StudentModel};
use crate::error::{DishftError, Result};
use crate::marketdata::{split_chronological, windows, RelationMatrix, Split, StockPanel};
use crate::stgnn::SpatialKind;
use crate::teacher::{train_teacher, FusionKind, TeacherModel};
use crate::train::{EpochLog, TrainConfig};

/// Panel, relation graph and windows ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub panel: StockPanel,
    pub a: RelationMatrix,
    pub split: Split,
}

/// Builds windows with every anchor, splits them chronologically, then thins
/// the training part by `train.stride`.
pub fn prepare(panel: StockPanel, a: RelationMatrix, train: &TrainConfig) -> Result<Prepared> {
    train.validate()?;
    let all = windows(&panel, train.lookback, train.horizon, train.delta, 1)?;
    let mut split = split_chronological(all)?;
    if train.stride > 1 {
        split.train = split.train.into_iter().step_by(train.stride).collect();
    }
    Ok(Prepared { panel, a, split })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Future-aware teacher; not deployable, reported for reference.
    Teacher,
    Baseline,
    DishFT,
    /// MSE in place of HSIC.
    WithoutH,
    /// Concatenation in place of attention fusion.
    WithoutF,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Teacher,
        Variant::Baseline,
        Variant::DishFT,
        Variant::WithoutH,
        Variant::WithoutF,
    ];
    pub const ABLATION: [Variant; 3] = [Variant::DishFT, Variant::WithoutH, Variant::WithoutF];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Teacher => "teacher",
            Variant::Baseline => "baseline",
            Variant::DishFT => "dishft",
            Variant::WithoutH => "wo_h",
            Variant::WithoutF => "wo_f",
        }
    }
}

/// One trained model of one seed, scored on the test split.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub variant: Variant,
    pub seed: u64,
    /// Distillation weight used (0 for teacher and baseline).
    pub lambda: f64,
    pub confusion: Confusion,
    /// Best validation accuracy during training.
    pub val_acc: f64,
    /// Class-1 probabilities per test window and stock.
    pub prob_up: Vec<Vec<f64>>,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub runs: Vec<MethodRun>,
    pub baseline_backtest: BacktestResult,
    pub dishft_backtest: BacktestResult,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub backbone: SpatialKind,
    pub seeds: Vec<SeedOutcome>,
    /// Per variant, with `t_stat`/`p_value` against the baseline.
    pub reports: Vec<(Variant, EvalReport)>,
    pub equal_weight: BacktestResult,
    /// Test-period dates aligned with the equity curves.
    pub dates: Vec<String>,
}

impl ExperimentOutcome {
    pub fn report(&self, v: Variant) -> &EvalReport {
        &self.reports.iter().find(|(k, _)| *k == v).expect("every variant is reported").1
    }

    pub fn runs(&self, v: Variant) -> impl Iterator<Item = &MethodRun> {
        self.seeds.iter().flat_map(move |s| s.runs.iter().filter(move |r| r.variant == v))
    }

    /// Seed-mean equity curves of the baseline and the distilled student.
    pub fn mean_equity(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.seeds.len() as f64;
        let len = self.equal_weight.equity_curve.len();
        let mut base = vec![0.0; len];
        let mut dist = vec![0.0; len];
        for s in &self.seeds {
            for i in 0..len {
                base[i] += s.baseline_backtest.equity_curve[i] / n;
                dist[i] += s.dishft_backtest.equity_curve[i] / n;
            }
        }
        (base, dist)
    }

    /// Final-day equity gap, distilled minus baseline, per seed.
    pub fn final_equity_gaps(&self) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|s| s.dishft_backtest.final_return - s.baseline_backtest.final_return)
            .collect()
    }

    /// Writes the result tables, equity curves and plot; returns the paths written.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let backbone = self.backbone.to_string();
        let mut written = Vec::new();

        let path = dir.join("results.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["backbone", "variant", "seed", "acc", "mcc"])?;
        for v in [Variant::Baseline, Variant::DishFT] {
            for r in self.runs(v) {
                w.write_record([
                    backbone.clone(),
                    v.name().to_string(),
                    r.seed.to_string(),
                    r.confusion.accuracy().to_string(),
                    r.confusion.mcc().to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);

        let path = dir.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["backbone", "variant", "seed", "acc", "mcc"])?;
        for v in Variant::ABLATION {
            for r in self.runs(v) {
                w.write_record([
                    backbone.clone(),
                    v.name().to_string(),
                    r.seed.to_string(),
                    r.confusion.accuracy().to_string(),
                    r.confusion.mcc().to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);

        let path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "backbone", "variant", "acc_mean", "acc_std", "mcc_mean", "mcc_std", "t_stat", "p_value",
        ])?;
        for (v, rep) in &self.reports {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                backbone.clone(),
                v.name().to_string(),
                rep.acc.to_string(),
                std_dev(&rep.accs()).to_string(),
                rep.mcc.to_string(),
                std_dev(&rep.mccs()).to_string(),
                opt(rep.t_stat),
                opt(rep.p_value),
            ])?;
        }
        w.flush()?;
        written.push(path);

        let path = dir.join("backtest.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["seed", "method", "final_return"])?;
        for s in &self.seeds {
            for (name, bt) in [("baseline", &s.baseline_backtest), ("dishft", &s.dishft_backtest)] {
                w.write_record([s.seed.to_string(), name.to_string(), bt.final_return.to_string()])?;
            }
        }
        w.flush()?;
        written.push(path);

        let (base, dist) = self.mean_equity();
        let series = [
            ("baseline", &base),
            ("dishft", &dist),
            ("equal_weight", &self.equal_weight.equity_curve),
        ];
        let path = dir.join("equity.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["date", "method", "equity"])?;
        for (name, curve) in series {
            for (date, e) in self.dates.iter().zip(curve.iter()) {
                w.write_record([date.as_str(), name, &e.to_string()])?;
            }
        }
        w.flush()?;
        written.push(path);

        let path = dir.join("equity.svg");
        plot_equity(&path, &series)?;
        written.push(path);
        Ok(written)
    }
}

fn plot_equity(path: &Path, series: &[(&str, &Vec<f64>)]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| DishftError::Plot(e.to_string());
    let len = series.iter().map(|s| s.1.len()).max().unwrap_or(1);
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.1.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Back-test equity (seed mean)", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0..len.max(2) - 1, (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("test day")
        .y_desc("equity")
        .draw()
        .map_err(|e| plot_err(&e))?;
    let colors = [RED, BLUE, BLACK];
    for (i, (name, curve)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        chart
            .draw_series(LineSeries::new(curve.iter().copied().enumerate(), color))
            .map_err(|e| plot_err(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

fn score(
    variant: Variant,
    seed: u64,
    lambda: f64,
    prob_up: Vec<Vec<f64>>,
    log: Vec<EpochLog>,
    prepared: &Prepared,
    cfg: &RunConfig,
) -> Result<MethodRun> {
    let confusion = decision_confusion(&prepared.split.test, &prob_up, cfg.eval.counting)?;
    let val_acc = log.iter().map(|l| l.val_acc).fold(f64::NEG_INFINITY, f64::max);
    Ok(MethodRun {
        variant,
        seed,
        lambda,
        confusion,
        val_acc,
        prob_up,
        log,
    })
}

fn student_run(
    variant: Variant,
    teacher: &TeacherModel,
    prepared: &Prepared,
    cfg: &RunConfig,
    train: &TrainConfig,
    distill: &DistillConfig,
) -> Result<MethodRun> {
    let (student, log): (StudentModel, _) = train_student(teacher, &prepared.split, &prepared.a, train, distill)?;
    let probs = student.prob_up(&prepared.split.test, &prepared.a, train.chunk_size)?;
    score(variant, train.seed, train.lambda, probs, log, prepared, cfg)
}

/// Trains every variant for one seed.
pub fn run_seed(prepared: &Prepared, cfg: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    let (split, a) = (&prepared.split, &prepared.a);
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let chunk = train.chunk_size;
    let mut runs = Vec::new();

    let (teacher, tlog) = train_teacher(split, a, &cfg.model, &train)?;
    let tprobs = teacher.prob_up(&split.test, a, chunk)?;
    runs.push(score(Variant::Teacher, seed, 0.0, tprobs, tlog, prepared, cfg)?);

    let train_s = cfg.student_train(&train);
    let (base, blog) = train_baseline(cfg.model.student_st(), &teacher.head(), split, a, &train_s)?;
    let bprobs = base.prob_up(&split.test, a, chunk)?;
    runs.push(score(Variant::Baseline, seed, 0.0, bprobs, blog, prepared, cfg)?);

    let hsic = DistillConfig {
        loss: DistillKind::Hsic,
        ..cfg.distill
    };
    let mut best: Option<MethodRun> = None;
    for &lambda in &cfg.eval.lambda_grid {
        let run = student_run(
            Variant::DishFT,
            &teacher,
            prepared,
            cfg,
            &TrainConfig { lambda, ..train_s.clone() },
            &hsic,
        )?;
        if best.as_ref().is_none_or(|b| run.val_acc > b.val_acc) {
            best = Some(run);
        }
    }
    let best = best.ok_or_else(|| DishftError::Config("lambda_grid must not be empty".into()))?;
    let with_lambda = TrainConfig {
        lambda: best.lambda,
        ..train_s.clone()
    };

    let mse = DistillConfig {
        loss: DistillKind::Mse,
        ..cfg.distill
    };
    runs.push(student_run(Variant::WithoutH, &teacher, prepared, cfg, &with_lambda, &mse)?);

    let concat_cfg = crate::teacher::TeacherConfig {
        fusion: FusionKind::Concat,
        ..cfg.model
    };
    let (concat, _) = train_teacher(split, a, &concat_cfg, &train)?;
    runs.push(student_run(Variant::WithoutF, &concat, prepared, cfg, &with_lambda, &hsic)?);

    let anchors: Vec<usize> = split.test.iter().map(|w| w.anchor).collect();
    let policy = cfg.policy();
    let baseline_backtest = backtest(&runs[1].prob_up, &anchors, &prepared.panel, &policy)?;
    let dishft_backtest = backtest(&best.prob_up, &anchors, &prepared.panel, &policy)?;
    runs.insert(2, best);
    Ok(SeedOutcome {
        seed,
        runs,
        baseline_backtest,
        dishft_backtest,
    })
}

/// Trains and scores all variants on the first `n_seeds` configured seeds.
pub fn run_experiment(cfg: &RunConfig, n_seeds: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (panel, a) = cfg.load_data()?;
    let prepared = prepare(panel, a, &cfg.train)?;
    run_prepared(&prepared, cfg, n_seeds)
}

/// [`run_experiment`] on already prepared data.
pub fn run_prepared(prepared: &Prepared, cfg: &RunConfig, n_seeds: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if n_seeds < 2 {
        return Err(DishftError::Config(format!("an experiment needs >= 2 seeds, got {n_seeds}")));
    }
    if cfg.run.seeds.len() < n_seeds {
        return Err(DishftError::Config(format!(
            "{n_seeds} seeds requested but only {} configured",
            cfg.run.seeds.len()
        )));
    }
    let seeds = &cfg.run.seeds[..n_seeds];
    let jobs = cfg.run.jobs.min(n_seeds);
    let mut outcomes: Vec<Result<SeedOutcome>> = Vec::with_capacity(n_seeds);
    if jobs <= 1 {
        for &s in seeds {
            outcomes.push(run_seed(prepared, cfg, s));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(n_seeds.div_ceil(jobs))
                .map(|part| scope.spawn(move || part.iter().map(|&s| run_seed(prepared, cfg, s)).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                outcomes.extend(h.join().expect("seed worker panicked"));
            }
        });
    }
    let seeds: Vec<SeedOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let reports_for = |v: Variant| {
        let per_seed = seeds
            .iter()
            .flat_map(|s| s.runs.iter().filter(|r| r.variant == v).map(|r| (r.seed, r.confusion)))
            .collect();
        EvalReport::from_seeds(per_seed)
    };
    let baseline = reports_for(Variant::Baseline);
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let mut rep = reports_for(v);
        if v != Variant::Baseline {
            let (t, p) = ttest(&rep.accs(), &baseline.accs())?;
            rep.t_stat = Some(t);
            rep.p_value = Some(p);
        }
        reports.push((v, rep));
    }
    let anchors: Vec<usize> = prepared.split.test.iter().map(|w| w.anchor).collect();
    let equal = equal_weight(&anchors, &prepared.panel, &cfg.policy())?;
    let first = equal.first_day;
    let dates = prepared.panel.dates()[first..first + equal.equity_curve.len()].to_vec();
    debug_assert!((mean(&baseline.accs()) - baseline.acc).abs() < 1e-12);
    Ok(ExperimentOutcome {
        backbone: cfg.model.spatial_kind,
        seeds,
        reports,
        equal_weight: equal,
        dates,
    })
}
