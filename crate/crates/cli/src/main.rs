use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dishft::config::RunConfig;
use dishft::distill::{train_student, StudentModel};
use dishft::evalkit::{self, backtest, decision_confusion, equal_weight, prepare, run_prepared, Prepared};
use dishft::marketdata::{export_panel, StockPanel};
use dishft::stgnn::STArch;
use dishft::teacher::train_teacher;
use dishft::train::EpochLog;
use dishft::DishftError;
use ndgrad::ParamSet;

#[derive(Parser)]
#[command(name = "dishft", version, about = "Future-aware teacher/student training for stock trend prediction")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed; experiments use consecutive seeds from here.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "DISHFT_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic panel of `[data.synthetic]` as CSV.
    Generate,
    /// Trains the teacher, then the student.
    Train,
    /// Scores a student checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Multi-seed comparison of baseline, distilled student and ablations.
    Experiment,
    /// Back-tests a student checkpoint on the test split.
    Backtest {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<DishftError> for Failure {
    fn from(e: DishftError) -> Self {
        let code = match e {
            DishftError::Config(_) | DishftError::InvalidSpec(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ndgrad::NdError> for Failure {
    fn from(e: ndgrad::NdError) -> Self {
        DishftError::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        DishftError::from(e).into()
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        DishftError::from(e).into()
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        let n = cfg.run.seeds.len() as u64;
        cfg.run.seeds = (seed..seed + n).collect();
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(usage(format!("invalid configuration:\n  {}", problems.join("\n  "))));
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.run.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("dishft-out"));
    cfg.run.out_dir = Some(out.clone());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    match cli.command {
        Command::Generate => generate(&cfg, &out),
        Command::Train => train(&cfg, &out),
        Command::Eval { checkpoint } => eval(&cfg, &out, &checkpoint),
        Command::Experiment => experiment(&cfg, &out),
        Command::Backtest { checkpoint } => run_backtest(&cfg, &out, &checkpoint),
    }
}

fn load(cfg: &RunConfig) -> Outcome<Prepared> {
    let (panel, a) = cfg.load_data()?;
    Ok(prepare(panel, a, &cfg.train)?)
}

fn generate(cfg: &RunConfig, out: &Path) -> Outcome<()> {
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| usage("generate needs a [data.synthetic] section"))?;
    let (panel, _) = cfg.load_data()?;
    export_panel(&panel, out.join("panel.csv"), out.join("relation.csv"))?;

    let mut w = csv::Writer::from_path(out.join("sector_stats.csv"))?;
    w.write_record(["event_day", "sector", "drift_shift", "mean_log_return_before", "mean_log_return_after"])?;
    println!(
        "generated {} stocks x {} days, {} sectors, {} events",
        panel.n_stocks(),
        panel.n_days(),
        spec.n_sectors,
        spec.regime_schedule.len()
    );
    for ev in &spec.regime_schedule {
        let span = 50.min(panel.n_days() / 4).max(1);
        let before = sector_mean_log_return(&panel, spec.n_sectors, ev.sector, ev.day.saturating_sub(span), ev.day);
        let after = sector_mean_log_return(&panel, spec.n_sectors, ev.sector, ev.day, (ev.day + span).min(panel.n_days()));
        println!(
            "  day {:>4} sector {} shift {:+.4}: mean daily log-return {:+.5} -> {:+.5}",
            ev.day, ev.sector, ev.drift_shift, before, after
        );
        w.write_record([
            ev.day.to_string(),
            ev.sector.to_string(),
            ev.drift_shift.to_string(),
            before.to_string(),
            after.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean daily log-return of a sector's stocks over days `(from, to]`.
fn sector_mean_log_return(panel: &StockPanel, n_sectors: usize, sector: usize, from: usize, to: usize) -> f64 {
    let stocks: Vec<usize> = (0..panel.n_stocks()).filter(|s| s % n_sectors == sector).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for &s in &stocks {
        for d in (from + 1)..to {
            sum += (panel.close(s, d) / panel.close(s, d - 1)).ln();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn write_log(path: &Path, header: &[&str], log: &[EpochLog], both_losses: bool) -> Outcome<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for l in log {
        let mut row = vec![l.epoch.to_string(), l.losses[0].to_string()];
        if both_losses {
            row.push(l.losses[1].to_string());
        }
        row.push(l.val_acc.to_string());
        row.push(l.val_mcc.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Outcome<()> {
    let p = load(cfg)?;
    let (teacher, tlog) = train_teacher(&p.split, &p.a, &cfg.model, &cfg.train)?;
    teacher.params.save(out.join("teacher.ckpt"))?;
    write_log(
        &out.join("teacher_log.csv"),
        &["epoch", "train_loss", "val_acc", "val_mcc"],
        &tlog,
        false,
    )?;
    let (student, slog) = train_student(&teacher, &p.split, &p.a, &cfg.student_train(&cfg.train), &cfg.distill)?;
    student.params.save(out.join("student.ckpt"))?;
    write_log(
        &out.join("student_log.csv"),
        &["epoch", "pred_loss", "distill_loss", "val_acc", "val_mcc"],
        &slog,
        true,
    )?;
    println!(
        "teacher: {} epochs, best val acc {:.4}; student: {} epochs, best val acc {:.4}",
        tlog.len(),
        best_val(&tlog),
        slog.len(),
        best_val(&slog)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn best_val(log: &[EpochLog]) -> f64 {
    log.iter().map(|l| l.val_acc).fold(f64::NEG_INFINITY, f64::max)
}

fn load_student(cfg: &RunConfig, p: &Prepared, checkpoint: &Path) -> Outcome<StudentModel> {
    let params = ParamSet::load(checkpoint)?;
    let st = STArch::new(cfg.model.student_st(), p.panel.n_indicators())?;
    StudentModel::from_params(st, params).map_err(|e| Failure {
        code: 1,
        message: format!("checkpoint {} does not fit the configured model: {e}", checkpoint.display()),
    })
}

fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Outcome<()> {
    let p = load(cfg)?;
    let student = load_student(cfg, &p, checkpoint)?;
    let test = &p.split.test;
    let probs = student.prob_up(test, &p.a, cfg.train.chunk_size)?;

    let mut decisions = csv::Writer::from_path(out.join("decisions.csv"))?;
    decisions.write_record(["date", "symbol", "prob_up", "pred", "label"])?;
    let mut windows = csv::Writer::from_path(out.join("eval_report.csv"))?;
    windows.write_record(["date", "decisions", "correct", "acc", "mcc"])?;
    for (w, row) in test.iter().zip(&probs) {
        let date = &p.panel.dates()[w.anchor];
        for (s, &q) in row.iter().enumerate() {
            decisions.write_record([
                date.clone(),
                p.panel.symbols()[s].clone(),
                q.to_string(),
                u8::from(q > 0.5).to_string(),
                u8::from(w.label[s]).to_string(),
            ])?;
        }
        let c = decision_confusion(std::slice::from_ref(w), std::slice::from_ref(row), cfg.eval.counting)?;
        windows.write_record([
            date.clone(),
            c.total().to_string(),
            (c.tp + c.tn).to_string(),
            c.accuracy().to_string(),
            c.mcc().to_string(),
        ])?;
    }
    decisions.flush()?;
    windows.flush()?;

    let c = decision_confusion(test, &probs, cfg.eval.counting)?;
    let mut summary = csv::Writer::from_path(out.join("eval_summary.csv"))?;
    summary.write_record(["acc", "mcc", "tp", "fp", "tn", "fn"])?;
    summary.write_record([
        c.accuracy().to_string(),
        c.mcc().to_string(),
        c.tp.to_string(),
        c.fp.to_string(),
        c.tn.to_string(),
        c.fn_.to_string(),
    ])?;
    summary.flush()?;
    println!(
        "test windows {}: acc {:.4}, mcc {:.4}",
        test.len(),
        c.accuracy(),
        c.mcc()
    );
    Ok(())
}

fn experiment(cfg: &RunConfig, out: &Path) -> Outcome<()> {
    let p = load(cfg)?;
    let outcome = run_prepared(&p, cfg, cfg.run.seeds.len())?;
    outcome.write_artifacts(out)?;
    println!("{:<10} {:>8} {:>8} {:>8} {:>8} {:>9}", "variant", "acc", "acc_sd", "mcc", "mcc_sd", "p(>base)");
    for (v, r) in &outcome.reports {
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9}",
            v.name(),
            r.acc,
            evalkit::std_dev(&r.accs()),
            r.mcc,
            evalkit::std_dev(&r.mccs()),
            r.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    let gaps = outcome.final_equity_gaps();
    println!("mean final equity gap (distilled - baseline): {:+.4}", evalkit::mean(&gaps));
    println!("wrote {}", out.display());
    Ok(())
}

fn run_backtest(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Outcome<()> {
    let p = load(cfg)?;
    let student = load_student(cfg, &p, checkpoint)?;
    let probs = student.prob_up(&p.split.test, &p.a, cfg.train.chunk_size)?;
    let anchors: Vec<usize> = p.split.test.iter().map(|w| w.anchor).collect();
    let policy = cfg.policy();
    let result = backtest(&probs, &anchors, &p.panel, &policy)?;
    let bench = equal_weight(&anchors, &p.panel, &policy)?;

    let mut w = csv::Writer::from_path(out.join("equity.csv"))?;
    w.write_record(["date", "method", "equity"])?;
    for (name, r) in [("student", &result), ("equal_weight", &bench)] {
        for (i, e) in r.equity_curve.iter().enumerate() {
            w.write_record([p.panel.dates()[r.first_day + i].as_str(), name, &e.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("positions.csv"))?;
    w.write_record(["date", "symbols"])?;
    for (day, held) in &result.positions_log {
        let names: Vec<&str> = held.iter().map(|&s| p.panel.symbols()[s].as_str()).collect();
        w.write_record([p.panel.dates()[*day].as_str(), &names.join(" ")])?;
    }
    w.flush()?;
    println!(
        "final return {:+.4} (equal weight {:+.4}) over {} days",
        result.final_return,
        bench.final_return,
        result.equity_curve.len()
    );
    Ok(())
}
