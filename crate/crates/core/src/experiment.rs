//! Multi-pair, multi-trial experiment runner and its file outputs.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::coalition::{is_balanced, GameVector};
use crate::config::ExperimentConfig;
use crate::control::{
    AllocationRule, ControllerKind, DiscreteApproachController, FullInfoController, PartialAudit,
    PartialInfoController, StationaryController,
};
use crate::diagnostics::{approachability_stat, attainability_confidence, DiagnosticReport, MeanStat};
use crate::error::{Error, Result};
use crate::sim::{run_discrete, run_trajectory, trial_rng, FlowSystem, TrajectoryRecord};
use crate::source::{generate_support, FiniteSupportProcess, GeneratedSupport};

/// Support generation draws from streams counted down from here so they
/// never collide with trial streams `(pair << 32) | trial`.
const GENERATION_STREAM: u64 = u64::MAX;

pub fn trial_stream(pair: usize, trial: usize) -> u64 {
    ((pair as u64) << 32) | trial as u64
}

pub fn generation_stream(pair: usize) -> u64 {
    GENERATION_STREAM - pair as u64
}

/// Controller built from the configuration, plus its audit when relevant.
pub struct Rule {
    pub rule: Box<dyn AllocationRule>,
    pub audit: Option<PartialAudit>,
}

pub fn build_rule(cfg: &ExperimentConfig, sys: &FlowSystem) -> Result<Rule> {
    let delta = || {
        cfg.delta
            .ok_or_else(|| Error::Domain(format!("{} controller needs delta", cfg.controller)))
    };
    Ok(match cfg.controller {
        ControllerKind::Full => Rule {
            rule: Box::new(FullInfoController::new(sys, cfg.thresholds)?),
            audit: None,
        },
        ControllerKind::Partial => {
            let c = PartialInfoController::new(sys, delta()?)?;
            Rule {
                audit: Some(c.audit()),
                rule: Box::new(c),
            }
        }
        ControllerKind::DiscreteApproach => {
            let c = DiscreteApproachController::new(sys, delta()?)?;
            Rule {
                audit: Some(c.0.audit()),
                rule: Box::new(c),
            }
        }
        ControllerKind::Stationary => Rule {
            rule: Box::new(StationaryController(sys.u_nom().clone())),
            audit: None,
        },
    })
}

/// Generates `cfg.pairs` supports, pair `p` from its own stream.
pub fn generate_pairs(cfg: &ExperimentConfig) -> Result<Vec<GeneratedSupport>> {
    let value_box = cfg.value_box()?;
    let v_nom = GameVector::new(cfg.v_nom.clone())?;
    (0..cfg.pairs)
        .map(|p| {
            let mut rng = trial_rng(cfg.seed, generation_stream(p));
            generate_support(&value_box, &v_nom, cfg.sampling, &mut rng, cfg.max_tries)
        })
        .collect()
}

pub struct PairResult {
    pub pair: usize,
    pub support: GeneratedSupport,
    pub records: Vec<TrajectoryRecord>,
    pub report: DiagnosticReport,
}

pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub system: FlowSystem,
    pub audit: Option<PartialAudit>,
    pub pairs: Vec<PairResult>,
    /// Averages over every record of every pair.
    pub aggregate: DiagnosticReport,
    pub approach: MeanStat,
    /// `None` when no step left the zero band.
    pub attain: Option<MeanStat>,
}

impl ExperimentResult {
    pub fn records(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.pairs.iter().flat_map(|p| p.records.iter())
    }

    /// Largest value of `f` over the per-pair reports.
    pub fn worst(&self, f: impl Fn(&DiagnosticReport) -> f64) -> f64 {
        self.pairs.iter().map(|p| f(&p.report)).fold(f64::MIN, f64::max)
    }
}

/// Runs the configured experiment. Output does not depend on `workers`.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    let sys = cfg.system()?;
    if !is_balanced(sys.index(), sys.v_nom())? {
        return Err(Error::Unbalanced(
            "the nominal game has an empty core, so no allocation rule can reach it".into(),
        ));
    }
    let rule = build_rule(cfg, &sys)?;
    let supports = generate_pairs(cfg)?;
    let sim = cfg.sim_config();

    let jobs: Vec<(usize, usize)> = (0..cfg.pairs)
        .flat_map(|p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let run_job = |&(p, t): &(usize, usize)| -> Result<TrajectoryRecord> {
        let mut rng = trial_rng(cfg.seed, trial_stream(p, t));
        let source: &FiniteSupportProcess = &supports[p].process;
        if cfg.controller.is_discrete() {
            run_discrete(&sys, rule.rule.as_ref(), source, &sim, &mut rng)
        } else {
            run_trajectory(&sys, rule.rule.as_ref(), source, &sim, &mut rng)
        }
    };
    let threads = workers.or(cfg.workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Domain(format!("cannot start worker pool: {e}")))?;
    let mut flat: Vec<TrajectoryRecord> = pool
        .install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>>>())?;

    let mut pairs = Vec::with_capacity(cfg.pairs);
    for (p, support) in supports.into_iter().enumerate().rev() {
        let records = flat.split_off(p * cfg.trials);
        let report = DiagnosticReport::from_records(&records, &sys, cfg.burn_in)?;
        pairs.push(PairResult {
            pair: p,
            support,
            records,
            report,
        });
    }
    pairs.reverse();

    let all: Vec<TrajectoryRecord> = pairs.iter().flat_map(|p| p.records.iter().cloned()).collect();
    let aggregate = DiagnosticReport::from_records(&all, &sys, cfg.burn_in)?;
    let approach = approachability_stat(&all)?;
    let attain = attainability_confidence(&all).ok();
    Ok(ExperimentResult {
        config: cfg.clone(),
        system: sys,
        audit: rule.audit,
        pairs,
        aggregate,
        approach,
        attain,
    })
}

fn push_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        write!(out, ",{v:.16e}").unwrap();
    }
}

pub fn trajectory_header(m: usize, n: usize) -> String {
    let mut h = String::from("t,trial,pair");
    for prefix in ["x", "ratio"] {
        for j in 1..=m {
            write!(h, ",{prefix}_{j}").unwrap();
        }
    }
    for i in 1..=n {
        write!(h, ",abar_{i}").unwrap();
    }
    h.push_str(",V");
    for j in 1..=m {
        write!(h, ",eps_{j}").unwrap();
    }
    h
}

/// Decimated samples of every trial, one CSV row per sample.
pub fn write_trajectory_csv(result: &ExperimentResult, w: &mut dyn Write) -> io::Result<()> {
    let m = result.system.m();
    let n = result.system.index().players();
    writeln!(w, "{}", trajectory_header(m, n))?;
    let mut line = String::new();
    for pair in &result.pairs {
        for (trial, rec) in pair.records.iter().enumerate() {
            for s in &rec.samples {
                line.clear();
                write!(line, "{:.16e},{trial},{}", s.t, pair.pair).unwrap();
                push_row(&mut line, s.x.iter().copied());
                push_row(&mut line, s.ratio.iter().copied());
                push_row(&mut line, s.abar.iter().copied());
                push_row(&mut line, [s.lyapunov]);
                push_row(&mut line, s.eps.iter().copied());
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = v.into_iter().map(|x| format!("{x:.16e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn write_report(out: &mut String, r: &DiagnosticReport) {
    let lines = [
        ("lyapunov_first_window", r.lyapunov.first_mean),
        ("lyapunov_last_window", r.lyapunov.last_mean),
        ("lyapunov_ratio", r.lyapunov.ratio),
        ("lyapunov_trend", r.lyapunov.trailing_slope),
        ("approach_stat", r.approach_stat),
        ("attain_stat", r.attain_stat),
        ("attain_band_drift", r.attain_band_drift),
        ("ratio_norm", r.ratio_norm),
        ("core_violation_of_mean", r.core_violation_of_mean),
        ("excess_cone_violation", r.excess_cone_violation),
        ("direction_error", r.direction_error),
        ("avg_alloc_error", r.avg_alloc_error),
        ("tau_negative", r.tau_negative),
        ("tau_grand", r.tau_grand),
    ];
    for (k, v) in lines {
        writeln!(out, "{k} = {v:.16e}").unwrap();
    }
    writeln!(out, "abar = {}", fmt_vec(r.abar.iter().copied())).unwrap();
    writeln!(out, "oracle_mismatches = {}", r.oracle_mismatches).unwrap();
    writeln!(out, "clamped_steps = {}", r.clamped_steps).unwrap();
}

/// Key-value summary: settings, audit flags, one block per pair, then the
/// aggregate.
pub fn summary_text(result: &ExperimentResult) -> String {
    let cfg = &result.config;
    let mut out = String::new();
    writeln!(out, "controller = {}", cfg.controller).unwrap();
    writeln!(out, "players = {}", cfg.players).unwrap();
    writeln!(out, "pairs = {}", cfg.pairs).unwrap();
    writeln!(out, "trials = {}", cfg.trials).unwrap();
    writeln!(out, "steps = {}", cfg.steps).unwrap();
    writeln!(out, "dt = {}", cfg.effective_dt()).unwrap();
    writeln!(out, "seed = {}", cfg.seed).unwrap();
    writeln!(out, "zero_band = {}", cfg.zero_band()).unwrap();
    writeln!(
        out,
        "row_sum_bound = {:.16e}",
        result.system.matrices().dagger_row_sum_max()
    )
    .unwrap();
    if let Some(a) = result.audit {
        writeln!(out, "audit_conservative_ok = {}", a.conservative_ok).unwrap();
        let exhaustive = a.exhaustive_ok.map_or("skipped".to_string(), |b| b.to_string());
        writeln!(out, "audit_exhaustive_ok = {exhaustive}").unwrap();
        writeln!(out, "audit_flag = {}", a.flag()).unwrap();
    }
    for p in &result.pairs {
        writeln!(out, "\n[pair.{}]", p.pair).unwrap();
        writeln!(out, "support_attempts = {}", p.support.attempts).unwrap();
        write_report(&mut out, &p.report);
    }
    writeln!(out, "\n[aggregate]").unwrap();
    write_report(&mut out, &result.aggregate);
    writeln!(out, "approach_mean = {:.16e}", result.approach.mean).unwrap();
    writeln!(out, "approach_se = {:.16e}", result.approach.se).unwrap();
    if let Some(a) = result.attain {
        writeln!(out, "attain_mean = {:.16e}", a.mean).unwrap();
        writeln!(out, "attain_se = {:.16e}", a.se).unwrap();
    }
    writeln!(out, "worst_ratio_norm = {:.16e}", result.worst(|r| r.ratio_norm)).unwrap();
    writeln!(out, "worst_avg_alloc_error = {:.16e}", result.worst(|r| r.avg_alloc_error)).unwrap();
    writeln!(out, "worst_core_violation_of_mean = {:.16e}", result.worst(|r| r.core_violation_of_mean)).unwrap();
    out
}

/// Writes the trajectory CSV and the summary into the output directory.
pub fn write_outputs(result: &ExperimentResult) -> Result<()> {
    let cfg = &result.config;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = BufWriter::new(fs::File::create(cfg.trajectory_path())?);
    write_trajectory_csv(result, &mut w)?;
    w.flush()?;
    fs::write(cfg.summary_path(), summary_text(result))?;
    Ok(())
}

fn fmt_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    writeln!(out, "{name} ({}x{}):", m.nrows(), m.ncols()).unwrap();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:>9.5}")).collect();
        writeln!(out, "  {}", cells.join(" ")).unwrap();
    }
}

/// Numbers printed by `check-matrices`.
#[derive(Clone, Debug)]
pub struct MatrixCheck {
    pub nominal_residual: f64,
    pub right_inverse_residual: f64,
    pub completion_residual: f64,
    pub bf_residual: f64,
    pub cb_residual: f64,
    pub row_sum_bound: f64,
}

pub fn check_matrices(sys: &FlowSystem) -> MatrixCheck {
    let mats = sys.matrices();
    let (bf, cb) = mats.block_residuals();
    MatrixCheck {
        nominal_residual: sys.nominal_residual(),
        right_inverse_residual: mats.right_inverse_residual(),
        completion_residual: mats.completion_residual(),
        bf_residual: bf,
        cb_residual: cb,
        row_sum_bound: mats.dagger_row_sum_max(),
    }
}

pub fn matrices_report(sys: &FlowSystem) -> String {
    let mats = sys.matrices();
    let check = check_matrices(sys);
    let mut out = String::new();
    fmt_matrix(&mut out, "B", &mats.b);
    fmt_matrix(&mut out, "B_dagger", &mats.b_dagger);
    writeln!(out, "nominal_residual = {:.3e}", check.nominal_residual).unwrap();
    writeln!(out, "right_inverse_residual = {:.3e}", check.right_inverse_residual).unwrap();
    writeln!(out, "completion_residual = {:.3e}", check.completion_residual).unwrap();
    writeln!(out, "bf_residual = {:.3e}", check.bf_residual).unwrap();
    writeln!(out, "cb_residual = {:.3e}", check.cb_residual).unwrap();
    writeln!(out, "row_sum_bound = {:.6}", check.row_sum_bound).unwrap();
    out
}

/// `R` columns followed by `p`, one support point per row:
/// `point,v_1..v_m,p`.
pub fn support_csv(process: &FiniteSupportProcess) -> String {
    let r = process.support();
    let mut out = String::from("point");
    for j in 1..=r.nrows() {
        write!(out, ",v_{j}").unwrap();
    }
    out.push_str(",p\n");
    for i in 0..r.ncols() {
        write!(out, "{}", i + 1).unwrap();
        push_row(&mut out, r.column(i).iter().copied());
        push_row(&mut out, [process.probabilities()[i]]);
        out.push('\n');
    }
    out
}
