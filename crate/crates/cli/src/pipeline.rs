//! The four commands: generate, train, evaluate, repro.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pnde_core::dataset::{Dataset, DatasetMeta};
use pnde_core::metrics::{constraint_error, mean_std, median, ErrorSeries, TrajectoryErrors};
use pnde_core::models::{FieldKind, FieldSpec, MlpParams};
use pnde_core::solvers::{adaptive_solve, AdaptiveOptions, SolveStats};
use pnde_core::systems::{Coordinates, GenerateSpec, PendulumSystem, System};
use pnde_core::training::{LogRow, Phase, Split, Trainer, TrajectoryDataset};
use pnde_core::{ConstraintSet, Error, Parallelism};
use serde::{Deserialize, Serialize};

use crate::config::{model_id, RunConfig};
use crate::report::{CheckResult, ModelReport, Provenance, RunReport};

/// Failure of a command, carrying the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("model {model} failed")]
    Model {
        model: String,
        #[source]
        source: Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{} acceptance check(s) failed", .0.iter().filter(|c| !c.passed).count())]
    Acceptance(Vec<CheckResult>),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            RunError::Acceptance(_) => return 4,
            RunError::Model { source, .. } => source,
            RunError::Core(e) => e,
        };
        match core {
            Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Shape { .. } | Error::Contract(_) => 2,
            _ => 3,
        }
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

/// A configured run rooted at an output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub parallelism: Parallelism,
}

/// Contents of the `.toml` file written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub system: String,
    pub dim: usize,
    pub kind: FieldKind,
    pub config_hash: String,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> RunResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e).into())
}

impl Run {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            parallelism: Parallelism::Auto,
        }
    }

    pub fn data_path(&self, split: Split) -> PathBuf {
        self.out.join("data").join(format!("{}.bin", split.name()))
    }

    pub fn checkpoint_path(&self, kind: &FieldKind) -> PathBuf {
        self.out.join("models").join(format!("{}.ckpt", model_id(kind)))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join("report.json")
    }

    fn system(&self) -> RunResult<System> {
        Ok(self.config.system.build()?)
    }

    fn mkdir(&self, sub: &str) -> RunResult<()> {
        let dir = self.out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(())
    }

    /// Load a dataset and reject it unless it was generated for this system.
    fn load_split(&self, system: &System, split: Split) -> RunResult<Dataset> {
        let ds = Dataset::load(&self.data_path(split))?;
        if ds.tag != system.tag() || ds.dim != system.dim() {
            return Err(Error::Config(format!(
                "{} dataset is for system '{}' (dim {}), config is '{}' (dim {})",
                split.name(),
                ds.tag,
                ds.dim,
                system.tag(),
                system.dim()
            ))
            .into());
        }
        Ok(ds)
    }

    pub fn generate(&self) -> RunResult<()> {
        let system = self.system()?;
        let d = &self.config.data;
        self.mkdir("data")?;
        let splits = [
            (Split::Train, d.train, d.steps),
            (Split::Valid, d.valid, d.steps),
            (Split::Test, d.test, d.test_steps),
        ];
        for (i, (split, count, steps)) in splits.into_iter().enumerate() {
            let spec = GenerateSpec {
                count,
                steps,
                dt: d.dt,
                tol: d.tolerance,
                seed: self.config.seed,
                stream: (i as u64) << 32,
            };
            let trajs = system.generate(&spec, self.parallelism)?;
            let ds = Dataset {
                tag: system.tag().to_string(),
                dim: system.dim(),
                dt: d.dt,
                trajectories: trajs.into_iter().map(|t| t.states).collect(),
            };
            let meta = DatasetMeta {
                split,
                seed: self.config.seed,
                tolerance: d.tolerance,
                system: self.config.system.clone(),
            };
            ds.save(&self.data_path(split), &meta)?;
        }
        Ok(())
    }

    pub fn train(&self) -> RunResult<Vec<LogRow>> {
        let system = self.system()?;
        let train = self.load_split(&system, Split::Train)?;
        let valid = self.load_split(&system, Split::Valid)?;
        let train = TrajectoryDataset::from_trajectories(Split::Train, &train.trajectories, train.dt);
        let valid = TrajectoryDataset::from_trajectories(Split::Valid, &valid.trajectories, valid.dt);
        self.mkdir("models")?;

        let base = self.config.train_config(FieldKind::Nde);
        let trainer = Trainer::new(&system, &base, &train, &valid, self.parallelism)?;
        let pre = trainer
            .pretrain(system.dim())
            .map_err(|source| RunError::Model {
                model: "pretrain".into(),
                source,
            })?;
        pre.params.save(&self.out.join("models").join("pretrained.ckpt"))?;

        let epochs = self.config.train.finetune_epochs;
        let tuned = self.parallelism.map(&self.config.roster, |_, kind| {
            trainer
                .run_phase(pre.params.clone(), *kind, Phase::Finetune, epochs)
                .map_err(|source| RunError::Model {
                    model: model_id(kind),
                    source,
                })
        });

        let hash = self.config.hash();
        let mut csv = String::from("model,");
        csv.push_str(&pnde_core::training::log_csv(&[]));
        let mut rows = Vec::new();
        let mut push = |model: &str, log: &[LogRow]| {
            for line in pnde_core::training::log_csv(log).lines().skip(1) {
                csv.push_str(model);
                csv.push(',');
                csv.push_str(line);
                csv.push('\n');
            }
            rows.extend_from_slice(log);
        };
        push("pretrain", &pre.log);
        for (kind, outcome) in self.config.roster.iter().zip(tuned) {
            let outcome = outcome?;
            let path = self.checkpoint_path(kind);
            outcome.params.save(&path)?;
            let meta = CheckpointMeta {
                system: system.tag().to_string(),
                dim: system.dim(),
                kind: *kind,
                config_hash: hash.clone(),
            };
            write(&path.with_extension("toml"), &toml::to_string(&meta).expect("meta serializes"))?;
            push(&model_id(kind), &outcome.log);
        }
        write(&self.out.join("train_log.csv"), &csv)?;
        Ok(rows)
    }

    fn load_model(&self, system: &System, kind: &FieldKind) -> RunResult<Arc<MlpParams>> {
        let path = self.checkpoint_path(kind);
        let sidecar = path.with_extension("toml");
        let text = fs::read_to_string(&sidecar).map_err(|e| io_err(&sidecar, e))?;
        let meta: CheckpointMeta =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
        if meta.system != system.tag() || meta.dim != system.dim() || meta.kind != *kind {
            return Err(Error::Config(format!(
                "checkpoint {} is a {} model for '{}' (dim {}), expected {} for '{}' (dim {})",
                path.display(),
                meta.kind.label(),
                meta.system,
                meta.dim,
                kind.label(),
                system.tag(),
                system.dim()
            ))
            .into());
        }
        Ok(Arc::new(MlpParams::load_for_dim(&path, system.dim())?))
    }

    pub fn evaluate(&self) -> RunResult<RunReport> {
        let system = self.system()?;
        let test = self.load_split(&system, Split::Test)?;
        let models = self
            .config
            .roster
            .iter()
            .map(|k| self.load_model(&system, k))
            .collect::<RunResult<Vec<_>>>()?;

        let view = MetricView::new(&system, self.config.eval.cartesian_metrics);
        let times = test.times();
        let horizon = times.last().copied().unwrap_or(0.0);
        let opts = AdaptiveOptions {
            rtol: self.config.eval.tolerance,
            atol: self.config.eval.tolerance,
            save_dt: test.dt,
            max_steps: self.config.eval.max_steps,
        };
        let jobs: Vec<(FieldKind, Arc<MlpParams>)> = self.config.roster.iter().copied().zip(models).collect();
        let reports = self.parallelism.map(&jobs, |_, (kind, params)| {
            let outcomes = self.parallelism.map(&test.trajectories, |_, truth| {
                rollout(&system, &view, *kind, params, truth, (0.0, horizon), &opts)
            });
            summarize(*kind, &times, outcomes, view.bounded)
        });
        let models = reports.into_iter().collect::<pnde_core::Result<Vec<_>>>()?;

        let report = RunReport {
            name: self.config.name.clone(),
            system: system.tag().to_string(),
            error_metric: if view.bounded { "bounded_relative" } else { "relative" }.into(),
            test_trajectories: test.trajectories.len(),
            horizon,
            provenance: Provenance {
                seed: self.config.seed,
                config_hash: self.config.hash(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            models,
            checks: Vec::new(),
        };
        self.write_report(&report)?;
        Ok(report)
    }

    fn write_report(&self, report: &RunReport) -> RunResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        write(&self.report_path(), &report.to_json())?;
        write(&self.out.join("series.csv"), &report.series_csv())?;
        write(&self.out.join("summary.csv"), &report.summary_csv())
    }

    /// Generate, train, evaluate, then apply the configured checks. The
    /// report is written with the check results either way.
    pub fn repro(&self) -> RunResult<RunReport> {
        self.generate()?;
        self.train()?;
        let mut report = self.evaluate()?;
        report.checks = run_checks(&self.config, &report);
        self.write_report(&report)?;
        if report.checks.iter().any(|c| !c.passed) {
            return Err(RunError::Acceptance(report.checks));
        }
        Ok(report)
    }
}

/// How predicted and true states are compared.
struct MetricView {
    /// Pendulum in angles, compared after mapping to Cartesian coordinates.
    to_cartesian: Option<PendulumSystem>,
    bounded: bool,
}

impl MetricView {
    fn new(system: &System, cartesian_metrics: bool) -> Self {
        match system {
            System::Pendulum(p) => Self {
                to_cartesian: (cartesian_metrics && p.coordinates == Coordinates::Generalized).then(|| p.clone()),
                bounded: true,
            },
            _ => Self {
                to_cartesian: None,
                bounded: false,
            },
        }
    }

    fn states(&self, states: &[Vec<f64>]) -> Vec<Vec<f64>> {
        match &self.to_cartesian {
            Some(p) => states.iter().map(|s| p.cartesian_from_generalized(s)).collect(),
            None => states.to_vec(),
        }
    }

    fn constraints(&self, system: &System, u0: &[f64]) -> pnde_core::Result<Option<Arc<dyn ConstraintSet>>> {
        match &self.to_cartesian {
            Some(p) => Ok(Some(Arc::new(p.constraints()))),
            None => system.constraints_for(u0),
        }
    }
}

enum Outcome {
    Done {
        errors: TrajectoryErrors,
        max_abs: Option<f64>,
        stats: SolveStats,
    },
    Stiff(SolveStats),
    Failed(String),
}

fn rollout(
    system: &System,
    view: &MetricView,
    kind: FieldKind,
    params: &Arc<MlpParams>,
    truth: &[Vec<f64>],
    span: (f64, f64),
    opts: &AdaptiveOptions,
) -> pnde_core::Result<Outcome> {
    let u0 = &truth[0];
    let c = if kind.needs_constraints() { system.constraints_for(u0)? } else { None };
    let field = FieldSpec::new(kind, Arc::clone(params), c)?;
    let traj = match adaptive_solve(&|u: &[f64]| field.eval(u), u0, span, opts) {
        Ok(t) => t,
        Err(Error::Stiffness { stats, .. }) => return Ok(Outcome::Stiff(stats)),
        Err(e @ (Error::Divergence { .. } | Error::NonFinite { .. } | Error::SingularProjection { .. })) => {
            return Ok(Outcome::Failed(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    if traj.states.len() != truth.len() {
        return Err(Error::Numeric(format!(
            "prediction has {} states, test trajectory {}",
            traj.states.len(),
            truth.len()
        )));
    }
    let metric_c = view.constraints(system, u0)?;
    let pred = view.states(&traj.states);
    let errors = match TrajectoryErrors::compute(&view.states(truth), &pred, metric_c.as_deref()) {
        Ok(e) => e,
        Err(e @ Error::UndefinedMetric(_)) => return Ok(Outcome::Failed(e.to_string())),
        Err(e) => return Err(e),
    };
    let max_abs = metric_c.map(|c| {
        constraint_error(c.as_ref(), &pred)
            .max_abs
            .into_iter()
            .fold(0.0, f64::max)
    });
    Ok(Outcome::Done {
        errors,
        max_abs,
        stats: traj.stats,
    })
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn summarize(
    kind: FieldKind,
    times: &[f64],
    outcomes: Vec<pnde_core::Result<Outcome>>,
    bounded: bool,
) -> pnde_core::Result<ModelReport> {
    let mut done = Vec::new();
    let mut evals = Vec::new();
    let mut max_abs: Option<f64> = None;
    let mut partial_stats = Vec::new();
    let mut failures = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o? {
            Outcome::Done {
                errors,
                max_abs: m,
                stats,
            } => {
                evals.push(stats.f_evals as f64);
                if let Some(m) = m {
                    max_abs = Some(max_abs.map_or(m, |x| x.max(m)));
                }
                done.push(errors);
            }
            Outcome::Stiff(stats) => {
                evals.push(stats.f_evals as f64);
                failures.push(format!("trajectory {i}: stiff after {stats}"));
                partial_stats.push(stats);
            }
            Outcome::Failed(msg) => failures.push(format!("trajectory {i}: {msg}")),
        }
    }

    let stat = |xs: Vec<f64>| {
        let (m, s) = mean_std(&xs);
        (finite(m), finite(s))
    };
    let (state_mse_mean, state_mse_std) = stat(done.iter().map(|e| e.state_mse()).collect());
    let cmse: Option<Vec<f64>> = done.iter().map(|e| e.constraint_mse()).collect();
    let (constraint_mse_mean, constraint_mse_std) = cmse.map_or((None, None), stat);
    let final_constraint_mse_mean = done
        .iter()
        .map(|e| e.constraint.last().copied())
        .collect::<Option<Vec<f64>>>()
        .and_then(|v| stat(v).0);
    let horizon = |e: &TrajectoryErrors| {
        let s = if bounded { &e.bounded } else { &e.relative };
        s.last().copied().unwrap_or(f64::NAN)
    };
    let (horizon_error_mean, horizon_error_std) = stat(done.iter().map(horizon).collect());
    let series = if done.is_empty() {
        ErrorSeries {
            times: times.to_vec(),
            ..ErrorSeries::default()
        }
    } else {
        ErrorSeries::aggregate(times, &done)?
    };

    Ok(ModelReport {
        id: model_id(&kind),
        kind,
        completed: done.len(),
        state_mse_mean,
        state_mse_std,
        constraint_mse_mean,
        constraint_mse_std,
        final_constraint_mse_mean,
        max_constraint_violation: max_abs,
        horizon_error_mean,
        horizon_error_std,
        f_evals_median: finite(median(&evals)),
        stiff: !partial_stats.is_empty(),
        stiff_trajectories: partial_stats.len(),
        partial_stats,
        failures,
        series,
    })
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn missing(name: &str, what: &str) -> CheckResult {
    check(name, false, format!("no value for {what}"))
}

fn metric(report: &RunReport, kind: FieldKind, pick: fn(&ModelReport) -> Option<f64>) -> Option<f64> {
    report.model(kind).and_then(pick)
}

/// Evaluate the thresholds in `config.checks` against a report.
pub fn run_checks(config: &RunConfig, report: &RunReport) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let c = &config.checks;
    let snde = |gamma: f64| FieldKind::Snde { gamma };

    if let Some(gap) = c.pnde_snde_gap {
        let name = "pnde_snde_gap";
        let p = metric(report, FieldKind::Pnde, |m| m.constraint_mse_mean);
        let s = metric(report, snde(1.0), |m| m.constraint_mse_mean);
        out.push(match (p, s) {
            (Some(p), Some(s)) => check(
                name,
                p * gap <= s,
                format!("constraint MSE: pnde {p:e}, snde_g1 {s:e}; need ratio >= {gap:e}, got {:e}", s / p),
            ),
            _ => missing(name, "pnde or snde_g1 constraint MSE"),
        });
    }

    if let Some(factor) = c.snde_decade_factor {
        let name = "snde_decade_factor";
        let vals: Option<Vec<f64>> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&g| metric(report, snde(g), |m| m.final_constraint_mse_mean))
            .collect();
        out.push(match vals {
            Some(v) => {
                let ok = v.windows(2).all(|w| w[1] * factor <= w[0] && w[1] < w[0]);
                check(
                    name,
                    ok,
                    format!(
                        "final constraint MSE at gamma 0.1, 1, 10: {:e}, {:e}, {:e}; need >= {factor}x drop per decade",
                        v[0], v[1], v[2]
                    ),
                )
            }
            None => missing(name, "snde_g0.1/g1/g10 final constraint MSE"),
        });
    }

    if let Some(ratio) = c.stiffness_ratio {
        let name = "stiffness_ratio";
        let p = metric(report, FieldKind::Pnde, |m| m.f_evals_median);
        let s = metric(report, snde(100.0), |m| m.f_evals_median);
        out.push(match (p, s) {
            (Some(p), Some(s)) => check(
                name,
                s >= ratio * p,
                format!("median f_evals: snde_g100 {s}, pnde {p}; need ratio >= {ratio}, got {:.3}", s / p),
            ),
            _ => missing(name, "pnde or snde_g100 f_evals"),
        });
    }

    if let Some(bound) = c.pnde_max_drift {
        let name = "pnde_max_drift";
        out.push(match metric(report, FieldKind::Pnde, |m| m.max_constraint_violation) {
            Some(v) => check(name, v <= bound, format!("pnde max |g|: {v:e}, bound {bound:e}")),
            None => missing(name, "pnde constraint violation"),
        });
    }

    out
}
