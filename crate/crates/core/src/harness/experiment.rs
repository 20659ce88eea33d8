use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_solution, EvalReport};
use crate::agro::{run_agro, PgaConfig};
use crate::ccg::{method_name, run_ccg, CcgConfig, CcgResult, Status};
use crate::error::{Error, Result};
use crate::genmetrics::{compute_metrics, MetricReport};
use crate::linalg::DenseMatrix;
use crate::neuralgen::{calibrate_latent, train_vae, VaeConfig, VaeModel};
use crate::probgen::{generate_problem, standard_normal, GeneratedProblem};
use crate::rng::{derive_seed, stream};
use crate::uncertainty::{calibrate_set, fit_classical_set, SetKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Agro { latent: usize },
    Ccg(SetKind),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Agro { latent } => write!(f, "agro-{latent}"),
            Method::Ccg(kind) => f.write_str(method_name(*kind)),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(l) = s.strip_prefix("agro-") {
            let latent: usize = l
                .parse()
                .map_err(|_| Error::Parse(format!("bad latent dimension in {s:?}")))?;
            if latent == 0 {
                return Err(Error::Parse("latent dimension must be positive".into()));
            }
            return Ok(Method::Agro { latent });
        }
        match s.strip_prefix("ccg-") {
            Some(kind) => Ok(Method::Ccg(kind.parse()?)),
            None => Err(Error::Parse(format!("unknown method {s:?}"))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `[facilities, destinations]` pairs.
    pub sizes: Vec<[usize; 2]>,
    pub trials: usize,
    pub n_samples: usize,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub delta: f64,
    pub root_seed: u64,
    /// Shared network settings; `latent_dim` and `seed` are set per method.
    pub vae: VaeConfig,
    /// Replacement settings keyed by latent dimension.
    pub vae_overrides: BTreeMap<usize, VaeConfig>,
    pub pga: PgaConfig,
    pub ccg: CcgConfig,
    pub metrics_k: usize,
    pub metrics_samples: usize,
    /// Keep every test recourse cost in the report.
    pub keep_costs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sizes: vec![[4, 3]],
            trials: 50,
            n_samples: 2500,
            methods: vec![Method::Agro { latent: 1 }, Method::Ccg(SetKind::Budget)],
            alpha: 0.95,
            delta: 0.05,
            root_seed: 0,
            vae: VaeConfig::default(),
            vae_overrides: BTreeMap::new(),
            pga: PgaConfig::default(),
            ccg: CcgConfig::default(),
            metrics_k: crate::genmetrics::DEFAULT_K,
            metrics_samples: 1000,
            keep_costs: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.iter().any(|[i, j]| *i == 0 || *j == 0) {
            return Err(Error::InvalidArgument(
                "sizes must be nonempty with positive dimensions".into(),
            ));
        }
        if self.trials == 0 || self.methods.is_empty() {
            return Err(Error::InvalidArgument(
                "need at least one trial and one method".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(
                "alpha and delta must lie in (0, 1)".into(),
            ));
        }
        let splits = crate::probgen::Splits::proportional(self.n_samples);
        let need = crate::uncertainty::min_calibration_samples(self.alpha, self.delta);
        if splits.calibration.len() < need {
            return Err(Error::InsufficientCalibration {
                got: splits.calibration.len(),
                required: need,
            });
        }
        self.vae.validate()?;
        self.pga.validate()?;
        self.ccg.validate()
    }

    pub fn vae_for(&self, latent: usize, seed: u64) -> VaeConfig {
        let base = self.vae_overrides.get(&latent).unwrap_or(&self.vae);
        VaeConfig {
            latent_dim: latent,
            seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub status: Status,
    pub iterations: usize,
    /// γ of the final main problem.
    pub gamma: f64,
    /// Calibrated radius of the uncertainty set (none for boxes).
    pub set_radius: Option<f64>,
    pub eval: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub size: [usize; 2],
    pub trial: usize,
    pub seed: u64,
    pub outcomes: Vec<MethodOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: Method,
    pub total_secs: f64,
    pub vae_train_secs: f64,
    pub subproblem_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTiming {
    pub size: [usize; 2],
    pub trial: usize,
    pub methods: Vec<MethodTiming>,
}

/// Minimum, quartiles (linear interpolation) and maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// `(total_baseline − total_agro) / total_baseline` across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub size: [usize; 2],
    pub method: Method,
    pub baseline: Method,
    pub per_trial: Vec<f64>,
    pub stats: BoxStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub size: [usize; 2],
    pub method: Method,
    pub n: usize,
    pub mean_total: f64,
    pub mean_aro_objective: f64,
    pub mean_first_stage_cost: f64,
    pub mean_gamma_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub trials: Vec<TrialResult>,
    pub failed_trials: usize,
    pub summaries: Vec<MethodSummary>,
    pub improvements: Vec<Improvement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub results: ExperimentResults,
    /// Wall-clock figures; everything else is reproducible from the config.
    pub timing: Vec<TrialTiming>,
}

pub fn trial_seed(root: u64, size_index: usize, trial: usize) -> u64 {
    derive_seed(root, "trial", &[size_index as u64, trial as u64])
}

/// `n` decoded draws from the standard normal prior.
pub fn sample_generated(model: &VaeModel, n: usize, seed: u64) -> Result<DenseMatrix> {
    let mut rng = stream(seed, "prior-samples", &[]);
    let l = model.latent_dim();
    let rows = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..l).map(|_| standard_normal(&mut rng)).collect();
            model.decode(&z)
        })
        .collect::<Result<Vec<_>>>()?;
    DenseMatrix::from_rows(&rows)
}

fn subproblem_secs(r: &CcgResult) -> f64 {
    r.trace.iter().map(|t| t.subproblem_secs).sum()
}

fn run_method(
    cfg: &ExperimentConfig,
    problem: &GeneratedProblem,
    method: Method,
    seed: u64,
) -> Result<(MethodOutcome, MethodTiming)> {
    let start = Instant::now();
    let ds = &problem.dataset;
    let test = ds.test();
    let mut vae_train_secs = 0.0;
    let mut metrics = None;
    let (result, set_radius) = match method {
        Method::Ccg(kind) => {
            let set = fit_classical_set(kind, &ds.fit_rows())?;
            let set = calibrate_set(set, &ds.calibration(), cfg.alpha, cfg.delta)?;
            let ccg = CcgConfig {
                seed: derive_seed(seed, "ccg", &[]),
                ..cfg.ccg.clone()
            };
            (run_ccg(&problem.instance, &set, &ccg)?, set.gamma)
        }
        Method::Agro { latent } => {
            let t = Instant::now();
            let model = train_vae(
                &ds.train(),
                &ds.val(),
                &cfg.vae_for(latent, derive_seed(seed, "vae", &[])),
            )?;
            vae_train_secs = t.elapsed().as_secs_f64();
            let ball = calibrate_latent(&model, &ds.calibration(), cfg.alpha, cfg.delta)?;
            let pga = PgaConfig {
                seed: derive_seed(seed, "pga", &[]),
                ..cfg.pga.clone()
            };
            let r = run_agro(&problem.instance, &model, &ball, &pga)?;
            if cfg.metrics_samples > cfg.metrics_k {
                let generated = sample_generated(
                    &model,
                    cfg.metrics_samples,
                    derive_seed(seed, "metrics", &[]),
                )?;
                metrics = Some(compute_metrics(&test, &generated, cfg.metrics_k)?);
            }
            (r.result, Some(ball.gamma))
        }
    };
    let mut eval = evaluate_solution(&problem.instance, &result.x, &test, cfg.alpha)?.with_robust(
        &method.to_string(),
        result.gamma,
        result.objective,
    );
    if !cfg.keep_costs {
        eval.recourse_costs = None;
    }
    let timing = MethodTiming {
        method,
        total_secs: start.elapsed().as_secs_f64(),
        vae_train_secs,
        subproblem_secs: subproblem_secs(&result),
    };
    let outcome = MethodOutcome {
        method,
        status: result.status,
        iterations: result.iterations(),
        gamma: result.gamma,
        set_radius,
        eval,
        metrics,
    };
    Ok((outcome, timing))
}

fn run_trial(
    cfg: &ExperimentConfig,
    size_index: usize,
    trial: usize,
) -> (TrialResult, TrialTiming) {
    let size = cfg.sizes[size_index];
    let seed = trial_seed(cfg.root_seed, size_index, trial);
    let mut result = TrialResult {
        size,
        trial,
        seed,
        outcomes: Vec::new(),
        error: None,
    };
    let mut timing = TrialTiming {
        size,
        trial,
        methods: Vec::new(),
    };
    let mut run = || -> Result<()> {
        let problem = generate_problem(size[0], size[1], cfg.n_samples, seed)?;
        let s = &problem.dataset.split;
        let disjoint = s.vae_val.end <= s.calibration.start && s.calibration.end <= s.test.start;
        if !disjoint {
            return Err(Error::InvalidArgument(
                "calibration rows overlap training or test rows".into(),
            ));
        }
        for &method in &cfg.methods {
            let method_seed = derive_seed(seed, "method", &[]);
            let method_seed = derive_seed(method_seed, &method.to_string(), &[]);
            let (o, t) = run_method(cfg, &problem, method, method_seed)
                .map_err(|e| Error::InvalidArgument(format!("{method}: {e}")))?;
            result.outcomes.push(o);
            timing.methods.push(t);
        }
        Ok(())
    };
    if let Err(e) = run() {
        result.error = Some(e.to_string());
    }
    (result, timing)
}

fn summarize(
    cfg: &ExperimentConfig,
    trials: &[TrialResult],
) -> (Vec<MethodSummary>, Vec<Improvement>) {
    let mut summaries = Vec::new();
    let mut improvements = Vec::new();
    for &size in &cfg.sizes {
        let ok: Vec<&TrialResult> = trials
            .iter()
            .filter(|t| t.size == size && t.error.is_none())
            .collect();
        let outcome = |t: &TrialResult, m: Method| {
            t.outcomes
                .iter()
                .find(|o| o.method == m)
                .map(|o| o.eval.clone())
        };
        for &m in &cfg.methods {
            let evals: Vec<EvalReport> = ok.iter().filter_map(|t| outcome(t, m)).collect();
            if evals.is_empty() {
                continue;
            }
            let n = evals.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport) -> f64| evals.iter().map(f).sum::<f64>() / n;
            summaries.push(MethodSummary {
                size,
                method: m,
                n: evals.len(),
                mean_total: mean(&|e| e.total),
                mean_aro_objective: mean(&|e| e.aro_objective.unwrap_or(f64::NAN)),
                mean_first_stage_cost: mean(&|e| e.first_stage_cost),
                mean_gamma_coverage: mean(&|e| e.gamma_coverage.unwrap_or(f64::NAN)),
            });
        }
        for &a in cfg
            .methods
            .iter()
            .filter(|m| matches!(m, Method::Agro { .. }))
        {
            for &b in cfg.methods.iter().filter(|m| matches!(m, Method::Ccg(_))) {
                let per_trial: Vec<f64> = ok
                    .iter()
                    .filter_map(|t| {
                        let (ea, eb) = (outcome(t, a)?, outcome(t, b)?);
                        Some((eb.total - ea.total) / eb.total)
                    })
                    .collect();
                if let Some(stats) = BoxStats::from_values(&per_trial) {
                    improvements.push(Improvement {
                        size,
                        method: a,
                        baseline: b,
                        per_trial,
                        stats,
                    });
                }
            }
        }
    }
    (summaries, improvements)
}

/// Every trial of every size, in parallel; failed trials are recorded, and the
/// run fails only when none succeed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.sizes.len())
        .flat_map(|s| (0..cfg.trials).map(move |t| (s, t)))
        .collect();
    let (trials, timing): (Vec<TrialResult>, Vec<TrialTiming>) =
        jobs.par_iter().map(|&(s, t)| run_trial(cfg, s, t)).unzip();
    let failed_trials = trials.iter().filter(|t| t.error.is_some()).count();
    if failed_trials == trials.len() {
        return Err(Error::AllTrialsFailed(failed_trials));
    }
    let (summaries, improvements) = summarize(cfg, &trials);
    Ok(ExperimentReport {
        config: cfg.clone(),
        results: ExperimentResults {
            trials,
            failed_trials,
            summaries,
            improvements,
        },
        timing,
    })
}

/// Box-plot rows: one per (size, method, baseline).
pub fn write_improvements_csv<W: std::io::Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "facilities",
        "destinations",
        "method",
        "baseline",
        "n",
        "mean",
        "min",
        "q1",
        "median",
        "q3",
        "max",
    ])?;
    for imp in &report.results.improvements {
        let s = imp.stats;
        w.write_record([
            imp.size[0].to_string(),
            imp.size[1].to_string(),
            imp.method.to_string(),
            imp.baseline.to_string(),
            s.n.to_string(),
            s.mean.to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
