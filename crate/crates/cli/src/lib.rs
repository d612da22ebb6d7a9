//! Command implementations behind the `csscgg` binary: fit, graph,
//! simulate and eval, each reading and writing plain files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csscgg::cggm::{fit_cggm, CggmModel, SolverOptions};
use csscgg::data::{
    load_csv, standardize, sufficient_stats, Dataset, StandardizeRecord, Which, XColumns,
};
use csscgg::graph::{
    assemble_graph, build_zeta, forward_select, ForwardSelection, GraphEstimate, Ranking,
};
use csscgg::linalg::Mat;
use csscgg::sim::{
    confusion_metrics, gaussian_kl, kl_cond_empirical, kl_marginal_x, rows_to_csv,
    run_replication_study_with, stream_seed, BlockMetrics, GroundTruth, Method, SimulationConfig,
    StudyOptions, StudyReport, XDesign,
};
use csscgg::ssanova::{
    fit_logistic_density, fit_with_cv, Lambda1Selection, Quadrature, SsAnovaModel, SsAnovaOptions,
};
use csscgg::tuning::{grid_select_with_models, Criterion, Grid, SelectionResult, TuningOptions};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Flags of a `fit` invocation, stored with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub x_cols: Vec<String>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
    pub tune: Option<Criterion>,
    pub standardize: bool,
    pub seed: u64,
    pub grid_size: usize,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::new(),
            x_cols: Vec::new(),
            lambda1: None,
            lambda2: None,
            lambda3: None,
            tune: None,
            standardize: false,
            seed: 0,
            grid_size: 10,
            folds: 5,
        }
    }
}

/// Everything `fit` produces: the covariate density, the conditional model
/// and how their tuning parameters were chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub schema_version: u32,
    pub run: RunConfig,
    /// Covariate names first, then responses.
    pub column_names: Vec<String>,
    /// Applied to the data before the conditional fit; the density is fit
    /// in the original units.
    pub standardize: Option<StandardizeRecord>,
    pub ssanova: Option<SsAnovaModel>,
    pub lambda1_selection: Option<Lambda1Selection>,
    pub cggm: CggmModel,
    pub selection: Option<SelectionResult>,
}

impl FittedModel {
    pub fn d(&self) -> usize {
        self.cggm.d()
    }

    pub fn p(&self) -> usize {
        self.cggm.p()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses and checks that the parts agree in dimension.
    pub fn from_json(s: &str) -> Result<Self> {
        let m: FittedModel = serde_json::from_str(s)?;
        if m.schema_version != SCHEMA_VERSION {
            bail!("unsupported model schema_version {}", m.schema_version);
        }
        let (d, p) = (m.d(), m.p());
        if m.column_names.len() != d + p {
            bail!(
                "model lists {} column names for {} variables",
                m.column_names.len(),
                d + p
            );
        }
        match &m.ssanova {
            Some(s) if s.d() != d => bail!(
                "density has {} covariates, conditional model has {d}",
                s.d()
            ),
            None if d > 0 => bail!("model with {d} covariates lacks a density"),
            _ => {}
        }
        if let Some(r) = &m.standardize {
            let ok = |v: &[f64], k: usize| v.len() == k && v.iter().all(|s| s.is_finite());
            let pos = |v: &[f64]| v.iter().all(|s| *s > 0.0);
            if !(ok(&r.x_mean, d) && ok(&r.x_scale, d) && ok(&r.y_mean, p) && ok(&r.y_scale, p))
                || !(pos(&r.x_scale) && pos(&r.y_scale))
            {
                bail!("standardization record does not match the model");
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = read(path)?;
        Self::from_json(&s).with_context(|| format!("malformed model {}", path.display()))
    }

    pub fn x_names(&self) -> &[String] {
        &self.column_names[..self.d()]
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Fits the density of the covariate block and the conditional model.
pub fn fit(cfg: &RunConfig) -> Result<FittedModel> {
    let raw = load_csv(&cfg.data, &XColumns::Names(cfg.x_cols.clone()))?;
    fit_dataset(&raw, cfg)
}

pub fn fit_dataset(raw: &Dataset, cfg: &RunConfig) -> Result<FittedModel> {
    let (ds, record) = if cfg.standardize {
        let (s, r) = standardize(raw, Which::Both)?;
        (s, Some(r))
    } else {
        (raw.clone(), None)
    };
    let (ssanova, lambda1_selection) = if raw.d() > 0 {
        let opts = SsAnovaOptions {
            seed: stream_seed(cfg.seed, 2),
            folds: cfg.folds,
            ..Default::default()
        };
        match cfg.lambda1 {
            Some(l1) => (
                Some(fit_logistic_density(&raw.x, l1, None, None, &opts)?),
                None,
            ),
            None => {
                let (m, sel) = fit_with_cv(&raw.x, None, &opts)?;
                (Some(m), Some(sel))
            }
        }
    } else {
        (None, None)
    };
    let stats = sufficient_stats(&ds);
    let solver = SolverOptions::default();
    let (cggm, selection) = match (cfg.lambda2, cfg.lambda3) {
        (Some(a), Some(b)) => (fit_cggm(&stats, a, b, &solver)?, None),
        (None, None) => {
            let criterion = cfg.tune.unwrap_or(Criterion::Lookl);
            let grid = Grid::default_for(&stats, cfg.grid_size);
            let topts = TuningOptions {
                solver,
                folds: cfg.folds,
                seed: stream_seed(cfg.seed, 1),
                ..Default::default()
            };
            let (sel, model) = grid_select_with_models(&ds, &grid, criterion, &topts)?;
            (model, Some(sel))
        }
        _ => bail!("give both --lambda2 and --lambda3, or neither"),
    };
    Ok(FittedModel {
        schema_version: SCHEMA_VERSION,
        run: cfg.clone(),
        column_names: raw.column_names.clone(),
        standardize: record,
        ssanova,
        lambda1_selection,
        cggm,
        selection,
    })
}

/// Human-readable convergence and selection summary.
pub fn fit_summary(m: &FittedModel) -> String {
    let mut s = String::new();
    if let Some(ss) = &m.ssanova {
        s += &format!(
            "density: d={} λ1={:.3e} converged={} iterations={} mass={:.6}\n",
            ss.d(),
            ss.lambda1,
            ss.converged,
            ss.iterations,
            ss.total_mass()
        );
    }
    let c = &m.cggm;
    let (nl, nt) = c.nonzero_counts();
    s += &format!(
        "conditional model: p={} λ2={:.3e} λ3={:.3e} converged={} iterations={} kkt={:.2e} nonzero Λ={nl} Θ={nt}\n",
        c.p(),
        c.lambda2,
        c.lambda3,
        c.converged,
        c.iterations,
        c.diagnostics.kkt_residual
    );
    if let Some(sel) = &m.selection {
        s += &format!("selection by {:?}\n", sel.criterion);
        s += &sel.table();
    }
    s
}

pub fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<FittedModel> {
    let m = fit(cfg)?;
    write(out, &m.to_json()?)?;
    print!("{}", fit_summary(&m));
    Ok(m)
}

/// Graph of a fitted model with the covariate selection trace.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphOutput {
    pub graph: GraphEstimate,
    pub selection: Option<ForwardSelection>,
}

pub fn graph(m: &FittedModel, cutoff: f64, ranking: Ranking) -> Result<GraphOutput> {
    let d = m.d();
    let selection = match &m.ssanova {
        Some(ss) if d >= 2 => {
            let zeta = build_zeta(ss, &m.cggm, m.standardize.as_ref())?;
            Some(forward_select(&zeta, cutoff, ranking)?)
        }
        _ => None,
    };
    let pi = match &selection {
        Some(s) => s.pi.clone(),
        None => vec![vec![0; d]; d],
    };
    let graph = assemble_graph(
        &m.cggm,
        &pi,
        selection.as_ref().map(|s| &s.pairwise),
        Some(m.column_names.clone()),
    )?;
    Ok(GraphOutput { graph, selection })
}

/// Writes each output in the format named by its extension: `.tsv`,
/// `.dot` or `.json`.
pub fn cmd_graph(
    model: &Path,
    cutoff: f64,
    ranking: Ranking,
    outs: &[PathBuf],
    trace: Option<&Path>,
) -> Result<GraphOutput> {
    let m = FittedModel::load(model)?;
    let g = graph(&m, cutoff, ranking)?;
    for out in outs {
        let body = match out.extension().and_then(|e| e.to_str()) {
            Some("tsv") => g.graph.to_tsv(),
            Some("dot") => g.graph.to_dot(),
            Some("json") => g.graph.to_json()? + "\n",
            _ => bail!(
                "cannot tell the format of {} (use .tsv, .dot or .json)",
                out.display()
            ),
        };
        write(out, &body)?;
    }
    if let Some(path) = trace {
        write(path, &(serde_json::to_string_pretty(&g.selection)? + "\n"))?;
    }
    println!("{} edges", g.graph.edge_count());
    if let Some(s) = &g.selection {
        let ratios: Vec<String> = s.ratios.iter().map(|r| format!("{r:.4}")).collect();
        println!("covariate selection ratios: {}", ratios.join(" "));
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Table1,
    Table2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateArgs {
    pub preset: Preset,
    pub sigma: Option<f64>,
    pub omega: Option<f64>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub d: Option<usize>,
    pub edge_prob: Option<f64>,
    pub x_edge_prob: Option<f64>,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub grid_size: usize,
    pub cutoff: f64,
    /// Also write each replication's data and truth.
    pub write_data: bool,
}

impl SimulateArgs {
    pub fn config(&self) -> Result<SimulationConfig> {
        let mut c = match self.preset {
            Preset::Table1 => {
                SimulationConfig::table1(self.omega.unwrap_or(0.9), self.sigma.unwrap_or(0.5), 0)
            }
            Preset::Table2 => {
                if self.sigma.is_some() || self.omega.is_some() {
                    bail!("--sigma and --omega apply to the mixture preset only");
                }
                SimulationConfig::table2(200, 0)
            }
        };
        if let Some(d) = self.d {
            if matches!(c.x_design, XDesign::Mixture(_)) && d != 3 {
                bail!("the mixture preset has d = 3");
            }
            c.d = d;
        }
        c.n = self.n.unwrap_or(c.n);
        c.p = self.p.unwrap_or(c.p);
        c.edge_prob = self.edge_prob.unwrap_or(c.edge_prob);
        c.x_edge_prob = self.x_edge_prob.or(c.x_edge_prob);
        c.validate()?;
        Ok(c)
    }

    pub fn study_options(&self) -> StudyOptions {
        StudyOptions {
            methods: self.methods.clone(),
            grid_size: self.grid_size,
            cutoff: self.cutoff,
            ..Default::default()
        }
    }
}

fn data_csv(ds: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&ds.column_names)?;
    for i in 0..ds.n() {
        let row: Vec<String> =
            ds.x.row(i)
                .iter()
                .chain(ds.y.row(i).iter())
                .map(|v| v.to_string())
                .collect();
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Runs the study, writing `replications.csv` and `summary.json` under
/// `out`. Each finished replication is also written to
/// `replications/rep_<k>.csv` as soon as it completes, so an interrupted
/// run keeps its finished replications.
pub fn cmd_simulate(args: &SimulateArgs, out: &Path) -> Result<StudyReport> {
    let cfg = args.config()?;
    let opts = args.study_options();
    if args.reps == 0 {
        bail!("--reps must be at least 1");
    }
    fs::create_dir_all(out.join("replications"))
        .with_context(|| format!("cannot create {}", out.display()))?;
    if args.write_data {
        for k in 0..args.reps {
            let c = SimulationConfig {
                seed: stream_seed(args.seed, k as u64),
                ..cfg.clone()
            };
            let (truth, ds) = csscgg::sim::simulate(&c)?;
            write(&out.join(format!("data/rep_{k:04}.csv")), &data_csv(&ds)?)?;
            write(
                &out.join(format!("data/truth_{k:04}.json")),
                &(truth.to_json()? + "\n"),
            )?;
        }
    }
    let on_done = |k: usize, r: &csscgg::Result<Vec<csscgg::sim::ReplicationRow>>| {
        let path = out.join(format!("replications/rep_{k:04}.csv"));
        let body = match r {
            Ok(rows) => rows_to_csv(rows),
            Err(e) => format!("# failed: {e}\n"),
        };
        if let Err(e) = write(&path, &body) {
            eprintln!("warning: {e:#}");
        }
    };
    let report = run_replication_study_with(&cfg, &opts, args.reps, args.seed, &on_done)?;
    write(&out.join("replications.csv"), &report.to_csv())?;
    write(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    for (method, metrics) in &report.summary {
        let get = |k: &str| metrics.get(k).map_or(f64::NAN, |s| s.mean);
        println!(
            "{method}: kl_overall={:.4} kl_cond={:.4} overall_f1={:.3}",
            get("kl_overall"),
            get("kl_cond"),
            get("overall_f1")
        );
    }
    if !report.failures.is_empty() {
        bail!(
            "{} of {} replications failed: {}",
            report.failures.len(),
            args.reps,
            report.failures.join("; ")
        );
    }
    Ok(report)
}

/// Named metrics of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub metrics: BTreeMap<String, f64>,
}

/// What a model is evaluated against.
pub enum Truth {
    Parameters(GroundTruth),
    Model(Box<FittedModel>),
}

impl Truth {
    /// Accepts a ground-truth file or another fitted model.
    pub fn from_json(s: &str) -> Result<Self> {
        if let Ok(m) = FittedModel::from_json(s) {
            return Ok(Truth::Model(Box::new(m)));
        }
        Ok(Truth::Parameters(
            GroundTruth::from_json(s).context("neither a ground truth nor a model")?,
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?).with_context(|| format!("malformed truth {}", path.display()))
    }
}

fn put_block(metrics: &mut BTreeMap<String, f64>, name: &str, b: &BlockMetrics) {
    metrics.insert(format!("{name}_sen"), b.sen);
    metrics.insert(format!("{name}_spe"), b.spe);
    metrics.insert(format!("{name}_f1"), b.f1);
}

/// Order-independent sum.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `E KL(f0(y|x) ‖ f̂(y|x))` for `x` with second moment `moment`, from the
/// closed form: the conditional means differ by `B x`.
fn kl_cond_moment(truth: &CggmModel, model: &CggmModel, moment: &Mat) -> Result<f64> {
    let p = model.p();
    let zero = vec![0.0; p];
    let base = gaussian_kl(&zero, &truth.sigma, &zero, &model.sigma)?;
    if model.d() == 0 {
        return Ok(base);
    }
    let b = &model.sigma * model.theta.transpose() - &truth.sigma * truth.theta.transpose();
    let quad = b.transpose() * &model.lambda * &b;
    Ok(base + 0.5 * (quad.component_mul(moment)).sum())
}

/// KL family and graph recovery against `truth`. Conditional KL averages
/// over the rows of `data` when given, and otherwise over the model's
/// covariate density.
pub fn eval_truth(
    m: &FittedModel,
    truth: &Truth,
    data: Option<&Dataset>,
    cutoff: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let (t_cggm, t_graph, score_xx) = match truth {
        Truth::Parameters(g) => {
            if m.standardize.is_some() {
                bail!("a standardized model has no counterpart in the units of a ground truth");
            }
            (g.cggm()?, g.graph()?, g.x_adjacency.is_some())
        }
        Truth::Model(t) => {
            if t.standardize != m.standardize {
                bail!("truth and model use different standardizations");
            }
            let g = graph(t, cutoff, Ranking::Upfront)?.graph;
            (t.cggm.clone(), g, t.d() >= 2)
        }
    };
    if t_cggm.d() != m.d() || t_cggm.p() != m.p() {
        bail!(
            "truth has d={}, p={}; model has d={}, p={}",
            t_cggm.d(),
            t_cggm.p(),
            m.d(),
            m.p()
        );
    }
    let kl_cond = match (data, &m.ssanova) {
        (Some(ds), _) => {
            let x = model_x(m, ds)?;
            kl_cond_empirical(&t_cggm.theta, &t_cggm.lambda, &m.cggm, &x)?
        }
        (None, Some(ss)) => kl_cond_moment(&t_cggm, &m.cggm, &ss.second_moment())?,
        (None, None) => kl_cond_moment(&t_cggm, &m.cggm, &Mat::zeros(0, 0))?,
    };
    out.insert("kl_cond".into(), kl_cond);
    if let (Truth::Model(t), Some(ss)) = (truth, &m.ssanova) {
        let ts = t.ssanova.as_ref().expect("checked on load");
        let kl = kl_marginal_x(
            &|x| ts.log_density(x).unwrap_or(f64::NAN),
            &|x| ss.log_density(x).unwrap_or(f64::NEG_INFINITY),
            &ts.domain,
            &Quadrature::new(ts.quadrature.rule.clone(), ts.d())?,
        )?;
        out.insert("kl_x".into(), kl.kl);
        out.insert("kl_overall".into(), kl.kl + kl_cond);
    }
    let est = graph(m, cutoff, Ranking::Upfront)?.graph;
    let conf = confusion_metrics(&est, &t_graph, score_xx)?;
    if let Some(xx) = &conf.xx {
        put_block(&mut out, "xx", xx);
    }
    put_block(&mut out, "xy", &conf.xy);
    put_block(&mut out, "yy", &conf.yy);
    put_block(&mut out, "overall", &conf.overall);
    Ok(out)
}

/// Covariate rows in the coordinates of the conditional model.
fn model_x(m: &FittedModel, ds: &Dataset) -> Result<Mat> {
    check_data(m, ds)?;
    Ok(match &m.standardize {
        Some(r) => r.apply(ds)?.x,
        None => ds.x.clone(),
    })
}

fn check_data(m: &FittedModel, ds: &Dataset) -> Result<()> {
    if ds.d() != m.d() || ds.p() != m.p() {
        bail!(
            "data has {} covariates and {} responses; model expects {} and {}",
            ds.d(),
            ds.p(),
            m.d(),
            m.p()
        );
    }
    Ok(())
}

/// Mean held-out log-likelihood in the original units. Covariate rows
/// outside the density's box have zero density; they are counted and left
/// out of `loglik_x`.
pub fn eval_data(m: &FittedModel, ds: &Dataset) -> Result<BTreeMap<String, f64>> {
    check_data(m, ds)?;
    let n = ds.n();
    let (z, log_jac) = match &m.standardize {
        Some(r) => (r.apply(ds)?, -r.y_scale.iter().map(|s| s.ln()).sum::<f64>()),
        None => (ds.clone(), 0.0),
    };
    let cond: Vec<f64> = (0..n)
        .map(|i| {
            let x: Vec<f64> = z.x.row(i).iter().copied().collect();
            let y: Vec<f64> = z.y.row(i).iter().copied().collect();
            m.cggm.log_density(&x, &y) + log_jac
        })
        .collect();
    let mut out = BTreeMap::new();
    out.insert("n".into(), n as f64);
    let loglik_cond = sorted_sum(cond) / n as f64;
    out.insert("loglik_cond".into(), loglik_cond);
    if let Some(ss) = &m.ssanova {
        let mut inside = Vec::with_capacity(n);
        for i in 0..n {
            let x: Vec<f64> = ds.x.row(i).iter().copied().collect();
            if let Ok(v) = ss.log_density(&x) {
                inside.push(v);
            }
        }
        let k = inside.len();
        out.insert("x_outside_box".into(), (n - k) as f64);
        if k > 0 {
            let lx = sorted_sum(inside) / k as f64;
            out.insert("loglik_x".into(), lx);
            out.insert("loglik".into(), lx + loglik_cond);
        }
    } else {
        out.insert("loglik".into(), loglik_cond);
    }
    Ok(out)
}

pub fn evaluate(
    m: &FittedModel,
    truth: Option<&Truth>,
    data: Option<&Dataset>,
    cutoff: f64,
) -> Result<MetricsReport> {
    let mut metrics = BTreeMap::new();
    match (truth, data) {
        (None, None) => bail!("give a truth file, a data file, or both"),
        (Some(t), d) => metrics.append(&mut eval_truth(m, t, d, cutoff)?),
        (None, Some(ds)) => metrics.append(&mut eval_data(m, ds)?),
    }
    if let (Some(_), Some(ds)) = (truth, data) {
        for (k, v) in eval_data(m, ds)? {
            metrics.insert(k, v);
        }
    }
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        metrics,
    })
}

pub fn cmd_eval(
    model: &Path,
    truth: Option<&Path>,
    data: Option<&Path>,
    cutoff: f64,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let m = FittedModel::load(model)?;
    let truth = truth.map(Truth::load).transpose()?;
    let data = data
        .map(|p| load_csv(p, &XColumns::Names(m.x_names().to_vec())))
        .transpose()?;
    let report = evaluate(&m, truth.as_ref(), data.as_ref(), cutoff)?;
    let body = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(path) = out {
        write(path, &body)?;
    }
    print!("{body}");
    Ok(report)
}
