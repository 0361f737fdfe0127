use std::path::Path;
use std::str::FromStr;

use gpevidence::data::{load_csv, normalize, sample_from_gp_prior, write_csv as write_dataset, Normalization};
use gpevidence::kernels::{parse_kernel, BaseKernel, KernelExpr};
use gpevidence::laplace::{confidence_ellipse, criteria_suite, EllipseSpec, EvaluationResult, LaplaceVariant};
use gpevidence::model::{build_prior, GPModel, GpLikelihood};
use gpevidence::oracle::{
    nested_sampling_evidence, quadrature_evidence, sample_fraction_inside, weighted_fraction_inside,
    write_posterior_csv, EvidenceEstimate, NestedOptions,
};
use gpevidence::search::{cks_search, recognition_check, SearchSummary, SearchTrace};
use gpevidence::{linear_benchmark_dataset, Criterion, Dataset, Error, FitOptions, Generator, GeneratorSpec, Result};
use serde::Serialize;

use crate::args::{
    Cli, Command, DataArgs, EllipseArgs, EvaluateArgs, FitArgs, Format, GenerateArgs, Method, NestedArgs, OracleArgs,
    SearchArgs,
};
use crate::exit;
use crate::output::{opt, sink, write_csv, write_json, Provenance};

pub const BENCHMARK_ALIAS: &str = "linear-benchmark";

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Oracle(a) => oracle(cli, a),
        Command::Search(a) => search(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Ellipse(a) => ellipse(cli, a),
    }
}

#[derive(Debug, Serialize)]
struct DatasetInfo {
    source: String,
    n: usize,
    normalization: Option<Normalization>,
}

fn load_data(args: &DataArgs) -> Result<(Dataset, DatasetInfo)> {
    let is_alias = args.data.eq_ignore_ascii_case(BENCHMARK_ALIAS);
    let raw = if is_alias { linear_benchmark_dataset() } else { load_csv(&args.data)? };
    let wanted = if args.normalize {
        true
    } else if args.no_normalize {
        false
    } else {
        !is_alias
    };
    let (data, normalization) = if wanted {
        let (d, t) = normalize(&raw)?;
        (d, Some(t))
    } else {
        (raw, None)
    };
    let info = DatasetInfo { source: args.data.clone(), n: data.n(), normalization };
    Ok((data, info))
}

fn fit_options(args: &FitArgs) -> Result<FitOptions> {
    if args.restarts == 0 {
        return Err(Error::InvalidArgument("--restarts must be at least 1".into()));
    }
    Ok(FitOptions { restarts: args.restarts, max_iters: args.max_iters, ..FitOptions::default() })
}

fn nested_options(args: &NestedArgs) -> NestedOptions {
    NestedOptions {
        live_points: args.live_points,
        dlogz: args.dlogz,
        walk_steps: args.walk_steps,
        ..NestedOptions::default()
    }
}

fn parameter_names(expr: &KernelExpr) -> Vec<String> {
    expr.layout()
        .slots
        .iter()
        .enumerate()
        .map(|(i, s)| match s.leaf {
            Some(leaf) => format!("raw{i}_{}{leaf}_{}", expr.leaves()[leaf].name(), s.role.name()),
            None => format!("raw{i}_{}", s.role.name()),
        })
        .collect()
}

fn default_points(u: usize) -> usize {
    if u <= 2 {
        401
    } else {
        101
    }
}

#[derive(Serialize)]
struct EvaluateBody<'a> {
    dataset: &'a DatasetInfo,
    result: &'a EvaluationResult,
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<u8> {
    let expr = parse_kernel(&a.kernel)?;
    let options = fit_options(&a.fit)?;
    let (data, info) = load_data(&a.data)?;
    let model = GPModel::new(expr.clone());
    let prior = build_prior(&expr);
    let result = criteria_suite(&model, &prior, &data, &options, a.fit.seed)?;
    let provenance = Provenance::new(cli, a.fit.seed);
    match cli.format {
        Format::Json => write_json(cli.out.as_deref(), &provenance, &EvaluateBody { dataset: &info, result: &result })?,
        Format::Csv => {
            let header = [
                "kernel", "n", "u", "MLL", "MAP", "AIC", "BIC", "logZ_AIC", "logZ_BIC", "AIC_MAP", "BIC_MAP",
                "logZ_Lap", "logZ_LapS", "logZ_LapAIC", "logZ_LapBIC", "clamped_LapS", "clamped_LapAIC",
                "clamped_LapBIC", "eigenvalues", "errors",
            ];
            let r = &result;
            let clamps = |f: fn(&gpevidence::laplace::ClampCounts) -> usize| {
                r.clamp_counts.as_ref().map(|c| f(c).to_string()).unwrap_or_default()
            };
            let row = vec![
                r.kernel.to_string(),
                r.n.to_string(),
                r.u.to_string(),
                opt(r.mll),
                opt(r.map),
                opt(r.aic),
                opt(r.bic),
                opt(r.log_z_aic),
                opt(r.log_z_bic),
                opt(r.aic_map_surrogate),
                opt(r.bic_map_surrogate),
                opt(r.log_z_lap),
                opt(r.log_z_lap_s),
                opt(r.log_z_lap_aic),
                opt(r.log_z_lap_bic),
                clamps(|c| c.lap_s),
                clamps(|c| c.lap_aic),
                clamps(|c| c.lap_bic),
                r.spectrum
                    .as_ref()
                    .map(|s| s.eigenvalues.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
                r.errors.join("; "),
            ];
            write_csv(cli.out.as_deref(), &provenance, &header, &[row])?;
        }
    }
    for e in &result.errors {
        eprintln!("warning: {e}");
    }
    Ok(if result.errors.is_empty() { exit::OK } else { exit::PARTIAL })
}

#[derive(Serialize)]
struct OracleBody<'a> {
    dataset: &'a DatasetInfo,
    kernel: String,
    u: usize,
    estimates: &'a [EvidenceEstimate],
    errors: &'a [String],
}

fn oracle(cli: &Cli, a: &OracleArgs) -> Result<u8> {
    let expr = parse_kernel(&a.kernel)?;
    let (data, info) = load_data(&a.data)?;
    let model = GPModel::new(expr.clone());
    let prior = build_prior(&expr);
    let likelihood = GpLikelihood { model: &model, data: &data };
    let u = model.n_params();

    let mut outcomes: Vec<Result<EvidenceEstimate>> = Vec::new();
    if matches!(a.method, Method::Quadrature | Method::Both) {
        let points = a.points_per_dim.unwrap_or(default_points(u));
        outcomes.push(quadrature_evidence(&likelihood, &prior, points, a.half_width));
    }
    if matches!(a.method, Method::Nested | Method::Both) {
        outcomes.push(nested_sampling_evidence(&likelihood, &prior, &nested_options(&a.nested), a.seed));
    }

    let mut estimates = Vec::new();
    let mut errors = Vec::new();
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(e) => estimates.push(e),
            Err(e) => {
                errors.push(e.to_string());
                first_error.get_or_insert(e);
            }
        }
    }
    if estimates.is_empty() {
        return Err(first_error.expect("at least one method ran"));
    }

    if let Some(path) = &a.samples {
        if let Some(nested) = estimates.iter().find(|e| !e.posterior.is_empty()) {
            write_posterior_csv(&nested.posterior, &parameter_names(&expr), sink(Some(path))?)?;
        }
    }
    for e in &mut estimates {
        e.posterior.clear();
    }

    let provenance = Provenance::new(cli, a.seed);
    match cli.format {
        Format::Json => write_json(
            cli.out.as_deref(),
            &provenance,
            &OracleBody { dataset: &info, kernel: expr.to_string(), u, estimates: &estimates, errors: &errors },
        )?,
        Format::Csv => {
            let header = ["kernel", "method", "log_z", "error", "evaluations", "iterations", "information"];
            let rows: Vec<Vec<String>> = estimates
                .iter()
                .map(|e| {
                    vec![
                        expr.to_string(),
                        format!("{:?}", e.method).to_lowercase(),
                        e.log_z.to_string(),
                        e.error.to_string(),
                        e.evaluations.to_string(),
                        e.iterations.to_string(),
                        opt(e.information),
                    ]
                })
                .collect();
            write_csv(cli.out.as_deref(), &provenance, &header, &rows)?;
        }
    }
    for e in &errors {
        eprintln!("warning: {e}");
    }
    Ok(if errors.is_empty() { exit::OK } else { exit::PARTIAL })
}

#[derive(Serialize)]
struct SearchBody<'a> {
    dataset: &'a DatasetInfo,
    summaries: &'a [SearchSummary],
    traces: &'a [SearchTrace],
}

const SUMMARY_HEADER: [&str; 5] = ["dataset", "criterion", "found", "recognized", "log_z"];

fn summary_rows(summaries: &[SearchSummary]) -> Vec<Vec<String>> {
    summaries
        .iter()
        .map(|s| {
            vec![
                s.dataset.clone(),
                s.criterion.to_string(),
                s.found.clone().unwrap_or_default(),
                s.recognized.map(|r| r.to_string()).unwrap_or_default(),
                opt(s.log_z),
            ]
        })
        .collect()
}

fn search(cli: &Cli, a: &SearchArgs) -> Result<u8> {
    let criteria = a.criterion.iter().map(|c| Criterion::from_str(c)).collect::<Result<Vec<_>>>()?;
    let bases = a
        .bases
        .iter()
        .map(|b| {
            BaseKernel::from_name(&b.trim().to_ascii_uppercase())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown base kernel `{b}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let generating = a.generating.as_deref().map(parse_kernel).transpose()?;
    let options = fit_options(&a.fit)?;
    let (data, info) = load_data(&a.data)?;

    let mut traces = Vec::new();
    let mut summaries = Vec::new();
    for criterion in criteria {
        let trace = cks_search(&data, criterion, a.depth, &bases, a.fit.seed, &options)?;
        let log_z = match (&trace.best, a.score_evidence) {
            (Some(best), true) => {
                let model = GPModel::new(best.clone());
                let u = model.n_params();
                if u <= 3 {
                    let likelihood = GpLikelihood { model: &model, data: &data };
                    quadrature_evidence(&likelihood, &build_prior(best), default_points(u), 6.0).ok().map(|e| e.log_z)
                } else {
                    None
                }
            }
            _ => None,
        };
        summaries.push(SearchSummary {
            dataset: a.data.data.clone(),
            criterion,
            found: trace.best.as_ref().map(|b| b.to_string()),
            recognized: match (&trace.best, &generating) {
                (Some(b), Some(g)) => Some(recognition_check(b, g)),
                _ => None,
            },
            log_z,
        });
        traces.push(trace);
    }

    let provenance = Provenance::new(cli, a.fit.seed);
    match cli.format {
        Format::Json => write_json(
            cli.out.as_deref(),
            &provenance,
            &SearchBody { dataset: &info, summaries: &summaries, traces: &traces },
        )?,
        Format::Csv => write_csv(cli.out.as_deref(), &provenance, &SUMMARY_HEADER, &summary_rows(&summaries))?,
    }
    if let Some(path) = &a.summary {
        write_csv(Some(path), &provenance, &SUMMARY_HEADER, &summary_rows(&summaries))?;
    }

    let failed: usize = traces.iter().map(|t| t.failed_candidates).sum();
    let aborted = traces.iter().any(|t| t.aborted);
    if failed > 0 {
        eprintln!("warning: {failed} candidate evaluations failed and were skipped");
    }
    Ok(if failed > 0 || aborted { exit::PARTIAL } else { exit::OK })
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    spec: &'a GeneratorSpec,
    kernel: String,
    x: &'a [f64],
    y: &'a [f64],
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<u8> {
    let generator = Generator::from_str(&a.generator)?;
    let spec = GeneratorSpec { generator, n: a.n, seed: a.seed, range: (a.x_min, a.x_max) };
    let data = sample_from_gp_prior(&spec)?;
    let provenance = Provenance::new(cli, a.seed);
    let body = GenerateBody { spec: &spec, kernel: generator.expr().to_string(), x: &data.x, y: &data.y };
    match cli.format {
        Format::Json => write_json(cli.out.as_deref(), &provenance, &body)?,
        Format::Csv => {
            let mut w = sink(cli.out.as_deref())?;
            write_dataset(&data, &mut w)?;
            w.flush()?;
            if let Some(out) = &cli.out {
                write_json(Some(&provenance_path(out)), &provenance, &body)?;
            }
        }
    }
    Ok(exit::OK)
}

/// `data.csv` → `data.provenance.json`.
pub fn provenance_path(out: &Path) -> std::path::PathBuf {
    out.with_extension("provenance.json")
}

#[derive(Serialize)]
struct EllipseRow {
    variant: &'static str,
    ellipse: Option<EllipseSpec>,
    /// Share of nested samples inside, each counted once.
    sample_share: Option<f64>,
    /// Importance-weighted posterior mass inside.
    posterior_mass: Option<f64>,
    note: Option<String>,
}

#[derive(Serialize)]
struct EllipseBody<'a> {
    dataset: &'a DatasetInfo,
    kernel: String,
    theta_map: Vec<f64>,
    eigenvalues: Vec<f64>,
    ellipses: Vec<EllipseRow>,
    nested_log_z: Option<f64>,
    nested_samples: usize,
}

fn ellipse(cli: &Cli, a: &EllipseArgs) -> Result<u8> {
    let expr = parse_kernel(&a.kernel)?;
    let model = GPModel::new(expr.clone());
    if model.n_params() != 2 {
        return Err(Error::InvalidArgument(format!(
            "ellipses need exactly 2 hyperparameters; `{expr}` has {}",
            model.n_params()
        )));
    }
    let options = fit_options(&a.fit)?;
    let (data, info) = load_data(&a.data)?;
    let prior = build_prior(&expr);
    let result = criteria_suite(&model, &prior, &data, &options, a.fit.seed)?;
    let (Some(map_fit), Some(spectrum)) = (&result.map_fit, &result.spectrum) else {
        return Err(Error::Optimization(format!("MAP fit or Hessian unavailable: {}", result.errors.join("; "))));
    };
    let theta = &map_fit.theta_hat.raw;

    let nested = if a.nested_samples {
        let likelihood = GpLikelihood { model: &model, data: &data };
        Some(nested_sampling_evidence(&likelihood, &prior, &nested_options(&a.nested), a.fit.seed)?)
    } else {
        None
    };
    if let (Some(path), Some(est)) = (&a.samples, &nested) {
        write_posterior_csv(&est.posterior, &parameter_names(&expr), sink(Some(path))?)?;
    }

    let ellipses: Vec<EllipseRow> = LaplaceVariant::ALL
        .iter()
        .map(|&variant| {
            let clamped = match variant.contribution_bound(data.n()) {
                Some(r) => spectrum.clamp(r).0,
                None => spectrum.clone(),
            };
            match confidence_ellipse(theta, &clamped, a.level) {
                Ok(el) => EllipseRow {
                    variant: variant.name(),
                    sample_share: nested.as_ref().map(|n| sample_fraction_inside(&el, &n.posterior)),
                    posterior_mass: nested.as_ref().map(|n| weighted_fraction_inside(&el, &n.posterior)),
                    ellipse: Some(el),
                    note: None,
                },
                Err(e) => EllipseRow {
                    variant: variant.name(),
                    ellipse: None,
                    sample_share: None,
                    posterior_mass: None,
                    note: Some(e.to_string()),
                },
            }
        })
        .collect();

    let provenance = Provenance::new(cli, a.fit.seed);
    match cli.format {
        Format::Json => write_json(
            cli.out.as_deref(),
            &provenance,
            &EllipseBody {
                dataset: &info,
                kernel: expr.to_string(),
                theta_map: theta.clone(),
                eigenvalues: spectrum.eigenvalues.clone(),
                ellipses,
                nested_log_z: nested.as_ref().map(|n| n.log_z),
                nested_samples: nested.as_ref().map_or(0, |n| n.posterior.len()),
            },
        )?,
        Format::Csv => {
            let header = [
                "variant", "center_0", "center_1", "axis0_0", "axis0_1", "axis1_0", "axis1_1", "length_0",
                "length_1", "level", "sample_share", "posterior_mass",
            ];
            let rows: Vec<Vec<String>> = ellipses
                .iter()
                .map(|row| {
                    let mut cells = vec![row.variant.to_string()];
                    match &row.ellipse {
                        Some(e) => cells.extend(
                            [
                                e.center[0], e.center[1], e.axes[0][0], e.axes[0][1], e.axes[1][0], e.axes[1][1],
                                e.lengths[0], e.lengths[1], e.level,
                            ]
                            .iter()
                            .map(f64::to_string),
                        ),
                        None => cells.extend(std::iter::repeat_n(String::new(), 9)),
                    }
                    cells.push(opt(row.sample_share));
                    cells.push(opt(row.posterior_mass));
                    cells
                })
                .collect();
            write_csv(cli.out.as_deref(), &provenance, &header, &rows)?;
        }
    }
    Ok(exit::OK)
}
