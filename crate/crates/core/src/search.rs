//! Greedy compositional kernel search.
//!
//! Iteration 1 scores every base kernel; later iterations score
//! `best + B` and `best × B` for each base `B`. The search stops early when
//! no candidate beats the incumbent.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitOptions;
use crate::kernels::{BaseKernel, KernelExpr};
use crate::laplace::{criteria_suite, Criterion, EvaluationResult};
use crate::model::{build_prior, Dataset, GPModel};

/// SE, LIN and MAT32: the default search alphabet.
pub const DEFAULT_BASES: [BaseKernel; 3] = [BaseKernel::Se, BaseKernel::Lin, BaseKernel::Mat32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub expr: KernelExpr,
    /// Criterion value in its natural orientation (AIC/BIC lower is better).
    pub value: Option<f64>,
    pub result: Option<EvaluationResult>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchIteration {
    pub candidates: Vec<CandidateRecord>,
    pub chosen: Option<KernelExpr>,
    pub chosen_value: Option<f64>,
    /// Whether the chosen candidate replaced the incumbent.
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub criterion: Criterion,
    pub depth: usize,
    pub seed: u64,
    pub bases: Vec<BaseKernel>,
    pub iterations: Vec<SearchIteration>,
    pub best: Option<KernelExpr>,
    pub best_value: Option<f64>,
    pub failed_candidates: usize,
    /// Set when an iteration had no scorable candidate.
    pub aborted: bool,
}

impl SearchTrace {
    pub fn candidates(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.iterations.iter().flat_map(|it| it.candidates.iter())
    }

    pub fn best_result(&self) -> Option<&EvaluationResult> {
        let best = self.best.as_ref()?;
        self.candidates().filter(|c| &c.expr == best).find_map(|c| c.result.as_ref())
    }
}

/// One summary row per search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub dataset: String,
    pub criterion: Criterion,
    pub found: Option<String>,
    pub recognized: Option<bool>,
    pub log_z: Option<f64>,
}

fn evaluate_candidate(
    expr: KernelExpr,
    data: &Dataset,
    criterion: Criterion,
    options: &FitOptions,
    seed: u64,
) -> CandidateRecord {
    let start = Instant::now();
    let model = GPModel::new(expr.clone());
    let prior = build_prior(&expr);
    let outcome = criteria_suite(&model, &prior, data, options, seed);
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(result) => {
            let value = result.value(criterion);
            let error = match value {
                Some(_) => None,
                None => Some(format!("{criterion} undefined: {}", result.errors.join("; "))),
            };
            CandidateRecord { expr, value, result: Some(result), error, seconds }
        }
        Err(e) => CandidateRecord { expr, value: None, result: None, error: Some(e.to_string()), seconds },
    }
}

/// Orders candidates: higher score first, then fewer leaves, then render.
fn better(criterion: Criterion, a: &CandidateRecord, b: &CandidateRecord) -> bool {
    let score = |c: &CandidateRecord| c.value.map(|v| if criterion.lower_is_better() { -v } else { v });
    match (score(a), score(b)) {
        (Some(sa), Some(sb)) if sa != sb => sa > sb,
        (Some(_), Some(_)) => {
            let (la, lb) = (a.expr.size(), b.expr.size());
            if la != lb {
                la < lb
            } else {
                a.expr.to_string() < b.expr.to_string()
            }
        }
        (Some(_), None) => true,
        _ => false,
    }
}

pub fn cks_search(
    data: &Dataset,
    criterion: Criterion,
    depth: usize,
    bases: &[BaseKernel],
    seed: u64,
    options: &FitOptions,
) -> Result<SearchTrace> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    if bases.is_empty() {
        return Err(Error::InvalidArgument("at least one base kernel is required".into()));
    }

    let mut trace = SearchTrace {
        criterion,
        depth,
        seed,
        bases: bases.to_vec(),
        iterations: Vec::new(),
        best: None,
        best_value: None,
        failed_candidates: 0,
        aborted: false,
    };
    let mut incumbent: Option<CandidateRecord> = None;

    for _ in 0..depth {
        let exprs: Vec<KernelExpr> = match &incumbent {
            None => bases.iter().map(|&b| KernelExpr::leaf(b)).collect(),
            Some(inc) => bases
                .iter()
                .flat_map(|&b| {
                    [
                        KernelExpr::sum(inc.expr.clone(), KernelExpr::leaf(b)),
                        KernelExpr::product(inc.expr.clone(), KernelExpr::leaf(b)),
                    ]
                })
                .collect(),
        };
        let candidates: Vec<CandidateRecord> =
            exprs.into_par_iter().map(|e| evaluate_candidate(e, data, criterion, options, seed)).collect();
        trace.failed_candidates += candidates.iter().filter(|c| c.value.is_none()).count();

        let winner = candidates
            .iter()
            .filter(|c| c.value.is_some())
            .fold(None, |acc: Option<&CandidateRecord>, c| match acc {
                Some(a) if !better(criterion, c, a) => Some(a),
                _ => Some(c),
            })
            .cloned();
        let Some(winner) = winner else {
            trace.iterations.push(SearchIteration { candidates, chosen: None, chosen_value: None, improved: false });
            trace.aborted = true;
            break;
        };
        let improved = match &incumbent {
            None => true,
            Some(inc) => {
                let (w, i) = (winner.value.unwrap(), inc.value.unwrap());
                if criterion.lower_is_better() {
                    w < i
                } else {
                    w > i
                }
            }
        };
        trace.iterations.push(SearchIteration {
            candidates,
            chosen: Some(winner.expr.clone()),
            chosen_value: winner.value,
            improved,
        });
        if !improved {
            break;
        }
        incumbent = Some(winner);
    }

    if let Some(inc) = incumbent {
        trace.best = Some(inc.expr);
        trace.best_value = inc.value;
    }
    Ok(trace)
}

/// Canonical string of an expression: nested sums and products are
/// flattened and their operands sorted.
pub fn canonical_form(expr: &KernelExpr) -> String {
    fn collect_sum<'a>(e: &'a KernelExpr, out: &mut Vec<&'a KernelExpr>) {
        match e {
            KernelExpr::Sum(a, b) => {
                collect_sum(a, out);
                collect_sum(b, out);
            }
            _ => out.push(e),
        }
    }
    fn collect_product<'a>(e: &'a KernelExpr, out: &mut Vec<&'a KernelExpr>) {
        match e {
            KernelExpr::Product(a, b) => {
                collect_product(a, out);
                collect_product(b, out);
            }
            _ => out.push(e),
        }
    }
    let (mut operands, sep) = match expr {
        KernelExpr::Leaf(b) => return b.name().to_string(),
        KernelExpr::Sum(..) => {
            let mut v = Vec::new();
            collect_sum(expr, &mut v);
            (v, "+")
        }
        KernelExpr::Product(..) => {
            let mut v = Vec::new();
            collect_product(expr, &mut v);
            (v, "*")
        }
    };
    let mut parts: Vec<String> = operands.drain(..).map(canonical_form).collect();
    parts.sort();
    format!("({})", parts.join(sep))
}

/// Structural equality up to commutativity and associativity.
pub fn recognition_check(found: &KernelExpr, generating: &KernelExpr) -> bool {
    canonical_form(found) == canonical_form(generating)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_from_gp_prior, Generator, GeneratorSpec};
    use crate::kernels::parse_kernel;

    fn k(s: &str) -> KernelExpr {
        parse_kernel(s).unwrap()
    }

    #[test]
    fn recognition_examples() {
        assert!(recognition_check(&k("SE+LIN"), &k("LIN+SE")));
        assert!(!recognition_check(&k("SE"), &k("SE+SE")));
        assert!(recognition_check(&k("(SE*LIN)+MAT32"), &k("MAT32+(LIN*SE)")));
        assert!(recognition_check(&k("SE+(LIN+MAT32)"), &k("(MAT32+SE)+LIN")));
        assert!(!recognition_check(&k("SE*(LIN+MAT32)"), &k("SE*LIN+SE*MAT32")));
        assert!(!recognition_check(&k("SE+LIN"), &k("SE*LIN")));
    }

    #[test]
    fn tie_break_prefers_smaller_then_lexicographic() {
        let rec = |s: &str, v: f64| CandidateRecord { expr: k(s), value: Some(v), result: None, error: None, seconds: 0.0 };
        assert!(better(Criterion::LapS, &rec("SE", 1.0), &rec("SE+LIN", 1.0)));
        assert!(better(Criterion::LapS, &rec("LIN", 1.0), &rec("SE", 1.0)));
        assert!(better(Criterion::Aic, &rec("SE+LIN", 1.0), &rec("SE", 2.0)));
        assert!(better(Criterion::Mll, &rec("SE+LIN", 2.0), &rec("SE", 1.0)));
    }

    fn linear_data() -> Dataset {
        let spec = GeneratorSpec::new(Generator::Lin, 20, 4);
        sample_from_gp_prior(&spec).unwrap()
    }

    #[test]
    fn depth_one_picks_lin_for_linear_data() {
        let data = linear_data();
        let opts = FitOptions { restarts: 3, ..Default::default() };
        let trace = cks_search(&data, Criterion::LapAic, 1, &DEFAULT_BASES, 0, &opts).unwrap();
        assert_eq!(trace.iterations.len(), 1);
        // the exhaustive depth-1 scoring is the oracle
        let best = trace.iterations[0]
            .candidates
            .iter()
            .max_by(|a, b| a.value.unwrap().total_cmp(&b.value.unwrap()))
            .unwrap();
        assert_eq!(trace.best.as_ref(), Some(&best.expr));
        assert_eq!(trace.best.unwrap().to_string(), "LIN");
    }

    #[test]
    fn search_invariants() {
        let data = linear_data();
        let opts = FitOptions { restarts: 2, ..Default::default() };
        let a = cks_search(&data, Criterion::Mll, 3, &DEFAULT_BASES, 5, &opts).unwrap();
        assert!(a.iterations.len() <= 3);
        assert!(a.best.as_ref().unwrap().size() <= 3);
        let mut last = f64::NEG_INFINITY;
        for it in &a.iterations {
            let chosen = it.chosen_value.unwrap();
            for c in &it.candidates {
                assert!(c.value.unwrap() <= chosen);
            }
            if it.improved {
                assert!(chosen > last);
                last = chosen;
            }
        }
        let b = cks_search(&data, Criterion::Mll, 3, &DEFAULT_BASES, 5, &opts).unwrap();
        let strip = |t: &SearchTrace| -> Vec<(String, Option<f64>)> {
            t.candidates().map(|c| (c.expr.to_string(), c.value)).collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn argument_checks() {
        let data = linear_data();
        let opts = FitOptions::default();
        assert!(cks_search(&data, Criterion::LapS, 0, &DEFAULT_BASES, 0, &opts).is_err());
        assert!(cks_search(&data, Criterion::LapS, 1, &[], 0, &opts).is_err());
    }
}
