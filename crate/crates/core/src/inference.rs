//! Marginal logistic model with treatment-by-group interactions on
//! clustered responses.
//!
//! The mean model is `logit(E[correct]) ~ treat * group + diff` with
//! dummy coding and reference levels dropped. Coefficients are the Bernoulli
//! maximum-likelihood estimates (IRLS with step halving); the covariance is
//! the cluster-robust sandwich `A^{-1} B A^{-1}`, where `A` is the observed
//! information and `B` sums outer products of per-cluster score vectors
//! (clusters are participants). This is the independence-working-correlation
//! estimator: the same marginal mean model as an exchangeable GEE, with
//! standard errors that stay valid under intra-participant correlation.
//!
//! Odds ratios of a treatment versus control are
//! `OR_{t,a} = exp(beta_treat_t + beta_{treat_t x group_a})`; the difficulty
//! covariate enters additively, so ORs do not depend on where it is held.
//! Confidence intervals come from the delta method on the log-OR, i.e. a
//! Wald interval on the coefficient combination.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::humansim::{Treatment, TrialResponse};

/// Reference levels and covariate choice for the design matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub reference_treatment: Treatment,
    pub reference_group: usize,
    pub include_diff: bool,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            reference_treatment: Treatment::Control,
            reference_group: 0,
            include_diff: true,
        }
    }
}

/// Dummy-coded design matrix with response, cluster ids, and term names.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub clusters: Vec<u64>,
    pub terms: Vec<String>,
    /// Treatment levels present, sorted; empty for hand-built designs.
    pub treatments: Vec<Treatment>,
    /// Group levels present, sorted; empty for hand-built designs.
    pub groups: Vec<usize>,
}

impl Design {
    /// Wrap raw matrices (used for hand-built fixtures and oracles).
    pub fn from_parts(
        x: DMatrix<f64>,
        y: DVector<f64>,
        clusters: Vec<u64>,
        terms: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() != clusters.len() {
            return Err(Error::Parameter(format!(
                "design rows {}, responses {}, clusters {} must agree",
                x.nrows(),
                y.len(),
                clusters.len()
            )));
        }
        if x.ncols() != terms.len() {
            return Err(Error::Parameter(format!(
                "{} columns but {} term names",
                x.ncols(),
                terms.len()
            )));
        }
        Ok(Self {
            x,
            y,
            clusters,
            terms,
            treatments: Vec::new(),
            groups: Vec::new(),
        })
    }
}

/// Build the dummy-coded design from responses: intercept, treatment
/// dummies, group dummies, all treatment-by-group products, then `diff`.
pub fn build_design(responses: &[TrialResponse], spec: &DesignSpec) -> Result<Design> {
    if responses.is_empty() {
        return Err(Error::Inference("no responses".into()));
    }
    let mut treatments: Vec<Treatment> = responses.iter().map(|r| r.treatment).collect();
    treatments.sort_unstable();
    treatments.dedup();
    let mut groups: Vec<usize> = responses.iter().map(|r| r.group).collect();
    groups.sort_unstable();
    groups.dedup();
    if treatments.len() < 2 {
        return Err(Error::Inference(format!(
            "need >= 2 treatments, found {}",
            treatments.len()
        )));
    }
    if groups.len() < 2 {
        return Err(Error::Inference(format!(
            "need >= 2 groups, found {}",
            groups.len()
        )));
    }
    if !treatments.contains(&spec.reference_treatment) {
        return Err(Error::Inference(format!(
            "reference treatment {} absent from the data",
            spec.reference_treatment
        )));
    }
    if !groups.contains(&spec.reference_group) {
        return Err(Error::Inference(format!(
            "reference group {} absent from the data",
            spec.reference_group
        )));
    }

    let treat_levels: Vec<Treatment> = treatments
        .iter()
        .copied()
        .filter(|t| *t != spec.reference_treatment)
        .collect();
    let group_levels: Vec<usize> = groups
        .iter()
        .copied()
        .filter(|g| *g != spec.reference_group)
        .collect();

    let mut terms = vec!["intercept".to_string()];
    terms.extend(treat_levels.iter().map(|t| format!("treat[{t}]")));
    terms.extend(group_levels.iter().map(|g| format!("group[{g}]")));
    for t in &treat_levels {
        for g in &group_levels {
            terms.push(format!("treat[{t}]:group[{g}]"));
        }
    }
    if spec.include_diff {
        terms.push("diff".to_string());
    }

    let p = terms.len();
    let n = responses.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut clusters = Vec::with_capacity(n);
    for (i, r) in responses.iter().enumerate() {
        let mut col = 0;
        x[(i, col)] = 1.0;
        col += 1;
        for t in &treat_levels {
            x[(i, col)] = if r.treatment == *t { 1.0 } else { 0.0 };
            col += 1;
        }
        for g in &group_levels {
            x[(i, col)] = if r.group == *g { 1.0 } else { 0.0 };
            col += 1;
        }
        for t in &treat_levels {
            for g in &group_levels {
                x[(i, col)] = if r.treatment == *t && r.group == *g {
                    1.0
                } else {
                    0.0
                };
                col += 1;
            }
        }
        if spec.include_diff {
            x[(i, col)] = r.diff as f64;
        }
        y[i] = if r.correct { 1.0 } else { 0.0 };
        clusters.push(r.participant_id);
    }

    for j in 1..p {
        let first = x[(0, j)];
        if (0..n).all(|i| x[(i, j)] == first) {
            return Err(Error::Inference(format!(
                "column {} is constant (degenerate data)",
                terms[j]
            )));
        }
    }

    Ok(Design {
        x,
        y,
        clusters,
        terms,
        treatments,
        groups,
    })
}

/// Fitted model: coefficients, cluster-robust covariance, and the level
/// metadata needed to read off odds ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    /// Cluster-robust sandwich covariance of `beta` (row-major).
    pub covariance: Vec<Vec<f64>>,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub treatments: Vec<Treatment>,
    pub groups: Vec<usize>,
}

impl FitResult {
    fn term_index(&self, term: &str) -> Result<usize> {
        self.terms
            .iter()
            .position(|t| t == term)
            .ok_or_else(|| Error::Inference(format!("term {term:?} not in the fitted model")))
    }

    /// Robust standard errors, in term order.
    pub fn robust_se(&self) -> Vec<f64> {
        (0..self.beta.len())
            .map(|j| self.covariance[j][j].max(0.0).sqrt())
            .collect()
    }

    /// Model probability of a correct answer at `(treatment, group, diff)`.
    pub fn predicted_prob(
        &self,
        treatment: Treatment,
        group: usize,
        diff: f64,
        spec: &DesignSpec,
    ) -> Result<f64> {
        let mut eta = self.beta[self.term_index("intercept")?];
        if treatment != spec.reference_treatment {
            eta += self.beta[self.term_index(&format!("treat[{treatment}]"))?];
        }
        if group != spec.reference_group {
            eta += self.beta[self.term_index(&format!("group[{group}]"))?];
        }
        if treatment != spec.reference_treatment && group != spec.reference_group {
            eta += self.beta[self.term_index(&format!("treat[{treatment}]:group[{group}]"))?];
        }
        if spec.include_diff {
            eta += self.beta[self.term_index("diff")?] * diff;
        }
        Ok(1.0 / (1.0 + (-eta).exp()))
    }
}

const GRADIENT_TOL: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100;
/// Any |beta| above this is treated as (quasi-)separation.
pub const SEPARATION_BOUND: f64 = 30.0;

fn log_likelihood(eta: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for i in 0..y.len() {
        let e = eta[i];
        // log(1 + exp(e)) computed stably on either side
        let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        ll += y[i] * e - softplus;
    }
    ll
}

/// Maximum-likelihood logistic fit with cluster-robust covariance.
pub fn fit_logistic(design: &Design) -> Result<FitResult> {
    let x = &design.x;
    let y = &design.y;
    let (n, p) = (x.nrows(), x.ncols());
    if n == 0 || p == 0 {
        return Err(Error::Inference("empty design".into()));
    }
    let mut distinct_clusters: Vec<u64> = design.clusters.clone();
    distinct_clusters.sort_unstable();
    distinct_clusters.dedup();
    if distinct_clusters.len() < 2 {
        return Err(Error::Inference(format!(
            "need >= 2 clusters, found {}",
            distinct_clusters.len()
        )));
    }

    let mut beta = DVector::zeros(p);
    let mut eta = x * &beta;
    let mut ll = log_likelihood(&eta, y);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_ITERATIONS {
        iterations = iter;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let grad = x.transpose() * (y - &mu);
        if grad.amax() <= GRADIENT_TOL {
            converged = true;
            break;
        }
        let w = mu.map(|m| m * (1.0 - m));
        let mut xtwx = DMatrix::zeros(p, p);
        for i in 0..n {
            let xi = x.row(i);
            let wi = w[i];
            for a in 0..p {
                for b in a..p {
                    xtwx[(a, b)] += wi * xi[a] * xi[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = Cholesky::new(xtwx).ok_or_else(|| {
            Error::Inference(
                "design matrix is rank deficient (information matrix not positive definite)"
                    .into(),
            )
        })?;
        let mut step = chol.solve(&grad);

        // Newton step with halving if the likelihood does not improve
        let mut improved = false;
        for _ in 0..40 {
            let candidate = &beta + &step;
            let cand_eta = x * &candidate;
            let cand_ll = log_likelihood(&cand_eta, y);
            if cand_ll >= ll - 1e-12 {
                beta = candidate;
                eta = cand_eta;
                ll = cand_ll;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
        if beta.amax() > SEPARATION_BOUND {
            return Err(Error::Inference(format!(
                "coefficient magnitude exceeded {SEPARATION_BOUND}: likely (quasi-)separation; \
                 pool sparse treatment/group cells and refit"
            )));
        }
    }
    if !converged {
        // final gradient check in case the loop exhausted iterations right at the optimum
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let grad = x.transpose() * (y - &mu);
        converged = grad.amax() <= GRADIENT_TOL;
    }

    // observed information A and cluster score outer products B at beta-hat
    let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
    let w = mu.map(|m| m * (1.0 - m));
    let mut info = DMatrix::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i);
        for a in 0..p {
            for b in a..p {
                info[(a, b)] += w[i] * xi[a] * xi[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    let chol = Cholesky::new(info).ok_or_else(|| {
        Error::Inference("information matrix singular at the optimum".into())
    })?;
    let info_inv = chol.inverse();

    let mut cluster_scores: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let resid = y[i] - mu[i];
        let entry = cluster_scores
            .entry(design.clusters[i])
            .or_insert_with(|| DVector::zeros(p));
        for a in 0..p {
            entry[a] += resid * x[(i, a)];
        }
    }
    let mut bread = DMatrix::zeros(p, p);
    for score in cluster_scores.values() {
        bread += score * score.transpose();
    }
    let sandwich = &info_inv * bread * &info_inv;

    Ok(FitResult {
        terms: design.terms.clone(),
        beta: beta.iter().copied().collect(),
        covariance: (0..p)
            .map(|a| (0..p).map(|b| sandwich[(a, b)]).collect())
            .collect(),
        n_clusters: distinct_clusters.len(),
        n_obs: n,
        converged,
        iterations,
        treatments: design.treatments.clone(),
        groups: design.groups.clone(),
    })
}

/// Odds ratio of one treatment versus the reference, for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrEstimate {
    pub treatment: Treatment,
    pub group: usize,
    pub or: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub log_or: f64,
    pub se_log_or: f64,
    /// Two-sided Wald p-value on the log-OR; absent for the reference
    /// treatment (OR is identically 1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub significant_5: bool,
    pub significant_10: bool,
}

// Complementary error function (Numerical Recipes Chebyshev fit,
// |relative error| < 1.2e-7) — plenty for Wald significance flags.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

const Z_975: f64 = 1.959963984540054;

/// Odds ratios versus the reference treatment for every (treatment, group)
/// pair, with delta-method confidence intervals. `at_diff` is accepted for
/// interface completeness; ORs are invariant to it because `diff` has no
/// interaction terms.
pub fn odds_ratios(
    fit: &FitResult,
    spec: &DesignSpec,
    _at_diff: f64,
) -> Result<BTreeMap<(Treatment, usize), OrEstimate>> {
    if !fit.converged {
        return Err(Error::Inference(
            "fit did not converge; odds ratios unavailable".into(),
        ));
    }
    if fit.treatments.is_empty() || fit.groups.is_empty() {
        return Err(Error::Inference(
            "fit carries no treatment/group levels (hand-built design?)".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for &t in &fit.treatments {
        for &g in &fit.groups {
            let estimate = if t == spec.reference_treatment {
                OrEstimate {
                    treatment: t,
                    group: g,
                    or: 1.0,
                    ci_lower: 1.0,
                    ci_upper: 1.0,
                    log_or: 0.0,
                    se_log_or: 0.0,
                    p_value: None,
                    significant_5: false,
                    significant_10: false,
                }
            } else {
                let mut indices = vec![fit.term_index(&format!("treat[{t}]"))?];
                if g != spec.reference_group {
                    indices.push(fit.term_index(&format!("treat[{t}]:group[{g}]"))?);
                }
                let log_or: f64 = indices.iter().map(|&j| fit.beta[j]).sum();
                let mut var = 0.0;
                for &a in &indices {
                    for &b in &indices {
                        var += fit.covariance[a][b];
                    }
                }
                let se = var.max(0.0).sqrt();
                let p = if se > 0.0 {
                    Some(two_sided_p(log_or / se))
                } else {
                    None
                };
                OrEstimate {
                    treatment: t,
                    group: g,
                    or: log_or.exp(),
                    ci_lower: (log_or - Z_975 * se).exp(),
                    ci_upper: (log_or + Z_975 * se).exp(),
                    log_or,
                    se_log_or: se,
                    p_value: p,
                    significant_5: p.map(|p| p < 0.05).unwrap_or(false),
                    significant_10: p.map(|p| p < 0.10).unwrap_or(false),
                }
            };
            out.insert((t, g), estimate);
        }
    }
    Ok(out)
}

/// Largest ratio of group odds ratios within one treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRor {
    pub treatment: Treatment,
    pub value: f64,
    /// `(numerator group, denominator group)`.
    pub pair: (usize, usize),
}

/// `max_{a,b} OR_{t,a} / OR_{t,b} = max(OR_t) / min(OR_t)` per treatment.
pub fn max_ror(ors: &BTreeMap<(Treatment, usize), OrEstimate>) -> BTreeMap<Treatment, MaxRor> {
    let mut by_treatment: BTreeMap<Treatment, Vec<&OrEstimate>> = BTreeMap::new();
    for est in ors.values() {
        by_treatment.entry(est.treatment).or_default().push(est);
    }
    let mut out = BTreeMap::new();
    for (t, estimates) in by_treatment {
        let mut best = estimates[0];
        let mut worst = estimates[0];
        for e in &estimates {
            if e.or > best.or {
                best = e;
            }
            if e.or < worst.or {
                worst = e;
            }
        }
        out.insert(
            t,
            MaxRor {
                treatment: t,
                value: best.or / worst.or,
                pair: (best.group, worst.group),
            },
        );
    }
    out
}

/// JSON-ready summary: coefficients, robust SEs, OR table, maxROR table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub odds_ratios: Vec<OrEstimate>,
    pub max_ror: Vec<MaxRor>,
}

/// Fit the model on responses and summarize it.
pub fn analyze_responses(responses: &[TrialResponse], spec: &DesignSpec) -> Result<StatsReport> {
    let design = build_design(responses, spec)?;
    let fit = fit_logistic(&design)?;
    let ors = odds_ratios(&fit, spec, 0.0)?;
    let rors = max_ror(&ors);
    Ok(StatsReport {
        robust_se: fit.robust_se(),
        terms: fit.terms.clone(),
        beta: fit.beta.clone(),
        n_clusters: fit.n_clusters,
        n_obs: fit.n_obs,
        converged: fit.converged,
        iterations: fit.iterations,
        odds_ratios: ors.into_values().collect(),
        max_ror: rors.into_values().collect(),
    })
}
