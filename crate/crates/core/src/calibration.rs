//! Global parameter identification against several trees at once.
//!
//! Real-valued parameters are fitted by a bounded Levenberg–Marquardt
//! descent on finite-difference Jacobians; topological coefficients, which
//! only act through rounded counts, are explored by simulated annealing.

use crate::engine::{simulate, simulate_frozen, SimulationOutput, Topology};
use crate::error::{ModelError, Result};
use crate::model::{GrowthParameters, TargetDataset, TopoCoef, ZoneRuleSet};
use crate::targets::{extract_targets, observations, DataClass, Observation};
use crate::topology::{coefficient_range, Decision};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

/// A real-valued parameter open to fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContinuousParam {
    Sp0,
    Alpha,
    Pr,
    Gamma,
    Lambda,
    Prg(u8),
    /// Environment factor of a tree (0-based).
    V(usize),
    WoodDensity,
    AllometryA(u8),
    AllometryB(u8),
}

impl ContinuousParam {
    pub fn parse(s: &str) -> Option<Self> {
        let (head, tail) = match s.split_once('.') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        let idx = || tail.and_then(|t| t.parse::<u8>().ok());
        Some(match (head, tail) {
            ("sp0", None) => Self::Sp0,
            ("alpha", None) => Self::Alpha,
            ("p_r", None) => Self::Pr,
            ("gamma", None) => Self::Gamma,
            ("lambda", None) => Self::Lambda,
            ("wood_density", None) => Self::WoodDensity,
            ("p_rg", Some(_)) => Self::Prg(idx()?),
            ("a_len", Some(_)) => Self::AllometryA(idx()?),
            ("b_len", Some(_)) => Self::AllometryB(idx()?),
            ("v", Some(_)) => Self::V(usize::from(idx()?.checked_sub(1)?)),
            _ => return None,
        })
    }

    pub fn get(&self, p: &GrowthParameters) -> f64 {
        match *self {
            Self::Sp0 => p.sp0,
            Self::Alpha => p.alpha,
            Self::Pr => p.p_r,
            Self::Gamma => p.gamma,
            Self::Lambda => p.lambda_mix,
            Self::Prg(k) => p.p_rg[usize::from(k) - 1],
            Self::V(t) => p.v_env[t],
            Self::WoodDensity => p.wood_density,
            Self::AllometryA(k) => p.allometry[usize::from(k) - 1].a_len,
            Self::AllometryB(k) => p.allometry[usize::from(k) - 1].b_len,
        }
    }

    pub fn set(&self, p: &mut GrowthParameters, v: f64) {
        match *self {
            Self::Sp0 => p.sp0 = v,
            Self::Alpha => p.alpha = v,
            Self::Pr => p.p_r = v,
            Self::Gamma => p.gamma = v,
            Self::Lambda => p.lambda_mix = v,
            Self::Prg(k) => p.p_rg[usize::from(k) - 1] = v,
            Self::V(t) => p.v_env[t] = v,
            Self::WoodDensity => p.wood_density = v,
            Self::AllometryA(k) => p.allometry[usize::from(k) - 1].a_len = v,
            Self::AllometryB(k) => p.allometry[usize::from(k) - 1].b_len = v,
        }
    }

    /// Whether the parameter exists in `p`.
    pub fn applies_to(&self, p: &GrowthParameters) -> bool {
        let pa_ok = |k: u8| k >= 1 && k <= p.pa_max;
        match *self {
            Self::Prg(k) => k >= 2 && pa_ok(k),
            Self::AllometryA(k) | Self::AllometryB(k) => pa_ok(k),
            Self::V(t) => t < p.v_env.len(),
            _ => true,
        }
    }
}

impl fmt::Display for ContinuousParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Sp0 => write!(f, "sp0"),
            Self::Alpha => write!(f, "alpha"),
            Self::Pr => write!(f, "p_r"),
            Self::Gamma => write!(f, "gamma"),
            Self::Lambda => write!(f, "lambda"),
            Self::Prg(k) => write!(f, "p_rg.{k}"),
            Self::V(t) => write!(f, "v.{}", t + 1),
            Self::WoodDensity => write!(f, "wood_density"),
            Self::AllometryA(k) => write!(f, "a_len.{k}"),
            Self::AllometryB(k) => write!(f, "b_len.{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeParam {
    pub param: ContinuousParam,
    pub lo: f64,
    pub hi: f64,
    pub init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeCoef {
    pub coef: TopoCoef,
    pub lo: f64,
    pub hi: f64,
    pub init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Weight {
    /// `1 / (class mean of the observations)²`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Initial temperature; defaults to a tenth of the starting objective.
    pub t0: Option<f64>,
    pub cooling: f64,
    pub proposals_per_temperature: usize,
    /// Stop once `T/T0` falls below this.
    pub stop_ratio: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            t0: None,
            cooling: 0.95,
            proposals_per_temperature: 50,
            stop_ratio: 1e-3,
        }
    }
}

/// How often the continuous parameters are re-fitted during annealing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nesting {
    /// Every proposal gets its own continuous fit.
    Full,
    /// Re-fit after every `k` accepted structural moves, warm-started.
    Fast { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmSettings {
    pub max_iter: usize,
    /// Iteration cap of the warm-started re-fits inside annealing.
    pub inner_max_iter: usize,
    /// Relative cost decrease below which the descent stops.
    pub ftol: f64,
    /// Step size in scaled `[0, 1]` coordinates below which it stops.
    pub xtol: f64,
    /// Finest forward-difference step in scaled coordinates.
    pub fd_step: f64,
    /// First difference step; refined tenfold each time the descent stalls.
    pub coarse_fd_step: f64,
    /// Largest first step in scaled coordinates.
    pub initial_radius: f64,
    /// Cap on fit/refresh rounds of the frozen-topology descent.
    pub max_rounds: usize,
    /// Round cap of the warm-started re-fits inside annealing.
    pub inner_max_rounds: usize,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            inner_max_iter: 8,
            ftol: 1e-12,
            xtol: 1e-12,
            fd_step: 1e-7,
            coarse_fd_step: 1e-2,
            initial_radius: 0.05,
            max_rounds: 40,
            inner_max_rounds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub continuous: Vec<FreeParam>,
    pub topology: Vec<FreeCoef>,
    pub weights: BTreeMap<DataClass, Weight>,
    pub anneal: AnnealSchedule,
    pub nesting: Nesting,
    pub lm: LmSettings,
    pub seed: u64,
}

impl FitSpec {
    /// Reference free set: crown, ring and environment parameters plus the
    /// ten plastic topological coefficients, initialised at the given values.
    pub fn reference(p: &GrowthParameters, z: &ZoneRuleSet) -> Self {
        use ContinuousParam::*;
        let mut continuous = vec![
            (Sp0, 1e-3, 0.2),
            (Alpha, 0.3, 1.0),
            (Pr, 0.05, 50.0),
            (Gamma, 0.2, 6.0),
            (Lambda, 0.0, 1.0),
        ];
        for k in 2..=p.pa_max {
            continuous.push((Prg(k), 1e-4, 1.0));
        }
        for t in 0..p.v_env.len() {
            continuous.push((V(t), 1e-3, 2.0));
        }
        let continuous = continuous
            .into_iter()
            .map(|(param, lo, hi)| FreeParam {
                param,
                lo,
                hi,
                init: param.get(p),
            })
            .collect();
        let topology = TopoCoef::reference_free_set()
            .into_iter()
            .filter_map(|coef| {
                z.get(coef).map(|v| FreeCoef {
                    coef,
                    lo: 0.0,
                    hi: if coef.kind == crate::model::CoefKind::M2 {
                        5.0
                    } else {
                        3.0
                    },
                    init: v,
                })
            })
            .collect();
        Self {
            continuous,
            topology,
            weights: DataClass::ALL.iter().map(|&c| (c, Weight::Auto)).collect(),
            anneal: AnnealSchedule::default(),
            nesting: Nesting::Fast { k: 5 },
            lm: LmSettings::default(),
            seed: 1,
        }
    }

    pub fn check(&self, p: &GrowthParameters, z: &ZoneRuleSet) -> Result<()> {
        let bad = |m: String| Err(ModelError::Domain(m));
        for f in &self.continuous {
            if !f.param.applies_to(p) {
                return bad(format!("free parameter {} does not exist", f.param));
            }
            if !(f.lo.is_finite() && f.hi.is_finite() && f.lo < f.hi) {
                return bad(format!("bounds of {} must be finite and ordered", f.param));
            }
            if !(f.init >= f.lo && f.init <= f.hi) {
                return bad(format!("initial value of {} outside its bounds", f.param));
            }
        }
        for f in &self.topology {
            if f.coef.is_pinned() {
                return bad(format!("{} is pinned and cannot be free", f.coef));
            }
            if z.get(f.coef).is_none() {
                return bad(format!("zone of {} does not exist", f.coef));
            }
            if !(f.lo.is_finite() && f.hi.is_finite() && f.lo < f.hi) {
                return bad(format!("bounds of {} must be finite and ordered", f.coef));
            }
            if !(f.init >= f.lo && f.init <= f.hi) {
                return bad(format!("initial value of {} outside its bounds", f.coef));
            }
        }
        for (c, w) in &self.weights {
            if let Weight::Fixed(x) = w {
                if !(*x > 0.0 && x.is_finite()) {
                    return bad(format!("weight of {c} must be > 0"));
                }
            }
        }
        let a = &self.anneal;
        if !(a.cooling > 0.0 && a.cooling < 1.0 && a.stop_ratio > 0.0 && a.stop_ratio < 1.0) {
            return bad("annealing needs cooling and stop ratio in (0, 1)".into());
        }
        if let Nesting::Fast { k: 0 } = self.nesting {
            return bad("fast nesting needs k >= 1".into());
        }
        Ok(())
    }
}

/// Targets, weights and the fixed part of the model.
#[derive(Debug, Clone)]
pub struct Problem {
    pub base: GrowthParameters,
    pub zones: ZoneRuleSet,
    pub targets: Vec<TargetDataset>,
    pub observations: Vec<Vec<Observation>>,
    pub class_weights: BTreeMap<DataClass, f64>,
    class_means: BTreeMap<DataClass, f64>,
    evaluations: std::sync::Arc<AtomicU64>,
}

impl Problem {
    pub fn new(
        base: &GrowthParameters,
        zones: &ZoneRuleSet,
        targets: &[TargetDataset],
        weights: &BTreeMap<DataClass, Weight>,
    ) -> Result<Self> {
        if base.v_env.len() != targets.len() {
            return Err(ModelError::Domain(format!(
                "{} environment factors for {} target trees",
                base.v_env.len(),
                targets.len()
            )));
        }
        let obs: Vec<Vec<Observation>> = targets.iter().map(observations).collect();
        let mut sums: BTreeMap<DataClass, (f64, usize)> = BTreeMap::new();
        for o in obs.iter().flatten() {
            let e = sums.entry(o.class).or_default();
            e.0 += o.value.abs();
            e.1 += 1;
        }
        let class_means: BTreeMap<DataClass, f64> = sums
            .iter()
            .filter(|(_, &(s, _))| s > 0.0)
            .map(|(&c, &(s, n))| (c, s / n as f64))
            .collect();
        let class_weights = DataClass::ALL
            .iter()
            .map(|&c| {
                let w = match weights.get(&c).copied().unwrap_or(Weight::Auto) {
                    Weight::Fixed(x) => x,
                    Weight::Auto => match sums.get(&c) {
                        Some(&(s, n)) if s > 0.0 => {
                            let mean = s / n as f64;
                            1.0 / (mean * mean)
                        }
                        _ => 1.0,
                    },
                };
                (c, w)
            })
            .collect();
        Ok(Self {
            base: base.clone(),
            zones: zones.clone(),
            targets: targets.to_vec(),
            observations: obs,
            class_weights,
            class_means,
            evaluations: Default::default(),
        })
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn simulate_all(
        &self,
        p: &GrowthParameters,
        z: &ZoneRuleSet,
    ) -> Result<Vec<SimulationOutput>> {
        self.targets
            .iter()
            .enumerate()
            .map(|(t, d)| simulate(p, z, &d.trunk_script, t, d.tree_age))
            .collect()
    }

    /// Weighted residuals `√w·(sim − obs)` over all trees, or `None` when a
    /// simulation fails.
    pub fn residuals(&self, p: &GrowthParameters, z: &ZoneRuleSet) -> Option<Vec<f64>> {
        self.residuals_as(p, z, Metric::Weighted, None)
    }

    /// Log-ratio residuals `ln((sim + δ)/(obs + δ))`, with `δ` a thousandth
    /// of the class mean; every class counts equally.
    pub fn relative_residuals(&self, p: &GrowthParameters, z: &ZoneRuleSet) -> Option<Vec<f64>> {
        self.residuals_as(p, z, Metric::Relative, None)
    }

    fn residuals_as(
        &self,
        p: &GrowthParameters,
        z: &ZoneRuleSet,
        metric: Metric,
        frozen: Option<&[Vec<f64>]>,
    ) -> Option<Vec<f64>> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut r = Vec::new();
        for (t, d) in self.targets.iter().enumerate() {
            let out = match frozen {
                Some(f) => simulate_frozen(p, z, &d.trunk_script, t, d.tree_age, &f[t]),
                None => simulate(p, z, &d.trunk_script, t, d.tree_age),
            }
            .ok()?;
            let obs = &self.observations[t];
            let sim = extract_targets(&out, obs).ok()?;
            for (o, s) in obs.iter().zip(sim) {
                let x = match metric {
                    Metric::Weighted => self.class_weights[&o.class].sqrt() * (s - o.value),
                    Metric::Relative => {
                        let delta =
                            1e-3 * self.class_means.get(&o.class).copied().unwrap_or(1.0);
                        ((s.max(0.0) + delta) / (o.value.max(0.0) + delta)).ln()
                    }
                };
                if !x.is_finite() {
                    return None;
                }
                r.push(x);
            }
        }
        Some(r)
    }

    /// Weighted sum of squared differences; failures map to +∞.
    pub fn objective(&self, p: &GrowthParameters, z: &ZoneRuleSet) -> f64 {
        self.residuals(p, z)
            .map_or(f64::INFINITY, |r| r.iter().map(|x| x * x).sum())
    }

    /// Rounding decisions of all trees.
    pub fn decisions(&self, p: &GrowthParameters, z: &ZoneRuleSet) -> Result<Vec<Decision>> {
        Ok(self
            .simulate_all(p, z)?
            .into_iter()
            .flat_map(|o| o.decisions)
            .collect())
    }
}

/// Weighted least-squares objective of a parameter set against targets.
pub fn objective(
    p: &GrowthParameters,
    z: &ZoneRuleSet,
    targets: &[TargetDataset],
    weights: &BTreeMap<DataClass, Weight>,
) -> f64 {
    match Problem::new(p, z, targets, weights) {
        Ok(problem) => problem.objective(p, z),
        Err(_) => f64::INFINITY,
    }
}

fn realize(
    problem: &Problem,
    spec: &FitSpec,
    x: &[f64],
    t: &[f64],
) -> (GrowthParameters, ZoneRuleSet) {
    let mut p = problem.base.clone();
    for (f, &v) in spec.continuous.iter().zip(x) {
        f.param.set(&mut p, v);
    }
    let mut z = problem.zones.clone();
    for (f, &v) in spec.topology.iter().zip(t) {
        z.set(f.coef, v);
    }
    (p, z)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuousFit {
    pub values: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Bounded Levenberg–Marquardt descent over the free continuous parameters,
/// with the topological coefficients held at `topo`.
pub fn fit_continuous(
    problem: &Problem,
    spec: &FitSpec,
    topo: &[f64],
    start: &[f64],
    max_iter: usize,
) -> Result<ContinuousFit> {
    refit(problem, spec, topo, start, max_iter, spec.lm.max_rounds, false)
}

fn refit(
    problem: &Problem,
    spec: &FitSpec,
    topo: &[f64],
    start: &[f64],
    max_iter: usize,
    max_rounds: usize,
    warm: bool,
) -> Result<ContinuousFit> {
    let start: Vec<f64> = spec
        .continuous
        .iter()
        .zip(start)
        .map(|(f, &x)| x.clamp(f.lo, f.hi))
        .collect();
    let true_objective = |x: &[f64]| {
        let (p, z) = realize(problem, spec, x, topo);
        problem.objective(&p, &z)
    };
    let mut best = ContinuousFit {
        objective: true_objective(&start),
        values: start.clone(),
        iterations: 0,
    };
    let mut iterations = 0;
    let mut x = start;
    let mut seen: Vec<Vec<Topology>> = Vec::new();
    // Rounded counts make the objective piecewise; fit on a frozen topology,
    // then refresh the topology from the new estimates until it repeats.
    for _ in 0..max_rounds {
        let (p, z) = realize(problem, spec, &x, topo);
        let Ok(outs) = problem.simulate_all(&p, &z) else {
            break;
        };
        let topologies: Vec<Topology> = outs.iter().map(|o| o.topology.clone()).collect();
        if seen.contains(&topologies) {
            break;
        }
        seen.push(topologies);
        let ratios: Vec<Vec<f64>> = outs
            .iter()
            .map(|o| o.cycles.iter().map(|c| c.ratio_used).collect())
            .collect();
        // Growth compounds multiplicatively, so relative errors condition
        // the first descent far better than absolute ones.
        let rough = if warm {
            ContinuousFit {
                values: x.clone(),
                objective: f64::NAN,
                iterations: 0,
            }
        } else {
            match descend(problem, spec, topo, &x, max_iter, Metric::Relative, Some(&ratios)) {
                Ok(f) => f,
                Err(_) => break,
            }
        };
        let Ok(fine) = descend(
            problem,
            spec,
            topo,
            &rough.values,
            max_iter,
            Metric::Weighted,
            Some(&ratios),
        ) else {
            break;
        };
        iterations += rough.iterations + fine.iterations;
        // Line search on the true objective toward the frozen optimum keeps
        // the topology from jumping to an unrelated fixed point.
        let scales: Vec<Scale> = spec.continuous.iter().map(Scale::of).collect();
        let u0: Vec<f64> = scales.iter().zip(&x).map(|(s, &v)| s.to_u(v)).collect();
        let u1: Vec<f64> = scales.iter().zip(&fine.values).map(|(s, &v)| s.to_u(v)).collect();
        let mut step_best: Option<(Vec<f64>, f64)> = None;
        let mut t = 1.0;
        for _ in 0..LINE_SEARCH_STEPS {
            let cand: Vec<f64> = scales
                .iter()
                .enumerate()
                .map(|(j, s)| s.to_x(u0[j] + t * (u1[j] - u0[j])))
                .collect();
            let e = true_objective(&cand);
            if step_best.as_ref().is_none_or(|b| e < b.1) {
                step_best = Some((cand, e));
            }
            t *= 0.5;
        }
        let Some((cand, e)) = step_best else {
            break;
        };
        if !(e < best.objective) {
            break;
        }
        best = ContinuousFit {
            values: cand.clone(),
            objective: e,
            iterations: 0,
        };
        x = cand;
    }
    if best.objective.is_finite() && !warm {
        let polish = descend(problem, spec, topo, &best.values, max_iter, Metric::Weighted, None)?;
        iterations += polish.iterations;
        if polish.objective < best.objective {
            best = polish;
        }
    }
    if !best.objective.is_finite() {
        return Err(ModelError::Unfittable(
            "no candidate parameter set simulates".into(),
        ));
    }
    best.iterations = iterations;
    Ok(best)
}

const LINE_SEARCH_STEPS: usize = 6;
const MAX_REJECTED_STEPS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Weighted,
    Relative,
}

fn descend(
    problem: &Problem,
    spec: &FitSpec,
    topo: &[f64],
    start: &[f64],
    max_iter: usize,
    metric: Metric,
    frozen: Option<&[Vec<f64>]>,
) -> Result<ContinuousFit> {
    let scales: Vec<Scale> = spec.continuous.iter().map(Scale::of).collect();
    let np = scales.len();
    let to_x = |u: &[f64]| -> Vec<f64> { (0..np).map(|j| scales[j].to_x(u[j])).collect() };
    let resid = |u: &[f64]| {
        let (p, z) = realize(problem, spec, &to_x(u), topo);
        problem.residuals_as(&p, &z, metric, frozen)
    };
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();

    let start: Vec<f64> = spec
        .continuous
        .iter()
        .zip(start)
        .map(|(f, &x)| x.clamp(f.lo, f.hi))
        .collect();
    let mut u: Vec<f64> = (0..np).map(|j| scales[j].to_u(start[j])).collect();
    let mut moved = false;
    let Some(mut r) = resid(&u) else {
        return Err(ModelError::Unfittable(
            "the starting point does not simulate".into(),
        ));
    };
    let mut c = cost(&r);
    let lm = &spec.lm;
    let mut mu = 1e-3;
    let mut radius = lm.initial_radius;
    // A frozen topology makes the objective smooth.
    let mut h = if frozen.is_some() {
        lm.fd_step
    } else {
        lm.coarse_fd_step.max(lm.fd_step)
    };
    let mut iterations = 0;
    while iterations < max_iter && np > 0 && c > 0.0 {
        iterations += 1;
        let cols: Vec<Vec<f64>> = (0..np)
            .into_par_iter()
            .map(|j| {
                let mut uj = u.clone();
                let step = if u[j] + h <= 1.0 { h } else { -h };
                uj[j] += step;
                match resid(&uj) {
                    Some(rj) if rj.len() == r.len() => {
                        rj.iter().zip(&r).map(|(a, b)| (a - b) / step).collect()
                    }
                    _ => vec![0.0; r.len()],
                }
            })
            .collect();
        let jac = DMatrix::from_fn(r.len(), np, |i, j| cols[j][i]);
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);
        let a = jac.tr_mul(&jac);
        let free: Vec<usize> = (0..np)
            .filter(|&j| {
                let at_lo = u[j] <= 0.0 && g[j] > 0.0;
                let at_hi = u[j] >= 1.0 && g[j] < 0.0;
                !(at_lo || at_hi) && a[(j, j)] > 0.0
            })
            .collect();
        if free.is_empty() {
            if h > lm.fd_step {
                h = (h * 0.1).max(lm.fd_step);
                continue;
            }
            break;
        }
        let nf = free.len();
        let af = DMatrix::from_fn(nf, nf, |i, k| a[(free[i], free[k])]);
        let gf = DVector::from_fn(nf, |i, _| g[free[i]]);
        let dmax = (0..nf).map(|i| af[(i, i)]).fold(0.0, f64::max);
        let mut accepted = false;
        let mut small_step = false;
        for _ in 0..MAX_REJECTED_STEPS {
            let mut m = af.clone();
            for i in 0..nf {
                m[(i, i)] += mu * af[(i, i)].max(1e-12 * dmax);
            }
            let delta = match m.clone().cholesky() {
                Some(ch) => ch.solve(&(-&gf)),
                None => match m.lu().solve(&(-&gf)) {
                    Some(d) => d,
                    None => {
                        mu *= 4.0;
                        continue;
                    }
                },
            };
            let longest = delta.amax();
            let shrink = if longest > radius { radius / longest } else { 1.0 };
            let mut trial = u.clone();
            let mut max_move: f64 = 0.0;
            for (i, &j) in free.iter().enumerate() {
                trial[j] = (u[j] + shrink * delta[i]).clamp(0.0, 1.0);
                max_move = max_move.max((trial[j] - u[j]).abs());
            }
            if max_move <= lm.xtol {
                small_step = true;
                break;
            }
            if let Some(rt) = resid(&trial) {
                let ct = cost(&rt);
                if ct < c {
                    let gain = (c - ct) / c;
                    u = trial;
                    r = rt;
                    c = ct;
                    mu = (mu / 3.0).max(1e-12);
                    radius = (radius * 2.0).min(1.0);
                    accepted = true;
                    moved = true;
                    if gain <= lm.ftol {
                        small_step = true;
                    }
                    break;
                }
            }
            mu *= 4.0;
            radius = (radius * 0.5).max(lm.xtol);
        }
        if !accepted || small_step {
            // Coarse differences see past small jumps; refine once they stall.
            if h > lm.fd_step {
                h = (h * 0.1).max(lm.fd_step);
                mu = 1e-3;
                radius = lm.initial_radius;
                continue;
            }
            break;
        }
    }
    Ok(ContinuousFit {
        values: if moved { to_x(&u) } else { start },
        objective: c,
        iterations,
    })
}

/// Map of a bounded parameter onto `[0, 1]`; logarithmic for positive
/// ranges spanning more than a decade.
#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Scale {
    fn of(f: &FreeParam) -> Self {
        Self {
            lo: f.lo,
            hi: f.hi,
            log: f.lo > 0.0 && f.hi / f.lo > 10.0,
        }
    }

    fn to_x(&self, u: f64) -> f64 {
        let x = if self.log {
            self.lo * (u * (self.hi / self.lo).ln()).exp()
        } else {
            self.lo + u * (self.hi - self.lo)
        };
        x.clamp(self.lo, self.hi)
    }

    fn to_u(&self, x: f64) -> f64 {
        let u = if self.log {
            (x / self.lo).ln() / (self.hi / self.lo).ln()
        } else {
            (x - self.lo) / (self.hi - self.lo)
        };
        u.clamp(0.0, 1.0)
    }
}

/// Structural interval of one topological coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoEstimate {
    pub coef: String,
    pub value: f64,
    /// Lower end, at least 0.
    pub lo: Option<f64>,
    /// Upper end; `None` is unbounded (capped zone).
    pub hi: Option<f64>,
    /// False when no simulated decision depends on the coefficient; the
    /// interval is then the search bounds.
    pub engaged: bool,
}

impl TopoEstimate {
    pub fn contains(&self, v: f64) -> bool {
        self.lo.is_none_or(|lo| v >= lo) && self.hi.is_none_or(|hi| v < hi)
    }
}

/// Intervals over which each free coefficient leaves every rounded count of
/// every tree unchanged, all else held fixed.
pub fn compute_intervals(
    problem: &Problem,
    spec: &FitSpec,
    x: &[f64],
    t: &[f64],
) -> Result<Vec<TopoEstimate>> {
    let (p, z) = realize(problem, spec, x, t);
    let decisions = problem.decisions(&p, &z)?;
    Ok(spec
        .topology
        .iter()
        .zip(t)
        .map(|(f, &v)| {
            let r = coefficient_range(&decisions, &z, f.coef);
            if r.engaged {
                TopoEstimate {
                    coef: f.coef.to_string(),
                    value: v,
                    // Coefficients are non-negative.
                    lo: Some(r.lo.unwrap_or(0.0).max(0.0)),
                    hi: r.hi,
                    engaged: true,
                }
            } else {
                TopoEstimate {
                    coef: f.coef.to_string(),
                    value: v,
                    lo: Some(f.lo),
                    hi: Some(f.hi),
                    engaged: false,
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub value: f64,
    pub init: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub level: usize,
    pub temperature: f64,
    pub current: f64,
    pub best: f64,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedRow {
    pub tree: usize,
    pub class: DataClass,
    pub locus: String,
    pub observed: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub continuous: Vec<ParamEstimate>,
    pub environment: Vec<f64>,
    pub topology: Vec<TopoEstimate>,
    pub objective: f64,
    pub trace: Vec<TracePoint>,
    pub r_squared: BTreeMap<DataClass, f64>,
    pub predicted: Vec<PredictedRow>,
    pub evaluations: u64,
    pub seed: u64,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.continuous
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.value)
    }

    pub fn interval(&self, coef: &str) -> Option<&TopoEstimate> {
        self.topology.iter().find(|e| e.coef == coef)
    }

    /// Parameters and zones of the fitted model.
    pub fn apply(&self, p: &GrowthParameters, z: &ZoneRuleSet) -> (GrowthParameters, ZoneRuleSet) {
        let mut p = p.clone();
        for e in &self.continuous {
            if let Some(param) = ContinuousParam::parse(&e.name) {
                param.set(&mut p, e.value);
            }
        }
        let mut z = z.clone();
        for e in &self.topology {
            if let Some(c) = TopoCoef::parse(&e.coef) {
                z.set(c, e.value);
            }
        }
        (p, z)
    }
}

/// `1 − SS_res/SS_tot` per data class, pooled over trees.
pub fn r_squared(rows: &[PredictedRow]) -> BTreeMap<DataClass, f64> {
    let mut out = BTreeMap::new();
    for class in DataClass::ALL {
        let sel: Vec<&PredictedRow> = rows.iter().filter(|r| r.class == class).collect();
        if sel.is_empty() {
            continue;
        }
        let mean = sel.iter().map(|r| r.observed).sum::<f64>() / sel.len() as f64;
        let ss_tot: f64 = sel.iter().map(|r| (r.observed - mean).powi(2)).sum();
        let ss_res: f64 = sel.iter().map(|r| (r.observed - r.predicted).powi(2)).sum();
        if ss_tot > 0.0 {
            out.insert(class, 1.0 - ss_res / ss_tot);
        } else if ss_res == 0.0 {
            out.insert(class, 1.0);
        }
    }
    out
}

/// Predicted-vs-observed table of a parameter set.
pub fn predicted_rows(
    problem: &Problem,
    p: &GrowthParameters,
    z: &ZoneRuleSet,
) -> Result<Vec<PredictedRow>> {
    let outs = problem.simulate_all(p, z)?;
    let mut rows = Vec::new();
    for (t, out) in outs.iter().enumerate() {
        let obs = &problem.observations[t];
        let sim = extract_targets(out, obs)?;
        for (o, s) in obs.iter().zip(sim) {
            rows.push(PredictedRow {
                tree: t,
                class: o.class,
                locus: o.locus.to_string(),
                observed: o.value,
                predicted: s,
            });
        }
    }
    Ok(rows)
}

/// Whole identification: continuous fit at the initial topology, annealing
/// over the topological coefficients, final polish and intervals.
pub fn fit(
    base: &GrowthParameters,
    zones: &ZoneRuleSet,
    targets: &[TargetDataset],
    spec: &FitSpec,
) -> Result<FitResult> {
    spec.check(base, zones)?;
    let problem = Problem::new(base, zones, targets, &spec.weights)?;
    fit_topology(&problem, spec)
}

#[derive(Debug, Clone)]
struct Point {
    x: Vec<f64>,
    t: Vec<f64>,
    e: f64,
}

/// Annealing over topological coefficients with nested continuous fits.
pub fn fit_topology(problem: &Problem, spec: &FitSpec) -> Result<FitResult> {
    let lm = &spec.lm;
    let x0: Vec<f64> = spec.continuous.iter().map(|f| f.init).collect();
    let t0: Vec<f64> = spec.topology.iter().map(|f| f.init).collect();
    let first = fit_continuous(problem, spec, &t0, &x0, lm.max_iter)?;
    let mut cur = Point {
        x: first.values,
        t: t0,
        e: first.objective,
    };
    let mut best = cur.clone();
    let mut trace = Vec::new();

    let nt = spec.topology.len();
    if nt > 0 && cur.e > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let temp0 = spec.anneal.t0.unwrap_or(0.1 * cur.e).max(f64::MIN_POSITIVE);
        let mut temp = temp0;
        let mut intervals = compute_intervals(problem, spec, &cur.x, &cur.t)?;
        let mut structural_moves = 0usize;
        let mut level = 0;
        while temp / temp0 >= spec.anneal.stop_ratio {
            let mut accepted = 0;
            let scale = (temp / temp0).sqrt();
            for _ in 0..spec.anneal.proposals_per_temperature {
                let j = rng.random_range(0..nt);
                let f = &spec.topology[j];
                let step = (f.hi - f.lo) * 0.5 * scale * (2.0 * rng.random::<f64>() - 1.0);
                let v = (cur.t[j] + step).clamp(f.lo, f.hi);
                let u: f64 = rng.random();
                if intervals[j].contains(v) {
                    // Same structure, same objective.
                    cur.t[j] = v;
                    intervals[j].value = v;
                    accepted += 1;
                    continue;
                }
                let mut t = cur.t.clone();
                t[j] = v;
                let (x, e) = match spec.nesting {
                    Nesting::Full => {
                        match refit(problem, spec, &t, &cur.x, lm.inner_max_iter, lm.inner_max_rounds, true) {
                            Ok(fit) => (fit.values, fit.objective),
                            Err(_) => (cur.x.clone(), f64::INFINITY),
                        }
                    }
                    Nesting::Fast { .. } => {
                        let (p, z) = realize(problem, spec, &cur.x, &t);
                        (cur.x.clone(), problem.objective(&p, &z))
                    }
                };
                let accept = e <= cur.e || u < (-(e - cur.e) / temp).exp();
                if !accept {
                    continue;
                }
                accepted += 1;
                cur = Point { x, t, e };
                structural_moves += 1;
                if let Nesting::Fast { k } = spec.nesting {
                    if structural_moves.is_multiple_of(k) {
                        if let Ok(fit) =
                            refit(problem, spec, &cur.t, &cur.x, lm.inner_max_iter, lm.inner_max_rounds, true)
                        {
                            cur.x = fit.values;
                            cur.e = fit.objective;
                        }
                    }
                }
                if cur.e < best.e {
                    best = cur.clone();
                }
                intervals = compute_intervals(problem, spec, &cur.x, &cur.t)?;
            }
            trace.push(TracePoint {
                level,
                temperature: temp,
                current: cur.e,
                best: best.e,
                accepted,
            });
            log::debug!("level {level}: T={temp:.3e} E={:.6e} best={:.6e}", cur.e, best.e);
            level += 1;
            temp *= spec.anneal.cooling;
        }
    }

    let polish = fit_continuous(problem, spec, &best.t, &best.x, lm.max_iter)?;
    if polish.objective <= best.e {
        best.x = polish.values;
        best.e = polish.objective;
    }
    finish(problem, spec, best, trace)
}

fn finish(problem: &Problem, spec: &FitSpec, best: Point, trace: Vec<TracePoint>) -> Result<FitResult> {
    let topology = compute_intervals(problem, spec, &best.x, &best.t)?;
    let (p, z) = realize(problem, spec, &best.x, &best.t);
    let predicted = predicted_rows(problem, &p, &z)?;
    Ok(FitResult {
        continuous: spec
            .continuous
            .iter()
            .zip(&best.x)
            .map(|(f, &v)| ParamEstimate {
                name: f.param.to_string(),
                value: v,
                init: f.init,
                lo: f.lo,
                hi: f.hi,
            })
            .collect(),
        environment: p.v_env.clone(),
        topology,
        objective: best.e,
        trace,
        r_squared: r_squared(&predicted),
        predicted,
        evaluations: problem.evaluations(),
        seed: spec.seed,
    })
}
