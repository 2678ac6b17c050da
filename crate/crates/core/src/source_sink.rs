//! Production, demand and allocation: the scalar numerics of one growth cycle.

use crate::error::{ModelError, Result};
use serde::{Deserialize, Serialize};

/// Biomass production of the crown for a blade area `s_blade` (m²), with the
/// extinction coefficient fixed to 1.
///
/// `Q = V · Sp0 · (S/Sp0)^α · (1 − exp(−(S/Sp0)^(1−α)))`, in the mass unit of `v`.
pub fn production(s_blade: f64, v: f64, sp0: f64, alpha: f64) -> Result<f64> {
    production_beer(s_blade, v, sp0, alpha, 1.0)
}

/// Beer-law production with a projected crown surface `Sp = Sp0·(S/Sp0)^α`.
pub fn production_beer(s_blade: f64, v: f64, sp0: f64, alpha: f64, k: f64) -> Result<f64> {
    if !(s_blade >= 0.0) || !s_blade.is_finite() {
        return Err(ModelError::Domain(format!(
            "blade area must be finite and >= 0, got {s_blade}"
        )));
    }
    if !(sp0 > 0.0) {
        return Err(ModelError::Domain(format!("sp0 must be > 0, got {sp0}")));
    }
    if s_blade == 0.0 {
        return Ok(0.0);
    }
    let sp = sp0 * (s_blade / sp0).powf(alpha);
    Ok(v * sp * -(-k * s_blade / sp).exp_m1())
}

/// Total demand of the buds that will expand next cycle.
pub fn shoot_demand(bud_counts: &[u64], p_s: &[f64]) -> f64 {
    bud_counts
        .iter()
        .zip(p_s)
        .map(|(&n, &s)| n as f64 * s)
        .sum()
}

/// Ring demand as a power of the supply/demand ratio.
pub fn ring_demand(ratio: f64, p_r: f64, gamma: f64) -> f64 {
    p_r * ratio.powf(gamma)
}

const NEWTON_MAX_ITER: usize = 100;
const START_FLOOR: f64 = 1e-9;

/// Solves `D = d_s + p_r·(q/D)^γ` for its unique positive root.
///
/// Newton's method starts right of the root; the residual is increasing and
/// concave, so iterates stay bracketed. A bisection pass finishes the job if
/// the iteration cap is hit.
pub fn solve_global_demand(d_s: f64, p_r: f64, gamma: f64, q: f64) -> Result<f64> {
    let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
    if !(finite_nonneg(d_s) && finite_nonneg(p_r) && finite_nonneg(gamma) && finite_nonneg(q)) {
        return Err(ModelError::Domain(format!(
            "demand solve needs finite non-negative inputs (d_s={d_s}, p_r={p_r}, gamma={gamma}, q={q})"
        )));
    }
    if d_s == 0.0 && p_r == 0.0 {
        return Err(ModelError::Domain("demand solve with no sink at all".into()));
    }
    if p_r == 0.0 {
        return Ok(d_s);
    }
    if gamma == 0.0 {
        return Ok(d_s + p_r);
    }
    if q == 0.0 {
        if d_s == 0.0 {
            return Err(ModelError::Domain(
                "no production and no shoot demand: demand is undefined".into(),
            ));
        }
        return Ok(d_s);
    }

    let c = p_r * q.powf(gamma);
    let f = |d: f64| d - d_s - c * d.powf(-gamma);
    let df = |d: f64| 1.0 + gamma * c * d.powf(-gamma - 1.0);

    let mut lo = d_s;
    let mut hi = d_s + p_r * (q / d_s.max(START_FLOOR)).powf(gamma);
    if !hi.is_finite() {
        hi = d_s.max(1.0);
        while f(hi) < 0.0 {
            hi *= 2.0;
        }
    }
    let mut x = hi;
    for _ in 0..NEWTON_MAX_ITER {
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let mut next = x - fx / df(x);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x {
            return Ok(next);
        }
        x = next;
    }
    log::warn!("Newton demand solve did not converge, falling back to bisection");
    Ok(bisect_demand(d_s, c, gamma, lo, hi))
}

fn bisect_demand(d_s: f64, c: f64, gamma: f64, mut lo: f64, mut hi: f64) -> f64 {
    let f = |d: f64| d - d_s - c * d.powf(-gamma);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Whole-plant allocation of one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleAllocation {
    pub q: f64,
    pub d: f64,
    pub d_s: f64,
    pub d_r: f64,
    pub q_s: f64,
    pub q_r: f64,
    pub ratio: f64,
}

impl CycleAllocation {
    /// Splits production between shoots and rings in proportion to demands.
    pub fn compute(q: f64, d_s: f64, p_r: f64, gamma: f64) -> Result<Self> {
        let d = solve_global_demand(d_s, p_r, gamma, q)?;
        let d_r = d - d_s;
        let q_s = q * (d_s / d);
        let q_r = q - q_s;
        Ok(Self {
            q,
            d,
            d_s,
            d_r,
            q_s,
            q_r,
            ratio: q / d,
        })
    }
}

/// Per-shoot biomass for every PA.
pub fn allocate_shoots(q_s: f64, d_s: f64, bud_counts: &[u64], p_s: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(bud_counts.len(), p_s.len());
    if d_s <= 0.0 {
        if q_s > 0.0 {
            return Err(ModelError::Allocation { q_s });
        }
        return Ok(vec![0.0; p_s.len()]);
    }
    Ok(p_s.iter().map(|&s| s * q_s / d_s).collect())
}

/// Splits a metamer's mass into `(internode, leaf)` with a fixed mass ratio.
pub fn split_metamer(mass: f64, internode_leaf_ratio: f64) -> (f64, f64) {
    let internode = mass * internode_leaf_ratio / (1.0 + internode_leaf_ratio);
    (internode, mass - internode)
}

/// One ring-receiving cohort of identical metamers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingSink {
    pub multiplicity: f64,
    /// Leaf area above the metamer (cm²).
    pub leaves_above: f64,
    pub p_rg: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingPartition {
    /// Ring increment of one instance of each cohort (g).
    pub increments: Vec<f64>,
    pub effective_lambda: f64,
    /// Set when no leaf area was available for the Pressler term.
    pub degenerate_foliage: bool,
}

/// Distributes the ring compartment over metamers, mixing a uniform pool
/// mode with a leaf-area-weighted mode.
pub fn partition_rings(q_r: f64, sinks: &[RingSink], lambda: f64) -> Result<RingPartition> {
    let mut demand = RingDemand::default();
    for s in sinks {
        demand.add(s);
    }
    let shares = demand.shares(q_r, lambda)?;
    Ok(RingPartition {
        increments: sinks.iter().map(|s| shares.increment(s)).collect(),
        effective_lambda: shares.effective_lambda,
        degenerate_foliage: shares.degenerate_foliage,
    })
}

/// Running totals of the pool and Pressler demands.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RingDemand {
    pub pool: f64,
    pub pressler: f64,
}

impl RingDemand {
    pub fn add(&mut self, s: &RingSink) {
        let w = s.multiplicity * s.p_rg * s.length;
        self.pool += w;
        self.pressler += w * s.leaves_above;
    }

    pub fn shares(&self, q_r: f64, lambda: f64) -> Result<RingShares> {
        if q_r == 0.0 {
            return Ok(RingShares {
                q_r,
                pool: 0.0,
                pressler: 0.0,
                effective_lambda: lambda,
                degenerate_foliage: false,
            });
        }
        if !(self.pool > 0.0) {
            return Err(ModelError::NoRingSink { q_r });
        }
        let degenerate = lambda > 0.0 && !(self.pressler > 0.0);
        let lambda = if degenerate { 0.0 } else { lambda };
        Ok(RingShares {
            q_r,
            pool: (1.0 - lambda) / self.pool,
            pressler: if lambda > 0.0 { lambda / self.pressler } else { 0.0 },
            effective_lambda: lambda,
            degenerate_foliage: degenerate,
        })
    }
}

/// Per-sink increment rule once the totals are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingShares {
    q_r: f64,
    pool: f64,
    pressler: f64,
    pub effective_lambda: f64,
    pub degenerate_foliage: bool,
}

impl RingShares {
    /// Ring increment of one instance of `s`.
    pub fn increment(&self, s: &RingSink) -> f64 {
        if self.q_r == 0.0 {
            return 0.0;
        }
        let pressler = if self.pressler > 0.0 {
            self.pressler * s.leaves_above
        } else {
            0.0
        };
        (self.pool + pressler) * s.p_rg * s.length * self.q_r
    }
}
