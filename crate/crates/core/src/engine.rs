//! Growth-cycle loop over a factorized tree.
//!
//! All axes sharing a physiological age and a birth cycle grow identically,
//! so the tree is stored as one [`AxisClass`] per `(pa, birth_cycle)` with a
//! multiplicity. A metamer is then identified by its class, the birth cycle
//! of its growth unit and its rank inside that unit.

use crate::error::{ModelError, Result};
use crate::model::{GrowthParameters, ScriptEntry, ZoneRuleSet, CM2_PER_M2, TRUNK_PA};
use crate::source_sink::{
    allocate_shoots, production_beer, shoot_demand, split_metamer,
    CycleAllocation, RingDemand, RingSink,
};
use crate::topology::{
    plan_organogenesis, total_range, trunk_layout, Decision, OrganogenesisPlan, PositionGroup,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metamer {
    /// PA of the axillary bud (0 in the unbranched zone).
    pub axillary_pa: u8,
    pub internode_mass: f64,
    pub length: f64,
    pub leaf_mass: f64,
    /// cm².
    pub leaf_area: f64,
    /// Cumulated cambial increments (g).
    pub ring_mass: f64,
    /// Class of the axis borne in this metamer's axil.
    pub borne: Option<ClassId>,
    /// Leaf area above this metamer at the last ring partition (cm²).
    pub leaves_above: f64,
}

impl Metamer {
    pub fn wood_mass(&self) -> f64 {
        self.internode_mass + self.ring_mass
    }

    /// External diameter of the cylinder holding the wood (cm).
    pub fn diameter(&self, wood_density: f64) -> Result<f64> {
        cylinder_diameter(self.wood_mass(), self.length, wood_density)
    }
}

/// Diameter of a cylinder of given mass, length and density.
pub fn cylinder_diameter(wood: f64, length: f64, density: f64) -> Result<f64> {
    if length <= 0.0 {
        if wood > 0.0 {
            return Err(ModelError::DegenerateGeometry { wood });
        }
        return Ok(0.0);
    }
    Ok((4.0 * wood / (density * PI * length)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthUnit {
    pub birth_cycle: u32,
    /// `(axillary PA, metamers)` zones, basal to apical.
    pub layout: Vec<(u8, u32)>,
    pub metamers: Vec<Metamer>,
    /// Mean external diameter at the end of every cycle since birth
    /// (trunk units only).
    pub diameter_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisClass {
    pub pa: u8,
    pub birth_cycle: u32,
    pub multiplicity: u64,
    pub units: Vec<GrowthUnit>,
}

/// Position of one metamer cohort inside the factorized tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct MetamerId {
    pub class: ClassId,
    pub unit: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub cycle: u32,
    /// Blade area S(n) (m²).
    pub s_blade: f64,
    /// Ratio that drove the organogenesis of this cycle.
    pub ratio_used: f64,
    pub allocation: CycleAllocation,
    /// Shoots funded for the next cycle, per PA.
    pub bud_counts: Vec<u64>,
    /// Σ multiplicity × ring increment.
    pub ring_total: f64,
    pub effective_lambda: f64,
    pub degenerate_foliage: bool,
    /// Axes requested minus axes placed.
    pub axis_slack: i64,
}

#[derive(Debug, Clone)]
struct Pending {
    /// Mass of one shoot, per PA.
    shoot_mass: Vec<f64>,
    /// Zone layouts of new branch units, per PA.
    plan: Option<OrganogenesisPlan>,
}

/// Full state of one simulated tree.
#[derive(Debug, Clone)]
pub struct TreeState {
    pub cycle: u32,
    pub classes: Vec<AxisClass>,
    pub history: Vec<CycleRecord>,
    pending: Pending,
    /// Total mass of leaves ever expanded, weighted by multiplicity (g).
    pub leaves_produced: f64,
    /// Rounding outcomes that shaped the structure.
    pub decisions: Vec<Decision>,
}

impl TreeState {
    pub fn trunk(&self) -> &AxisClass {
        &self.classes[0]
    }

    pub fn metamer(&self, id: MetamerId) -> &Metamer {
        &self.classes[id.class].units[id.unit].metamers[id.rank]
    }

    /// Leaf area above a metamer cohort at the last partition (cm²).
    pub fn leaves_above(&self, id: MetamerId) -> f64 {
        self.metamer(id).leaves_above
    }

    /// Living leaf area of the whole tree (cm²).
    pub fn living_leaf_area(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| {
                c.multiplicity as f64
                    * c.units
                        .iter()
                        .filter(|u| u.birth_cycle == self.cycle)
                        .flat_map(|u| &u.metamers)
                        .map(|m| m.leaf_area)
                        .sum::<f64>()
            })
            .sum()
    }

    pub fn ratio_lagged(&self, q0: f64, p_s_trunk: f64) -> f64 {
        match self.history.last() {
            Some(r) => r.allocation.ratio,
            None => q0 / p_s_trunk,
        }
    }
}

/// Per-instance totals of the subtree rooted at each class.
#[derive(Debug, Clone, Default)]
struct SubtreeTotals {
    wood: Vec<f64>,
    living_leaf_mass: Vec<f64>,
}

/// One tree being simulated.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    params: &'a GrowthParameters,
    zones: &'a ZoneRuleSet,
    script: &'a [ScriptEntry],
    v: f64,
    frozen_ratios: Option<&'a [f64]>,
    state: TreeState,
}

impl<'a> Engine<'a> {
    pub fn new(
        params: &'a GrowthParameters,
        zones: &'a ZoneRuleSet,
        script: &'a [ScriptEntry],
        tree: usize,
    ) -> Result<Self> {
        let v = *params
            .v_env
            .get(tree)
            .ok_or(ModelError::MissingEnvironment(tree))?;
        let pa_count = usize::from(params.pa_max);
        let mut shoot_mass = vec![0.0; pa_count];
        shoot_mass[0] = params.q0;
        let state = TreeState {
            cycle: 0,
            classes: vec![AxisClass {
                pa: TRUNK_PA,
                birth_cycle: 1,
                multiplicity: 1,
                units: Vec::new(),
            }],
            history: Vec::new(),
            pending: Pending {
                shoot_mass,
                plan: None,
            },
            leaves_produced: 0.0,
            decisions: Vec::new(),
        };
        Ok(Self {
            params,
            zones,
            script,
            v,
            frozen_ratios: None,
            state,
        })
    }

    /// Replaces the lagged supply/demand ratio driving organogenesis at
    /// cycle `n` by `ratios[n - 1]`, which freezes the topology.
    pub fn with_frozen_ratios(mut self, ratios: &'a [f64]) -> Self {
        self.frozen_ratios = Some(ratios);
        self
    }

    pub fn state(&self) -> &TreeState {
        &self.state
    }

    pub fn into_state(self) -> TreeState {
        self.state
    }

    /// Runs one growth cycle.
    pub fn step(&mut self) -> Result<&CycleRecord> {
        let n = self.state.cycle + 1;
        self.step_inner(n).map_err(|e| e.at_cycle(n))?;
        Ok(self.state.history.last().expect("history was just appended"))
    }

    pub fn run(&mut self, cycles: u32) -> Result<()> {
        while self.state.cycle < cycles {
            self.step()?;
        }
        Ok(())
    }

    fn step_inner(&mut self, n: u32) -> Result<()> {
        let p = self.params;
        self.state.cycle = n;
        self.expand(n)?;

        let s_blade = self.state.living_leaf_area() / CM2_PER_M2;
        let q = production_beer(s_blade, self.v, p.sp0, p.alpha, p.k_beer)?
            * p.production_scale
            * (1.0 - p.root_fraction);

        let frozen = self
            .frozen_ratios
            .and_then(|r| r.get(n as usize - 1).copied());
        let ratio_used = match (frozen, self.state.history.last()) {
            (Some(r), _) => r,
            (None, Some(r)) => r.allocation.ratio,
            (None, None) => p.q0 / p.p_s(TRUNK_PA),
        };
        let axis_slack = self.organogenesis(n, ratio_used)?;

        let mut bud_counts = vec![0u64; usize::from(p.pa_max)];
        for c in &self.state.classes {
            bud_counts[usize::from(c.pa) - 1] += c.multiplicity;
        }
        let d_s = shoot_demand(&bud_counts, &p.p_s);
        let allocation = CycleAllocation::compute(q, d_s, p.p_r, p.gamma)?;
        self.state.pending.shoot_mass =
            allocate_shoots(allocation.q_s, allocation.d_s, &bud_counts, &p.p_s)?;

        let (ring_total, effective_lambda, degenerate_foliage) =
            self.grow_rings(n, allocation.q_r)?;

        self.state.history.push(CycleRecord {
            cycle: n,
            s_blade,
            ratio_used,
            allocation,
            bud_counts,
            ring_total,
            effective_lambda,
            degenerate_foliage,
            axis_slack,
        });
        Ok(())
    }

    /// Expands the shoots funded at the previous cycle.
    fn expand(&mut self, n: u32) -> Result<()> {
        let p = self.params;
        let slw = p.slw(f64::from(n));
        let pending = std::mem::replace(
            &mut self.state.pending,
            Pending {
                shoot_mass: Vec::new(),
                plan: None,
            },
        );
        if let Some(plan) = &pending.plan {
            for k in 2..p.short_shoot_pa() {
                if !self.state.classes.iter().any(|c| c.pa == k) {
                    continue;
                }
                let layout = plan.layout(k).unwrap_or_default();
                for (rule, &(_, count)) in self.zones.zones_of(k).zip(layout) {
                    self.state.decisions.push(Decision::Metamers {
                        cycle: n - 1,
                        bearer_pa: k,
                        axillary_pa: rule.axillary_pa,
                        ratio: plan.ratio,
                        count,
                    });
                }
            }
        }
        let mut leaves = 0.0;
        for class in &mut self.state.classes {
            let k = class.pa;
            let layout = if k == TRUNK_PA {
                let entry = self
                    .script
                    .iter()
                    .find(|e| e.gu_index == n)
                    .ok_or(ModelError::MissingScript(n))?;
                trunk_layout(entry)?
            } else if k == p.short_shoot_pa() {
                vec![(0, p.short_shoot_metamers)]
            } else {
                pending
                    .plan
                    .as_ref()
                    .and_then(|plan| plan.layout(k))
                    .map(<[_]>::to_vec)
                    .unwrap_or_default()
            };
            let unit = build_unit(p, k, n, layout, pending.shoot_mass[usize::from(k) - 1], slw);
            leaves += class.multiplicity as f64
                * unit.metamers.iter().map(|m| m.leaf_mass).sum::<f64>();
            class.units.push(unit);
        }
        self.state.leaves_produced += leaves;
        Ok(())
    }

    /// Creates the axes appearing next cycle; returns the axis slack.
    fn organogenesis(&mut self, n: u32, ratio: f64) -> Result<i64> {
        let p = self.params;
        let classes = &self.state.classes;
        let candidates = |bearer: u8| -> Vec<ClassId> {
            classes
                .iter()
                .enumerate()
                .filter(|(_, c)| c.pa == bearer && c.units.last().is_some_and(|u| u.birth_cycle == n))
                .map(|(i, _)| i)
                .collect()
        };
        let plan = plan_organogenesis(self.zones, 2..p.pa_max, ratio, |rule| {
            candidates(rule.bearer_pa)
                .into_iter()
                .map(|ci| {
                    let c = &classes[ci];
                    let unit = c.units.last().expect("candidate has a current unit");
                    PositionGroup {
                        birth_cycle: n,
                        rank: n - c.birth_cycle + 1,
                        size: c.multiplicity * zone_size(unit, rule.axillary_pa),
                    }
                })
                .collect()
        })?;

        // (class, axillary PA) pairs whose current unit receives axes.
        let mut bearers: Vec<(ClassId, u8)> = Vec::new();
        for zone in &plan.axes {
            if zone.positions > 0 {
                let (total_min, total_max) = total_range(&zone.groups, zone.assignment.assigned);
                self.state.decisions.push(Decision::Axes {
                    cycle: n,
                    bearer_pa: zone.bearer_pa,
                    axillary_pa: zone.axillary_pa,
                    ratio,
                    positions: zone.positions,
                    total_min,
                    total_max,
                });
            }
            let ids = candidates(zone.bearer_pa);
            for (ci, &per) in ids.iter().zip(&zone.assignment.per_position) {
                if per > 0 {
                    bearers.push((*ci, zone.axillary_pa));
                }
            }
        }
        // Scripted trunk branches.
        for &(k, _) in &self.state.classes[0].units.last().expect("trunk expanded").layout {
            if k != 0 {
                bearers.push((0, k));
            }
        }

        let mut new_count = vec![0u64; usize::from(p.pa_max) + 1];
        for &(ci, k) in &bearers {
            let c = &self.state.classes[ci];
            let unit = c.units.last().expect("bearer has a current unit");
            new_count[usize::from(k)] += c.multiplicity * zone_size(unit, k);
        }
        let mut new_id = vec![None; usize::from(p.pa_max) + 1];
        for k in 2..=p.pa_max {
            if new_count[usize::from(k)] > 0 {
                new_id[usize::from(k)] = Some(self.state.classes.len());
                self.state.classes.push(AxisClass {
                    pa: k,
                    birth_cycle: n + 1,
                    multiplicity: new_count[usize::from(k)],
                    units: Vec::new(),
                });
            }
        }
        for &(ci, k) in &bearers {
            let unit = self.state.classes[ci]
                .units
                .last_mut()
                .expect("bearer has a current unit");
            for m in unit.metamers.iter_mut().filter(|m| m.axillary_pa == k) {
                m.borne = new_id[usize::from(k)];
            }
        }
        let slack = plan.slack();
        self.state.pending.plan = Some(plan);
        Ok(slack)
    }

    /// Computes leaf areas above every metamer, partitions `q_r` and records
    /// trunk diameters. Returns `(Σ weighted increments, λ used, degenerate)`.
    fn grow_rings(&mut self, n: u32, q_r: f64) -> Result<(f64, f64, bool)> {
        let p = self.params;
        self.refresh_leaves_above(n);
        let sink = |c: &AxisClass, m: &Metamer| RingSink {
            multiplicity: c.multiplicity as f64,
            leaves_above: m.leaves_above,
            p_rg: p.p_rg(c.pa),
            length: m.length,
        };
        let mut demand = RingDemand::default();
        for c in &self.state.classes {
            for m in c.units.iter().flat_map(|u| &u.metamers) {
                demand.add(&sink(c, m));
            }
        }
        let shares = demand.shares(q_r, p.lambda_mix)?;
        if shares.degenerate_foliage {
            log::warn!("cycle {n}: no leaf area above any ring sink, pool partition used");
        }
        let mut total = 0.0;
        for c in &mut self.state.classes {
            let mult = c.multiplicity as f64;
            let p_rg = p.p_rg(c.pa);
            for m in c.units.iter_mut().flat_map(|u| u.metamers.iter_mut()) {
                let x = shares.increment(&RingSink {
                    multiplicity: mult,
                    leaves_above: m.leaves_above,
                    p_rg,
                    length: m.length,
                });
                m.ring_mass += x;
                total += mult * x;
            }
        }
        let trunk = &mut self.state.classes[0];
        for unit in &mut trunk.units {
            let d = mean_diameter(unit, p.wood_density)?;
            unit.diameter_history.push(d);
        }
        Ok((total, shares.effective_lambda, shares.degenerate_foliage))
    }

    fn refresh_leaves_above(&mut self, n: u32) {
        let inclusive = self.params.leaves_above_inclusive;
        let classes = &mut self.state.classes;
        let mut subtree = vec![0.0; classes.len()];
        for ci in (0..classes.len()).rev() {
            let mut acc = 0.0;
            for unit in classes[ci].units.iter_mut().rev() {
                let living = unit.birth_cycle == n;
                for m in unit.metamers.iter_mut().rev() {
                    let borne = m.borne.map_or(0.0, |b| subtree[b]);
                    let own = if living { m.leaf_area } else { 0.0 };
                    if inclusive {
                        acc += own + borne;
                        m.leaves_above = acc;
                    } else {
                        m.leaves_above = acc + borne;
                        acc += own + borne;
                    }
                }
            }
            subtree[ci] = acc;
        }
    }

    /// Snapshot of all outputs at the current cycle.
    pub fn output(&self) -> Result<SimulationOutput> {
        SimulationOutput::from_state(&self.state, self.params)
    }
}

fn zone_size(unit: &GrowthUnit, axillary_pa: u8) -> u64 {
    unit.layout
        .iter()
        .filter(|(k, _)| *k == axillary_pa)
        .map(|&(_, c)| u64::from(c))
        .sum()
}

fn build_unit(
    p: &GrowthParameters,
    pa: u8,
    n: u32,
    layout: Vec<(u8, u32)>,
    shoot_mass: f64,
    slw: f64,
) -> GrowthUnit {
    let count: u32 = layout.iter().map(|&(_, c)| c).sum();
    let per = if count > 0 {
        shoot_mass / f64::from(count)
    } else {
        0.0
    };
    let (internode, leaf) = split_metamer(per, p.internode_leaf_ratio(pa));
    let length = p.allometry(pa).length(internode);
    let metamers = layout
        .iter()
        .flat_map(|&(k, c)| std::iter::repeat_n(k, c as usize))
        .map(|k| Metamer {
            axillary_pa: k,
            internode_mass: internode,
            length,
            leaf_mass: leaf,
            leaf_area: leaf / slw,
            ring_mass: 0.0,
            borne: None,
            leaves_above: 0.0,
        })
        .collect();
    GrowthUnit {
        birth_cycle: n,
        layout,
        metamers,
        diameter_history: Vec::new(),
    }
}

fn mean_diameter(unit: &GrowthUnit, density: f64) -> Result<f64> {
    if unit.metamers.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for m in &unit.metamers {
        sum += m.diameter(density)?;
    }
    Ok(sum / unit.metamers.len() as f64)
}

/// Measured quantities of one trunk growth unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkUnitRecord {
    pub gu_index: u32,
    pub metamers: u32,
    pub internode_mass: f64,
    /// Internodes plus rings (g).
    pub wood_mass: f64,
    pub length: f64,
    /// Mean external diameter (cm).
    pub diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingRecord {
    pub gu_index: u32,
    pub tree_age: u32,
    pub diameter: f64,
}

/// Mean compartments of the trunk-borne branches of one PA on one trunk unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub gu_index: u32,
    pub pa: u8,
    pub count: u64,
    pub wood_mass: f64,
    /// Living leaves (g).
    pub leaf_mass: f64,
    /// Sum of main-axis internode lengths (cm).
    pub main_axis_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassTotals {
    pub seed: f64,
    pub produced: f64,
    pub wood: f64,
    pub leaves: f64,
    /// Shoot allocation of the last cycle, not yet expanded.
    pub pending: f64,
}

impl MassTotals {
    /// `(seed + produced) − (wood + leaves + pending)`, relative to the input.
    pub fn relative_imbalance(&self) -> f64 {
        let input = self.seed + self.produced;
        (input - self.wood - self.leaves - self.pending).abs() / input
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnitTopology {
    pub birth_cycle: u32,
    pub layout: Vec<(u8, u32)>,
    /// `(rank, class)` of every axis-bearing metamer.
    pub borne: Vec<(u32, ClassId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassTopology {
    pub id: ClassId,
    pub pa: u8,
    pub birth_cycle: u32,
    pub multiplicity: u64,
    pub units: Vec<UnitTopology>,
}

/// Structure of a factorized tree; equality means identical simulated
/// architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Topology {
    pub classes: Vec<ClassTopology>,
}

impl Topology {
    pub fn from_state(state: &TreeState) -> Self {
        let classes = state
            .classes
            .iter()
            .enumerate()
            .map(|(id, c)| ClassTopology {
                id,
                pa: c.pa,
                birth_cycle: c.birth_cycle,
                multiplicity: c.multiplicity,
                units: c
                    .units
                    .iter()
                    .map(|u| UnitTopology {
                        birth_cycle: u.birth_cycle,
                        layout: u.layout.clone(),
                        borne: u
                            .metamers
                            .iter()
                            .enumerate()
                            .filter_map(|(r, m)| m.borne.map(|b| (r as u32, b)))
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        Self { classes }
    }

    /// `(pa, birth_cycle, axes, metamers)` for every class, sorted.
    pub fn census(&self) -> Vec<(u8, u32, u64, u64)> {
        let mut out: Vec<_> = self
            .classes
            .iter()
            .map(|c| {
                let per: u64 = c
                    .units
                    .iter()
                    .flat_map(|u| &u.layout)
                    .map(|&(_, n)| u64::from(n))
                    .sum();
                (c.pa, c.birth_cycle, c.multiplicity, per * c.multiplicity)
            })
            .collect();
        out.sort();
        out
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutput {
    pub cycles: Vec<CycleRecord>,
    pub trunk: Vec<TrunkUnitRecord>,
    pub rings: Vec<RingRecord>,
    pub branches: Vec<BranchRecord>,
    pub totals: MassTotals,
    pub topology: Topology,
    pub decisions: Vec<Decision>,
}

impl SimulationOutput {
    pub fn from_state(state: &TreeState, p: &GrowthParameters) -> Result<Self> {
        let trunk_class = state.trunk();
        let mut trunk = Vec::with_capacity(trunk_class.units.len());
        let mut rings = Vec::new();
        for u in &trunk_class.units {
            trunk.push(TrunkUnitRecord {
                gu_index: u.birth_cycle,
                metamers: u.metamers.len() as u32,
                internode_mass: u.metamers.iter().map(|m| m.internode_mass).sum(),
                wood_mass: u.metamers.iter().map(Metamer::wood_mass).sum(),
                length: u.metamers.iter().map(|m| m.length).sum(),
                diameter: mean_diameter(u, p.wood_density)?,
            });
            for (i, &d) in u.diameter_history.iter().enumerate() {
                rings.push(RingRecord {
                    gu_index: u.birth_cycle,
                    tree_age: u.birth_cycle + i as u32,
                    diameter: d,
                });
            }
        }

        let sub = subtree_totals(state);
        let mut branches: Vec<BranchRecord> = Vec::new();
        for u in &trunk_class.units {
            for m in &u.metamers {
                let Some(b) = m.borne else { continue };
                let class = &state.classes[b];
                match branches
                    .iter_mut()
                    .find(|r| r.gu_index == u.birth_cycle && r.pa == class.pa)
                {
                    Some(r) => r.count += 1,
                    None => branches.push(BranchRecord {
                        gu_index: u.birth_cycle,
                        pa: class.pa,
                        count: 1,
                        wood_mass: sub.wood[b],
                        leaf_mass: sub.living_leaf_mass[b],
                        main_axis_length: class
                            .units
                            .iter()
                            .flat_map(|u| &u.metamers)
                            .map(|m| m.length)
                            .sum(),
                    }),
                }
            }
        }

        let produced = state.history.iter().map(|r| r.allocation.q).sum();
        let wood = state
            .classes
            .iter()
            .map(|c| {
                c.multiplicity as f64
                    * c.units
                        .iter()
                        .flat_map(|u| &u.metamers)
                        .map(Metamer::wood_mass)
                        .sum::<f64>()
            })
            .sum();
        let totals = MassTotals {
            seed: p.q0,
            produced,
            wood,
            leaves: state.leaves_produced,
            pending: state.history.last().map_or(0.0, |r| r.allocation.q_s),
        };
        Ok(Self {
            cycles: state.history.clone(),
            trunk,
            rings,
            branches,
            totals,
            topology: Topology::from_state(state),
            decisions: state.decisions.clone(),
        })
    }

    pub fn ratio_series(&self) -> Vec<f64> {
        self.cycles.iter().map(|c| c.allocation.ratio).collect()
    }
}

fn subtree_totals(state: &TreeState) -> SubtreeTotals {
    let n = state.cycle;
    let len = state.classes.len();
    let mut t = SubtreeTotals {
        wood: vec![0.0; len],
        living_leaf_mass: vec![0.0; len],
    };
    for ci in (0..len).rev() {
        let (mut wood, mut leaf) = (0.0, 0.0);
        for u in &state.classes[ci].units {
            for m in &u.metamers {
                wood += m.wood_mass();
                if u.birth_cycle == n {
                    leaf += m.leaf_mass;
                }
                if let Some(b) = m.borne {
                    wood += t.wood[b];
                    leaf += t.living_leaf_mass[b];
                }
            }
        }
        t.wood[ci] = wood;
        t.living_leaf_mass[ci] = leaf;
    }
    t
}

/// Runs one tree for `cycles` cycles.
pub fn simulate(
    params: &GrowthParameters,
    zones: &ZoneRuleSet,
    script: &[ScriptEntry],
    tree: usize,
    cycles: u32,
) -> Result<SimulationOutput> {
    let mut engine = Engine::new(params, zones, script, tree)?;
    engine.run(cycles)?;
    engine.output()
}

/// Runs with the organogenesis ratios of a previous run, so the topology
/// is that of the previous run while masses follow `params`.
pub fn simulate_frozen(
    params: &GrowthParameters,
    zones: &ZoneRuleSet,
    script: &[ScriptEntry],
    tree: usize,
    cycles: u32,
    ratios: &[f64],
) -> Result<SimulationOutput> {
    let mut engine = Engine::new(params, zones, script, tree)?.with_frozen_ratios(ratios);
    engine.run(cycles)?;
    engine.output()
}
