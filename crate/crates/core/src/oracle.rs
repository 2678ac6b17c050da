//! Reference engine that stores every metamer of the tree individually.
//!
//! It shares the scalar kernels with the factorized engine but none of the
//! structural bookkeeping: positions are grouped by explicit rank along their
//! mother axis, and leaf areas above a metamer are accumulated over an
//! explicit successor/lateral tree. Only practical for a handful of cycles.

use crate::engine::{cylinder_diameter, BranchRecord, MassTotals, RingRecord, TrunkUnitRecord};
use crate::error::{ModelError, Result};
use crate::model::{GrowthParameters, ScriptEntry, ZoneRuleSet, CM2_PER_M2, TRUNK_PA};
use crate::source_sink::{
    allocate_shoots, partition_rings, production_beer, shoot_demand, split_metamer,
    CycleAllocation, RingSink,
};
use crate::topology::{axis_total, distribute_axes, metamer_count, trunk_layout, PositionGroup};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
struct Node {
    axis: usize,
    gu_birth: u32,
    axillary_pa: u8,
    internode_mass: f64,
    length: f64,
    leaf_mass: f64,
    leaf_area: f64,
    ring_mass: f64,
    next: Option<usize>,
    lateral: Option<usize>,
}

#[derive(Debug, Clone)]
struct Axis {
    pa: u8,
    birth: u32,
    /// Node ids of every growth unit.
    units: Vec<Vec<usize>>,
    /// Axil in which the axis is borne, if any.
    bearer: Option<usize>,
    diameter_history: Vec<Vec<f64>>,
}

/// Cycle series comparable with the factorized engine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCycle {
    pub cycle: u32,
    pub s_blade: f64,
    pub allocation: CycleAllocation,
    pub bud_counts: Vec<u64>,
    pub ring_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleOutput {
    pub cycles: Vec<OracleCycle>,
    pub trunk: Vec<TrunkUnitRecord>,
    pub rings: Vec<RingRecord>,
    pub branches: Vec<BranchRecord>,
    pub totals: MassTotals,
    /// `(pa, birth_cycle, axes, metamers)`, sorted.
    pub census: Vec<(u8, u32, u64, u64)>,
    pub metamer_count: usize,
}

struct Oracle<'a> {
    p: &'a GrowthParameters,
    zones: &'a ZoneRuleSet,
    script: &'a [ScriptEntry],
    v: f64,
    nodes: Vec<Node>,
    axes: Vec<Axis>,
    shoot_mass: Vec<f64>,
    layout_ratio: f64,
    cycles: Vec<OracleCycle>,
    leaves_produced: f64,
}

/// Simulates `cycles` cycles metamer by metamer.
pub fn simulate_naive(
    params: &GrowthParameters,
    zones: &ZoneRuleSet,
    script: &[ScriptEntry],
    tree: usize,
    cycles: u32,
) -> Result<OracleOutput> {
    let v = *params
        .v_env
        .get(tree)
        .ok_or(ModelError::MissingEnvironment(tree))?;
    let mut shoot_mass = vec![0.0; usize::from(params.pa_max)];
    shoot_mass[0] = params.q0;
    let mut o = Oracle {
        p: params,
        zones,
        script,
        v,
        nodes: Vec::new(),
        axes: vec![Axis {
            pa: TRUNK_PA,
            birth: 1,
            units: Vec::new(),
            bearer: None,
            diameter_history: Vec::new(),
        }],
        shoot_mass,
        layout_ratio: 0.0,
        cycles: Vec::new(),
        leaves_produced: 0.0,
    };
    for n in 1..=cycles {
        o.step(n).map_err(|e| e.at_cycle(n))?;
    }
    o.finish(cycles)
}

impl Oracle<'_> {
    fn step(&mut self, n: u32) -> Result<()> {
        let p = self.p;
        for a in 0..self.axes.len() {
            self.grow_unit(a, n)?;
        }
        let s_blade = self
            .nodes
            .iter()
            .filter(|m| m.gu_birth == n)
            .map(|m| m.leaf_area)
            .sum::<f64>()
            / CM2_PER_M2;
        let q = production_beer(s_blade, self.v, p.sp0, p.alpha, p.k_beer)?
            * p.production_scale
            * (1.0 - p.root_fraction);
        let ratio = self
            .cycles
            .last()
            .map_or(p.q0 / p.p_s(TRUNK_PA), |c| c.allocation.ratio);
        self.new_axes(n, ratio)?;
        self.layout_ratio = ratio;

        let mut bud_counts = vec![0u64; usize::from(p.pa_max)];
        for a in &self.axes {
            bud_counts[usize::from(a.pa) - 1] += 1;
        }
        let d_s = shoot_demand(&bud_counts, &p.p_s);
        let allocation = CycleAllocation::compute(q, d_s, p.p_r, p.gamma)?;
        self.shoot_mass = allocate_shoots(allocation.q_s, d_s, &bud_counts, &p.p_s)?;

        let ring_total = self.rings(n, allocation.q_r)?;
        self.cycles.push(OracleCycle {
            cycle: n,
            s_blade,
            allocation,
            bud_counts,
            ring_total,
        });
        Ok(())
    }

    fn grow_unit(&mut self, a: usize, n: u32) -> Result<()> {
        let p = self.p;
        let pa = self.axes[a].pa;
        let layout: Vec<(u8, u32)> = if pa == TRUNK_PA {
            let entry = self
                .script
                .iter()
                .find(|e| e.gu_index == n)
                .ok_or(ModelError::MissingScript(n))?;
            trunk_layout(entry)?
        } else if pa == p.pa_max {
            vec![(0, p.short_shoot_metamers)]
        } else {
            self.zones
                .zones_of(pa)
                .map(|z| (z.axillary_pa, metamer_count(z, self.layout_ratio)))
                .collect()
        };
        let count: u32 = layout.iter().map(|&(_, c)| c).sum();
        let mass = self.shoot_mass[usize::from(pa) - 1];
        let per = if count > 0 { mass / f64::from(count) } else { 0.0 };
        let (internode, leaf) = split_metamer(per, p.internode_leaf_ratio(pa));
        let length = p.allometry(pa).length(internode);
        let slw = p.slw(f64::from(n));

        let mut prev = self.axes[a].units.last().and_then(|u| u.last().copied());
        let mut ids = Vec::new();
        for &(k, c) in &layout {
            for _ in 0..c {
                let id = self.nodes.len();
                self.nodes.push(Node {
                    axis: a,
                    gu_birth: n,
                    axillary_pa: k,
                    internode_mass: internode,
                    length,
                    leaf_mass: leaf,
                    leaf_area: leaf / slw,
                    ring_mass: 0.0,
                    next: None,
                    lateral: None,
                });
                self.leaves_produced += leaf;
                match prev {
                    Some(pr) => self.nodes[pr].next = Some(id),
                    None => {
                        if let Some(b) = self.axes[a].bearer {
                            self.nodes[b].lateral = Some(id);
                        }
                    }
                }
                prev = Some(id);
                ids.push(id);
            }
        }
        self.axes[a].units.push(ids);
        self.axes[a].diameter_history.push(Vec::new());
        Ok(())
    }

    fn new_axes(&mut self, n: u32, ratio: f64) -> Result<()> {
        let mut axils: Vec<(usize, u8)> = Vec::new();
        for rule in self.zones.rules().iter().filter(|r| r.axillary_pa != 0) {
            // Positions of this zone on units born now, grouped by rank.
            let mut by_rank: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for a in self.axes.iter().filter(|a| a.pa == rule.bearer_pa) {
                let Some(unit) = a.units.last() else { continue };
                if unit.is_empty() || self.nodes[unit[0]].gu_birth != n {
                    continue;
                }
                let rank = n - a.birth + 1;
                by_rank.entry(rank).or_default().extend(
                    unit.iter()
                        .copied()
                        .filter(|&m| self.nodes[m].axillary_pa == rule.axillary_pa),
                );
            }
            let groups: Vec<PositionGroup> = by_rank
                .iter()
                .map(|(&rank, ids)| PositionGroup {
                    birth_cycle: n,
                    rank,
                    size: ids.len() as u64,
                })
                .collect();
            let positions = groups.iter().map(|g| g.size).sum();
            let total = axis_total(positions, rule, ratio);
            let assignment = distribute_axes(total, &groups)?;
            for ((_, ids), &per) in by_rank.iter().zip(&assignment.per_position) {
                if per > 0 {
                    axils.extend(ids.iter().map(|&m| (m, rule.axillary_pa)));
                }
            }
        }
        let trunk_unit = self.axes[0].units.last().expect("trunk grows every cycle");
        for &m in trunk_unit {
            let k = self.nodes[m].axillary_pa;
            if k != 0 {
                axils.push((m, k));
            }
        }
        for (m, k) in axils {
            self.axes.push(Axis {
                pa: k,
                birth: n + 1,
                units: Vec::new(),
                bearer: Some(m),
                diameter_history: Vec::new(),
            });
        }
        Ok(())
    }

    fn rings(&mut self, n: u32, q_r: f64) -> Result<f64> {
        let p = self.p;
        let above = self.leaves_above(n);
        let sinks: Vec<RingSink> = self
            .nodes
            .iter()
            .zip(&above)
            .map(|(m, &sa)| RingSink {
                multiplicity: 1.0,
                leaves_above: sa,
                p_rg: p.p_rg(self.axes[m.axis].pa),
                length: m.length,
            })
            .collect();
        let part = partition_rings(q_r, &sinks, p.lambda_mix)?;
        let mut total = 0.0;
        for (m, x) in self.nodes.iter_mut().zip(&part.increments) {
            m.ring_mass += x;
            total += x;
        }
        for a in &mut self.axes {
            for (u, ids) in a.units.iter().enumerate() {
                let mut sum = 0.0;
                for &m in ids {
                    let node = &self.nodes[m];
                    sum += cylinder_diameter(
                        node.internode_mass + node.ring_mass,
                        node.length,
                        p.wood_density,
                    )?;
                }
                let d = if ids.is_empty() { 0.0 } else { sum / ids.len() as f64 };
                a.diameter_history[u].push(d);
            }
        }
        Ok(total)
    }

    /// Living leaf area distal to every node, own leaf per the inclusivity
    /// setting.
    fn leaves_above(&self, n: u32) -> Vec<f64> {
        let mut sub = vec![0.0; self.nodes.len()];
        for i in (0..self.nodes.len()).rev() {
            let m = &self.nodes[i];
            let own = if m.gu_birth == n { m.leaf_area } else { 0.0 };
            sub[i] = own
                + m.next.map_or(0.0, |j| sub[j])
                + m.lateral.map_or(0.0, |j| sub[j]);
        }
        if self.p.leaves_above_inclusive {
            return sub;
        }
        self.nodes
            .iter()
            .zip(&sub)
            .map(|(m, &s)| if m.gu_birth == n { s - m.leaf_area } else { s })
            .collect()
    }

    fn finish(self, n: u32) -> Result<OracleOutput> {
        let p = self.p;
        let nodes = &self.nodes;
        let mut wood_sub = vec![0.0; nodes.len()];
        let mut leaf_sub = vec![0.0; nodes.len()];
        for i in (0..nodes.len()).rev() {
            let m = &nodes[i];
            let own_leaf = if m.gu_birth == n { m.leaf_mass } else { 0.0 };
            wood_sub[i] = m.internode_mass
                + m.ring_mass
                + m.next.map_or(0.0, |j| wood_sub[j])
                + m.lateral.map_or(0.0, |j| wood_sub[j]);
            leaf_sub[i] = own_leaf
                + m.next.map_or(0.0, |j| leaf_sub[j])
                + m.lateral.map_or(0.0, |j| leaf_sub[j]);
        }

        let trunk = &self.axes[0];
        let mut trunk_rows = Vec::new();
        let mut rings = Vec::new();
        for (u, ids) in trunk.units.iter().enumerate() {
            let gu = u as u32 + 1;
            let hist = &trunk.diameter_history[u];
            trunk_rows.push(TrunkUnitRecord {
                gu_index: gu,
                metamers: ids.len() as u32,
                internode_mass: ids.iter().map(|&m| nodes[m].internode_mass).sum(),
                wood_mass: ids
                    .iter()
                    .map(|&m| nodes[m].internode_mass + nodes[m].ring_mass)
                    .sum(),
                length: ids.iter().map(|&m| nodes[m].length).sum(),
                diameter: *hist.last().unwrap_or(&0.0),
            });
            for (i, &d) in hist.iter().enumerate() {
                rings.push(RingRecord {
                    gu_index: gu,
                    tree_age: gu + i as u32,
                    diameter: d,
                });
            }
        }

        // Individual trunk-borne branches, averaged per (unit, PA).
        let mut branches: Vec<BranchRecord> = Vec::new();
        for (u, ids) in trunk.units.iter().enumerate() {
            let gu = u as u32 + 1;
            for &m in ids {
                let Some(first) = nodes[m].lateral else {
                    continue;
                };
                let axis = &self.axes[nodes[first].axis];
                let main_length: f64 = axis.units.iter().flatten().map(|&x| nodes[x].length).sum();
                match branches.iter_mut().find(|b| b.gu_index == gu && b.pa == axis.pa) {
                    Some(b) => {
                        b.count += 1;
                        b.wood_mass += wood_sub[first];
                        b.leaf_mass += leaf_sub[first];
                        b.main_axis_length += main_length;
                    }
                    None => branches.push(BranchRecord {
                        gu_index: gu,
                        pa: axis.pa,
                        count: 1,
                        wood_mass: wood_sub[first],
                        leaf_mass: leaf_sub[first],
                        main_axis_length: main_length,
                    }),
                }
            }
        }
        for b in &mut branches {
            let c = b.count as f64;
            b.wood_mass /= c;
            b.leaf_mass /= c;
            b.main_axis_length /= c;
        }

        let mut census: BTreeMap<(u8, u32), (u64, u64)> = BTreeMap::new();
        for a in &self.axes {
            let e = census.entry((a.pa, a.birth)).or_default();
            e.0 += 1;
            e.1 += a.units.iter().map(|u| u.len() as u64).sum::<u64>();
        }
        let totals = MassTotals {
            seed: p.q0,
            produced: self.cycles.iter().map(|c| c.allocation.q).sum(),
            wood: nodes.iter().map(|m| m.internode_mass + m.ring_mass).sum(),
            leaves: self.leaves_produced,
            pending: self.cycles.last().map_or(0.0, |c| c.allocation.q_s),
        };
        Ok(OracleOutput {
            cycles: self.cycles,
            trunk: trunk_rows,
            rings,
            branches,
            totals,
            census: census
                .into_iter()
                .map(|((pa, b), (axes, mets))| (pa, b, axes, mets))
                .collect(),
            metamer_count: nodes.len(),
        })
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Lists every field where the factorized output departs from the oracle by
/// more than `tol` (relative).
pub fn compare_outputs(
    fact: &crate::engine::SimulationOutput,
    naive: &OracleOutput,
    tol: f64,
) -> Vec<String> {
    let mut diffs = Vec::new();
    let mut check = |label: String, a: f64, b: f64| {
        if !rel_close(a, b, tol) {
            diffs.push(format!("{label}: {a} vs {b}"));
        }
    };
    if fact.cycles.len() != naive.cycles.len() {
        return vec!["cycle count".into()];
    }
    for (f, o) in fact.cycles.iter().zip(&naive.cycles) {
        let n = f.cycle;
        check(format!("S({n})"), f.s_blade, o.s_blade);
        let (a, b) = (&f.allocation, &o.allocation);
        for (name, x, y) in [
            ("Q", a.q, b.q),
            ("D", a.d, b.d),
            ("Ds", a.d_s, b.d_s),
            ("Dr", a.d_r, b.d_r),
            ("Qs", a.q_s, b.q_s),
            ("Qr", a.q_r, b.q_r),
            ("ratio", a.ratio, b.ratio),
            ("ring total", f.ring_total, o.ring_total),
        ] {
            check(format!("{name}({n})"), x, y);
        }
        if f.bud_counts != o.bud_counts {
            check(format!("buds({n})"), 0.0, 1.0);
        }
    }
    if fact.trunk.len() != naive.trunk.len() || fact.rings.len() != naive.rings.len() {
        check("trunk shape".into(), 0.0, 1.0);
    } else {
        for (f, o) in fact.trunk.iter().zip(&naive.trunk) {
            let g = f.gu_index;
            check(format!("metamers GU {g}"), f64::from(f.metamers), f64::from(o.metamers));
            check(format!("wood GU {g}"), f.wood_mass, o.wood_mass);
            check(format!("internode GU {g}"), f.internode_mass, o.internode_mass);
            check(format!("length GU {g}"), f.length, o.length);
            check(format!("diameter GU {g}"), f.diameter, o.diameter);
        }
        for (f, o) in fact.rings.iter().zip(&naive.rings) {
            check(
                format!("ring GU {} age {}", f.gu_index, f.tree_age),
                f.diameter,
                o.diameter,
            );
        }
    }
    if fact.branches.len() != naive.branches.len() {
        check("branch rows".into(), 0.0, 1.0);
    } else {
        for (f, o) in fact.branches.iter().zip(&naive.branches) {
            let key = format!("branch GU {} PA{}", f.gu_index, f.pa);
            if (f.gu_index, f.pa, f.count) != (o.gu_index, o.pa, o.count) {
                check(format!("{key} identity"), 0.0, 1.0);
            }
            check(format!("{key} wood"), f.wood_mass, o.wood_mass);
            check(format!("{key} leaf"), f.leaf_mass, o.leaf_mass);
            check(format!("{key} length"), f.main_axis_length, o.main_axis_length);
        }
    }
    let (a, b) = (&fact.totals, &naive.totals);
    check("total produced".into(), a.produced, b.produced);
    check("total wood".into(), a.wood, b.wood);
    check("total leaves".into(), a.leaves, b.leaves);
    check("pending".into(), a.pending, b.pending);
    if fact.topology.census() != naive.census {
        check("census".into(), 0.0, 1.0);
    }
    diffs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::simulate;

    fn script(entries: &[(u32, &[(u8, u32)])]) -> Vec<ScriptEntry> {
        entries
            .iter()
            .enumerate()
            .map(|(i, &(m, b))| ScriptEntry {
                gu_index: i as u32 + 1,
                metamer_count: m,
                branches: b.to_vec(),
            })
            .collect()
    }

    #[test]
    fn oracle_matches_factorized_engine() {
        let p = GrowthParameters::reference();
        let z = ZoneRuleSet::reference();
        let s = script(&[
            (3, &[]),
            (4, &[(4, 1)]),
            (5, &[(2, 1), (4, 2)]),
            (6, &[(2, 1), (3, 1), (4, 1)]),
            (6, &[(3, 2)]),
            (6, &[]),
        ]);
        let fact = simulate(&p, &z, &s, 1, 6).unwrap();
        let naive = simulate_naive(&p, &z, &s, 1, 6).unwrap();
        let diffs = compare_outputs(&fact, &naive, 1e-9);
        assert!(diffs.is_empty(), "{diffs:#?}");
        assert!(naive.metamer_count > 50);
    }

    #[test]
    fn exclusive_leaf_area_also_matches() {
        let mut p = GrowthParameters::reference();
        p.leaves_above_inclusive = false;
        p.lambda_mix = 0.8;
        let z = ZoneRuleSet::reference();
        let s = script(&[(4, &[(3, 1)]), (5, &[(2, 2)]), (5, &[(4, 3)]), (5, &[])]);
        let fact = simulate(&p, &z, &s, 0, 4).unwrap();
        let naive = simulate_naive(&p, &z, &s, 0, 4).unwrap();
        let diffs = compare_outputs(&fact, &naive, 1e-9);
        assert!(diffs.is_empty(), "{diffs:#?}");
    }
}
