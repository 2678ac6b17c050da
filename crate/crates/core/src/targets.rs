//! Alignment of simulated outputs with measured targets, and synthetic
//! target generation.

use crate::engine::{simulate, SimulationOutput};
use crate::error::{ModelError, Result};
use crate::model::{
    BranchObservation, GrowthParameters, RingObservation, ScriptEntry, TargetDataset,
    TrunkObservation, ZoneRuleSet,
};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataClass {
    TrunkMass,
    TrunkDiameter,
    TrunkLength,
    Ring,
    BranchWood,
    BranchLeaf,
}

impl DataClass {
    pub const ALL: [DataClass; 6] = [
        DataClass::TrunkMass,
        DataClass::TrunkDiameter,
        DataClass::TrunkLength,
        DataClass::Ring,
        DataClass::BranchWood,
        DataClass::BranchLeaf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DataClass::TrunkMass => "trunk_mass",
            DataClass::TrunkDiameter => "trunk_diameter",
            DataClass::TrunkLength => "trunk_length",
            DataClass::Ring => "ring",
            DataClass::BranchWood => "branch_wood",
            DataClass::BranchLeaf => "branch_leaf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for DataClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where an observation sits in the simulated output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Locus {
    Trunk { gu: u32 },
    Ring { gu: u32, tree_age: u32 },
    Branch { gu: u32, pa: u8 },
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Locus::Trunk { gu } => write!(f, "trunk GU {gu}"),
            Locus::Ring { gu, tree_age } => write!(f, "ring GU {gu} at age {tree_age}"),
            Locus::Branch { gu, pa } => write!(f, "branch GU {gu} PA{pa}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observation {
    pub class: DataClass,
    pub locus: Locus,
    pub value: f64,
}

/// Flattens a dataset into observations. Branch rows sharing a growth unit
/// and a PA are averaged into one entry.
pub fn observations(d: &TargetDataset) -> Vec<Observation> {
    let mut out = Vec::new();
    for t in &d.trunk_profile {
        let locus = Locus::Trunk { gu: t.gu_index };
        for (class, value) in [
            (DataClass::TrunkMass, t.mass),
            (DataClass::TrunkDiameter, t.diameter),
            (DataClass::TrunkLength, t.length),
        ] {
            out.push(Observation {
                class,
                locus,
                value,
            });
        }
    }
    for r in &d.ring_matrix {
        out.push(Observation {
            class: DataClass::Ring,
            locus: Locus::Ring {
                gu: r.gu_index,
                tree_age: r.tree_age,
            },
            value: r.diameter,
        });
    }
    let mut groups: Vec<((u32, u8), f64, f64, u32)> = Vec::new();
    for b in &d.branch_compartments {
        let key = (b.gu_index, b.pa);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                g.1 += b.wood_mass;
                g.2 += b.leaf_mass;
                g.3 += 1;
            }
            None => groups.push((key, b.wood_mass, b.leaf_mass, 1)),
        }
    }
    for ((gu, pa), wood, leaf, n) in groups {
        let locus = Locus::Branch { gu, pa };
        let n = f64::from(n);
        out.push(Observation {
            class: DataClass::BranchWood,
            locus,
            value: wood / n,
        });
        out.push(Observation {
            class: DataClass::BranchLeaf,
            locus,
            value: leaf / n,
        });
    }
    out
}

/// Simulated value for every observation, in the same order.
pub fn extract_targets(out: &SimulationOutput, obs: &[Observation]) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(obs.len());
    let mut missing = Vec::new();
    for o in obs {
        let v = match o.locus {
            Locus::Trunk { gu } => out
                .trunk
                .iter()
                .find(|t| t.gu_index == gu)
                .map(|t| match o.class {
                    DataClass::TrunkMass => t.wood_mass,
                    DataClass::TrunkDiameter => t.diameter,
                    _ => t.length,
                }),
            Locus::Ring { gu, tree_age } => out
                .rings
                .iter()
                .find(|r| r.gu_index == gu && r.tree_age == tree_age)
                .map(|r| r.diameter),
            Locus::Branch { gu, pa } => out
                .branches
                .iter()
                .find(|b| b.gu_index == gu && b.pa == pa)
                .map(|b| match o.class {
                    DataClass::BranchWood => b.wood_mass,
                    _ => b.leaf_mass,
                }),
        };
        match v {
            Some(v) => values.push(v),
            None => {
                let label = format!("{} ({})", o.locus, o.class);
                if !missing.contains(&label) {
                    missing.push(label);
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(values)
    } else {
        Err(ModelError::Alignment(missing))
    }
}

/// Shape of a generated trunk script.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptProfile {
    /// Metamers of the first trunk unit.
    pub base_metamers: f64,
    /// Metamers added at full vigour.
    pub extra_metamers: f64,
    /// Cycles for the metamer count to rise by 63 %.
    pub rise: f64,
    /// Branch counts per unit at full vigour, for PA 2, 3 and 4.
    pub branches: [f64; 3],
    /// First cycle bearing branches of PA 2, 3 and 4.
    pub onset: [u32; 3],
}

impl ScriptProfile {
    /// Slow, suppressed tree.
    pub fn tree1_like() -> Self {
        Self {
            base_metamers: 3.0,
            extra_metamers: 4.0,
            rise: 4.0,
            branches: [1.0, 1.0, 2.5],
            onset: [6, 4, 2],
        }
    }

    /// Older, more vigorous tree.
    pub fn tree2_like() -> Self {
        Self {
            base_metamers: 3.0,
            extra_metamers: 7.0,
            rise: 6.0,
            branches: [1.0, 1.5, 2.5],
            onset: [6, 4, 2],
        }
    }
}

/// Deterministic trunk script: metamer counts rise smoothly toward a
/// plateau and branch counts follow the same curve. The last unit bears no
/// branches.
pub fn synthetic_script(cycles: u32, profile: &ScriptProfile) -> Vec<ScriptEntry> {
    (1..=cycles)
        .map(|n| {
            let vigour = 1.0 - (-(f64::from(n) - 1.0) / profile.rise).exp();
            let metamers =
                (profile.base_metamers + profile.extra_metamers * vigour).round() as u32;
            let mut branches = Vec::new();
            if n < cycles {
                for (i, pa) in (2u8..=4).enumerate() {
                    if n >= profile.onset[i] {
                        let count = (profile.branches[i] * vigour).round() as u32;
                        if count > 0 {
                            branches.push((pa, count));
                        }
                    }
                }
            }
            let total: u32 = branches.iter().map(|&(_, c)| c).sum();
            debug_assert!(total <= metamers);
            ScriptEntry {
                gu_index: n,
                metamer_count: metamers.max(total),
                branches,
            }
        })
        .collect()
}

/// Builds a target dataset from a simulation: every trunk unit, ring
/// histories of `ring_gus`, and every trunk-borne branch group.
pub fn synthetic_target(
    params: &GrowthParameters,
    zones: &ZoneRuleSet,
    script: &[ScriptEntry],
    tree: usize,
    ring_gus: &[u32],
) -> Result<TargetDataset> {
    let cycles = script.len() as u32;
    let out = simulate(params, zones, script, tree, cycles)?;
    Ok(TargetDataset {
        tree_age: cycles,
        trunk_script: script.to_vec(),
        trunk_profile: out
            .trunk
            .iter()
            .map(|t| TrunkObservation {
                gu_index: t.gu_index,
                mass: t.wood_mass,
                diameter: t.diameter,
                length: t.length,
            })
            .collect(),
        ring_matrix: out
            .rings
            .iter()
            .filter(|r| ring_gus.contains(&r.gu_index))
            .map(|r| RingObservation {
                gu_index: r.gu_index,
                tree_age: r.tree_age,
                diameter: r.diameter,
            })
            .collect(),
        branch_compartments: out
            .branches
            .iter()
            .map(|b| BranchObservation {
                gu_index: b.gu_index,
                pa: b.pa,
                wood_mass: b.wood_mass,
                leaf_mass: b.leaf_mass,
            })
            .collect(),
    })
}

/// `count` growth units spread evenly over `1..=cycles`, base first.
pub fn spread_ring_gus(cycles: u32, count: u32) -> Vec<u32> {
    if count == 0 || cycles == 0 {
        return Vec::new();
    }
    let count = count.min(cycles);
    let mut out: Vec<u32> = (0..count)
        .map(|i| 1 + (f64::from(i) * f64::from(cycles - 1) / f64::from(count.max(2) - 1)).round() as u32)
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_rows_are_averaged() {
        let d = TargetDataset {
            tree_age: 3,
            branch_compartments: vec![
                BranchObservation {
                    gu_index: 2,
                    pa: 4,
                    wood_mass: 1.0,
                    leaf_mass: 2.0,
                },
                BranchObservation {
                    gu_index: 2,
                    pa: 4,
                    wood_mass: 3.0,
                    leaf_mass: 4.0,
                },
                BranchObservation {
                    gu_index: 2,
                    pa: 4,
                    wood_mass: 5.0,
                    leaf_mass: 0.0,
                },
            ],
            ..Default::default()
        };
        let obs = observations(&d);
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].value, 3.0);
        assert_eq!(obs[1].value, 2.0);
    }

    #[test]
    fn synthetic_target_aligns_with_its_own_simulation() {
        let p = GrowthParameters::reference();
        let z = ZoneRuleSet::reference();
        let script = synthetic_script(8, &ScriptProfile::tree1_like());
        let d = synthetic_target(&p, &z, &script, 0, &[1, 4]).unwrap();
        assert_eq!(d.ring_gus(), vec![1, 4]);
        let out = simulate(&p, &z, &script, 0, 8).unwrap();
        let obs = observations(&d);
        let sim = extract_targets(&out, &obs).unwrap();
        for (o, s) in obs.iter().zip(&sim) {
            assert_eq!(o.value, *s);
        }
    }

    #[test]
    fn unknown_rows_fail_alignment() {
        let p = GrowthParameters::reference();
        let z = ZoneRuleSet::reference();
        let script = synthetic_script(4, &ScriptProfile::tree1_like());
        let out = simulate(&p, &z, &script, 0, 4).unwrap();
        let obs = [Observation {
            class: DataClass::Ring,
            locus: Locus::Ring { gu: 9, tree_age: 4 },
            value: 1.0,
        }];
        match extract_targets(&out, &obs) {
            Err(ModelError::Alignment(m)) => assert_eq!(m.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scripts_are_well_formed() {
        for profile in [ScriptProfile::tree1_like(), ScriptProfile::tree2_like()] {
            let s = synthetic_script(46, &profile);
            assert_eq!(s.len(), 46);
            assert!(s.last().unwrap().branches.is_empty());
            for e in &s {
                assert!(e.branch_count() <= e.metamer_count);
            }
        }
        assert_eq!(spread_ring_gus(46, 12).len(), 12);
        assert_eq!(spread_ring_gus(46, 12)[0], 1);
        assert_eq!(*spread_ring_gus(46, 12).last().unwrap(), 46);
    }
}
