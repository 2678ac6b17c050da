//! Shared domain types: species parameters, zone rules, target datasets.
//!
//! Unit conventions used everywhere in the crate:
//!
//! * masses are fresh-matter grams;
//! * leaf and ring-sink areas are cm², while the crown quantities `S(n)` and
//!   `Sp0` are m² (the conversion happens once, in the engine, when the blade
//!   area is summed);
//! * lengths and diameters are cm;
//! * physiological ages (PA) are 1-based, PA 1 being the trunk.

use serde::{Deserialize, Serialize};
use std::fmt;

pub const TRUNK_PA: u8 = 1;

/// cm² per m².
pub const CM2_PER_M2: f64 = 1.0e4;

/// One knot of the specific-leaf-weight schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlwKnot {
    /// Tree chronological age (cycles).
    pub age: f64,
    /// Specific leaf weight (g·cm⁻²).
    pub slw: f64,
}

/// Internode length allometry `l = a_len · q^b_len` (cm from g).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allometry {
    pub a_len: f64,
    pub b_len: f64,
}

impl Allometry {
    pub fn length(&self, internode_mass: f64) -> f64 {
        if internode_mass <= 0.0 {
            0.0
        } else {
            self.a_len * internode_mass.powf(self.b_len)
        }
    }
}

/// Species-level constants of the source-sink model plus per-tree
/// environment factors.
///
/// Per-PA vectors are indexed by `pa - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthParameters {
    /// Environment factor `V_t`, one entry per tree.
    pub v_env: Vec<f64>,
    /// Characteristic surface `Sp0` (m²).
    pub sp0: f64,
    /// Crown-surface allometry exponent.
    pub alpha: f64,
    /// Extinction coefficient of the light-interception law.
    pub k_beer: f64,
    /// Seed biomass funding the first trunk growth unit (g).
    pub q0: f64,
    /// Number of physiological ages; the highest one is the short shoot.
    pub pa_max: u8,
    /// Shoot sink per PA.
    pub p_s: Vec<f64>,
    /// Sink of the ring compartment.
    pub p_r: f64,
    /// Ring-demand exponent.
    pub gamma: f64,
    /// Mixing coefficient between pool (0) and Pressler (1) ring partitioning.
    pub lambda_mix: f64,
    /// Linear secondary sink per PA; PA 1 is the reference and must be 1.
    pub p_rg: Vec<f64>,
    /// Fraction of gross production diverted underground.
    pub root_fraction: f64,
    /// Internode/leaf mass ratio of a new shoot, per PA.
    pub internode_leaf_ratio: Vec<f64>,
    /// Mass ratio of a new long shoot over a new short shoot.
    pub long_short_shoot_ratio: f64,
    /// Specific leaf weight as a piecewise-linear function of tree age.
    pub slw_schedule: Vec<SlwKnot>,
    /// Internode length allometry per PA.
    pub allometry: Vec<Allometry>,
    /// Fresh wood density (g·cm⁻³).
    pub wood_density: f64,
    /// Metamer count of every short-shoot growth unit.
    pub short_shoot_metamers: u32,
    /// Grams per unit returned by the production equation.
    pub production_scale: f64,
    /// Whether a metamer counts its own leaf in the leaf area above it.
    pub leaves_above_inclusive: bool,
}

impl GrowthParameters {
    /// Reference beech configuration (two trees).
    pub fn reference() -> Self {
        Self {
            v_env: vec![0.056, 0.1],
            sp0: 0.015,
            alpha: 0.73,
            k_beer: 1.0,
            q0: 1.0,
            pa_max: 4,
            p_s: vec![5.25, 5.25, 5.25, 1.0],
            p_r: 2.3,
            gamma: 2.95,
            lambda_mix: 0.13,
            p_rg: vec![1.0, 0.1, 0.05, 0.01],
            root_fraction: 0.0,
            internode_leaf_ratio: vec![0.7, 0.7, 0.7, 0.065],
            long_short_shoot_ratio: 5.25,
            slw_schedule: vec![
                SlwKnot {
                    age: 21.0,
                    slw: 0.0072,
                },
                SlwKnot {
                    age: 46.0,
                    slw: 0.0093,
                },
            ],
            allometry: vec![
                Allometry {
                    a_len: 6.0,
                    b_len: 0.5,
                },
                Allometry {
                    a_len: 5.0,
                    b_len: 0.5,
                },
                Allometry {
                    a_len: 5.0,
                    b_len: 0.5,
                },
                Allometry {
                    a_len: 1.0,
                    b_len: 0.5,
                },
            ],
            wood_density: 0.9,
            short_shoot_metamers: 3,
            production_scale: 1.0e4,
            leaves_above_inclusive: true,
        }
    }

    fn pa_index(pa: u8) -> usize {
        debug_assert!(pa >= 1);
        usize::from(pa) - 1
    }

    pub fn p_s(&self, pa: u8) -> f64 {
        self.p_s[Self::pa_index(pa)]
    }

    pub fn p_rg(&self, pa: u8) -> f64 {
        self.p_rg[Self::pa_index(pa)]
    }

    pub fn internode_leaf_ratio(&self, pa: u8) -> f64 {
        self.internode_leaf_ratio[Self::pa_index(pa)]
    }

    pub fn allometry(&self, pa: u8) -> Allometry {
        self.allometry[Self::pa_index(pa)]
    }

    /// Specific leaf weight at a given tree age, clamped outside the knots.
    pub fn slw(&self, age: f64) -> f64 {
        let knots = &self.slw_schedule;
        let first = knots[0];
        if age <= first.age {
            return first.slw;
        }
        for pair in knots.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if age <= b.age {
                let t = (age - a.age) / (b.age - a.age);
                return a.slw + t * (b.slw - a.slw);
            }
        }
        knots[knots.len() - 1].slw
    }

    pub fn short_shoot_pa(&self) -> u8 {
        self.pa_max
    }
}

impl Default for GrowthParameters {
    fn default() -> Self {
        Self::reference()
    }
}

/// Zone `Z^{ik}` of a growth unit: metamers of PA `i` bearing buds of PA `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneRule {
    pub bearer_pa: u8,
    /// 0 marks the unbranched zone.
    pub axillary_pa: u8,
    pub m1: f64,
    pub m2: f64,
    pub m_max: u32,
    pub a1: f64,
    pub a2: f64,
}

impl ZoneRule {
    pub fn unbranched(bearer_pa: u8, m1: f64, m2: f64, m_max: u32) -> Self {
        Self {
            bearer_pa,
            axillary_pa: 0,
            m1,
            m2,
            m_max,
            a1: 0.0,
            a2: 0.0,
        }
    }

    pub fn branched(bearer_pa: u8, axillary_pa: u8, m1: f64, m2: f64, m_max: u32, a2: f64) -> Self {
        Self {
            bearer_pa,
            axillary_pa,
            m1,
            m2,
            m_max,
            a1: 0.0,
            a2,
        }
    }
}

/// Basal-to-apical position of a zone inside its growth unit: the unbranched
/// zone first, then axillary PAs from the weakest (highest PA) to the most
/// vigorous.
pub fn acrotonic_rank(axillary_pa: u8) -> i32 {
    if axillary_pa == 0 {
        i32::MIN
    } else {
        -i32::from(axillary_pa)
    }
}

/// Default growth-unit topology with the plasticity coefficients of every zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRuleSet {
    rules: Vec<ZoneRule>,
    /// Enforce the pinned `M1`/`A1` values during validation.
    pub pinned_intercepts: bool,
}

impl ZoneRuleSet {
    pub fn new(mut rules: Vec<ZoneRule>, pinned_intercepts: bool) -> Self {
        rules.sort_by_key(|r| (r.bearer_pa, acrotonic_rank(r.axillary_pa)));
        Self { rules, pinned_intercepts }
    }

    /// Beech topology: PA-2 units carry Z20, Z24, Z23, Z22; PA-3 units carry
    /// Z30 and Z34. Coefficients sit inside the reported identification
    /// intervals; unbounded intervals are represented by a value past the
    /// lower end.
    pub fn reference() -> Self {
        Self::new(
            vec![
                ZoneRule::unbranched(2, 1.0, 0.425, 6),
                ZoneRule::branched(2, 4, 1.0, 1.2, 3, 0.6),
                ZoneRule::branched(2, 3, 1.0, 0.1, 3, 0.1),
                ZoneRule::branched(2, 2, 0.0, 0.1, 2, 0.1),
                ZoneRule::unbranched(3, 1.0, 1.025, 6),
                ZoneRule::branched(3, 4, 1.0, 1.45, 3, 0.575),
            ],
            true,
        )
    }

    pub fn rules(&self) -> &[ZoneRule] {
        &self.rules
    }

    /// Zones of a bearer PA in basal-to-apical order.
    pub fn zones_of(&self, bearer_pa: u8) -> impl Iterator<Item = &ZoneRule> {
        self.rules.iter().filter(move |r| r.bearer_pa == bearer_pa)
    }

    pub fn rule(&self, bearer_pa: u8, axillary_pa: u8) -> Option<&ZoneRule> {
        self.rules
            .iter()
            .find(|r| r.bearer_pa == bearer_pa && r.axillary_pa == axillary_pa)
    }

    pub fn rule_mut(&mut self, bearer_pa: u8, axillary_pa: u8) -> Option<&mut ZoneRule> {
        self.rules
            .iter_mut()
            .find(|r| r.bearer_pa == bearer_pa && r.axillary_pa == axillary_pa)
    }

    pub fn get(&self, coef: TopoCoef) -> Option<f64> {
        self.rule(coef.bearer_pa, coef.axillary_pa).map(|r| match coef.kind {
            CoefKind::M1 => r.m1,
            CoefKind::M2 => r.m2,
            CoefKind::A1 => r.a1,
            CoefKind::A2 => r.a2,
        })
    }

    pub fn set(&mut self, coef: TopoCoef, value: f64) -> bool {
        match self.rule_mut(coef.bearer_pa, coef.axillary_pa) {
            Some(r) => {
                match coef.kind {
                    CoefKind::M1 => r.m1 = value,
                    CoefKind::M2 => r.m2 = value,
                    CoefKind::A1 => r.a1 = value,
                    CoefKind::A2 => r.a2 = value,
                }
                true
            }
            None => false,
        }
    }
}

impl Default for ZoneRuleSet {
    fn default() -> Self {
        Self::reference()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoefKind {
    M1,
    M2,
    A1,
    A2,
}

/// A real-valued topological coefficient of one zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TopoCoef {
    pub kind: CoefKind,
    pub bearer_pa: u8,
    pub axillary_pa: u8,
}

impl TopoCoef {
    pub fn new(kind: CoefKind, bearer_pa: u8, axillary_pa: u8) -> Self {
        Self {
            kind,
            bearer_pa,
            axillary_pa,
        }
    }

    /// Whether the pinned-coefficient rule fixes this coefficient.
    pub fn is_pinned(&self) -> bool {
        matches!(self.kind, CoefKind::M1 | CoefKind::A1)
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split('.');
        let kind = match parts.next()? {
            "m1" => CoefKind::M1,
            "m2" => CoefKind::M2,
            "a1" => CoefKind::A1,
            "a2" => CoefKind::A2,
            _ => return None,
        };
        let bearer = parts.next()?.parse().ok()?;
        let axillary = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        Some(Self::new(kind, bearer, axillary))
    }

    /// The ten free coefficients of the beech topology.
    pub fn reference_free_set() -> Vec<TopoCoef> {
        use CoefKind::*;
        vec![
            TopoCoef::new(M2, 2, 0),
            TopoCoef::new(M2, 2, 4),
            TopoCoef::new(M2, 2, 3),
            TopoCoef::new(M2, 2, 2),
            TopoCoef::new(M2, 3, 0),
            TopoCoef::new(M2, 3, 4),
            TopoCoef::new(A2, 2, 4),
            TopoCoef::new(A2, 2, 3),
            TopoCoef::new(A2, 2, 2),
            TopoCoef::new(A2, 3, 4),
        ]
    }
}

impl fmt::Display for TopoCoef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            CoefKind::M1 => "m1",
            CoefKind::M2 => "m2",
            CoefKind::A1 => "a1",
            CoefKind::A2 => "a2",
        };
        write!(f, "{}.{}.{}", kind, self.bearer_pa, self.axillary_pa)
    }
}

/// Imposed topology of one trunk growth unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub gu_index: u32,
    pub metamer_count: u32,
    /// `(pa, count)` of the branches borne by this unit.
    pub branches: Vec<(u8, u32)>,
}

impl ScriptEntry {
    pub fn branch_count(&self) -> u32 {
        self.branches.iter().map(|&(_, n)| n).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrunkObservation {
    pub gu_index: u32,
    pub mass: f64,
    pub diameter: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingObservation {
    pub gu_index: u32,
    pub tree_age: u32,
    pub diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchObservation {
    pub gu_index: u32,
    pub pa: u8,
    pub wood_mass: f64,
    pub leaf_mass: f64,
}

/// Measurements of one tree, plus the trunk topology imposed on the simulation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetDataset {
    pub tree_age: u32,
    pub trunk_script: Vec<ScriptEntry>,
    pub trunk_profile: Vec<TrunkObservation>,
    /// Long format: one row per (growth unit, tree age).
    pub ring_matrix: Vec<RingObservation>,
    pub branch_compartments: Vec<BranchObservation>,
}

impl TargetDataset {
    /// Distinct growth units carrying ring measurements, in file order.
    pub fn ring_gus(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for r in &self.ring_matrix {
            if !out.contains(&r.gu_index) {
                out.push(r.gu_index);
            }
        }
        out
    }
}
