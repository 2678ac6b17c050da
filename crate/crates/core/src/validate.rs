//! Invariant checks on parameters, zone rules and target datasets.

use crate::model::{GrowthParameters, TargetDataset, ZoneRuleSet, TRUNK_PA};
use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, field: &str, message: &str) {
        if !ok {
            self.push(field, message);
        }
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pass() {
            return write!(f, "pass");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn finite_pos(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

pub fn validate_parameters(p: &GrowthParameters, z: &ZoneRuleSet) -> ValidationReport {
    let mut r = ValidationReport::default();
    let pa_max = usize::from(p.pa_max);

    r.check(!p.v_env.is_empty(), "v_env", "at least one tree environment factor is required");
    r.check(
        p.v_env.iter().all(|v| v.is_finite() && *v >= 0.0),
        "v_env",
        "environment factors must be finite and >= 0",
    );
    r.check(finite_pos(p.sp0), "sp0", "sp0 must be > 0");
    r.check(
        p.alpha.is_finite() && p.alpha > 0.0 && p.alpha <= 1.0,
        "alpha",
        "alpha out of (0,1]",
    );
    r.check(finite_pos(p.k_beer), "k_beer", "k_beer must be > 0");
    r.check(finite_pos(p.q0), "q0", "q0 must be > 0");
    r.check(p.pa_max >= 2, "pa_max", "pa_max must be >= 2");
    r.check(finite_pos(p.p_r), "p_r", "p_r must be > 0");
    r.check(p.gamma.is_finite() && p.gamma >= 0.0, "gamma", "gamma must be >= 0");
    r.check(
        (0.0..=1.0).contains(&p.lambda_mix),
        "lambda_mix",
        "lambda_mix out of [0,1]",
    );
    r.check(
        (0.0..1.0).contains(&p.root_fraction),
        "root_fraction",
        "root_fraction out of [0,1)",
    );
    r.check(finite_pos(p.wood_density), "wood_density", "wood_density must be > 0");
    r.check(
        p.short_shoot_metamers >= 1,
        "short_shoot_metamers",
        "short shoots need at least one metamer",
    );
    r.check(
        finite_pos(p.production_scale),
        "production_scale",
        "production_scale must be > 0",
    );
    r.check(
        finite_pos(p.long_short_shoot_ratio),
        "long_short_shoot_ratio",
        "long_short_shoot_ratio must be > 0",
    );

    let per_pa = [
        ("p_s", p.p_s.len()),
        ("p_rg", p.p_rg.len()),
        ("internode_leaf_ratio", p.internode_leaf_ratio.len()),
        ("allometry", p.allometry.len()),
    ];
    let mut lengths_ok = true;
    for (name, len) in per_pa {
        if len != pa_max {
            lengths_ok = false;
            r.push(name, format!("expected {pa_max} entries (one per PA), found {len}"));
        }
    }
    if lengths_ok && pa_max >= 2 {
        r.check(p.p_s.iter().all(|s| finite_pos(*s)), "p_s", "shoot sinks must be > 0");
        r.check(p.p_rg.iter().all(|s| finite_pos(*s)), "p_rg", "ring sinks must be > 0");
        r.check(p.p_rg[0] == 1.0, "p_rg", "p_rg(1) must equal 1 (reference PA)");
        r.check(
            p.internode_leaf_ratio.iter().all(|x| x.is_finite() && *x >= 0.0),
            "internode_leaf_ratio",
            "internode/leaf ratios must be >= 0",
        );
        r.check(
            p.allometry
                .iter()
                .all(|a| finite_pos(a.a_len) && finite_pos(a.b_len)),
            "allometry",
            "allometry coefficients must be > 0",
        );
        let short = p.p_s[pa_max - 1];
        for pa in 2..pa_max {
            let ratio = p.p_s[pa - 1] / short;
            if (ratio - p.long_short_shoot_ratio).abs() > 1e-9 * p.long_short_shoot_ratio {
                r.push(
                    "p_s",
                    format!(
                        "p_s({pa})/p_s({pa_max}) = {ratio} differs from long_short_shoot_ratio {}",
                        p.long_short_shoot_ratio
                    ),
                );
            }
        }
    }

    if p.slw_schedule.is_empty() {
        r.push("slw_schedule", "at least one knot is required");
    } else {
        r.check(
            p.slw_schedule.iter().all(|k| finite_pos(k.slw) && k.age.is_finite()),
            "slw_schedule",
            "specific leaf weights must be > 0",
        );
        r.check(
            p.slw_schedule.windows(2).all(|w| w[0].age < w[1].age),
            "slw_schedule",
            "knot ages must be strictly increasing",
        );
    }

    r.merge(validate_zones(z, p.pa_max));
    r
}

pub fn validate_zones(z: &ZoneRuleSet, pa_max: u8) -> ValidationReport {
    let mut r = ValidationReport::default();
    let rules = z.rules();
    for (idx, rule) in rules.iter().enumerate() {
        let name = format!("zone.{}.{}", rule.bearer_pa, rule.axillary_pa);
        if rule.bearer_pa <= TRUNK_PA || rule.bearer_pa >= pa_max {
            r.push(&name, format!("bearer PA must lie in 2..={}", pa_max.saturating_sub(1)));
        }
        if rule.axillary_pa != 0
            && (rule.axillary_pa < rule.bearer_pa || rule.axillary_pa > pa_max)
        {
            r.push(&name, "axillary PA must be 0 or between the bearer PA and pa_max");
        }
        let coefs = [rule.m1, rule.m2, rule.a1, rule.a2];
        if coefs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            r.push(&name, "coefficients must be finite and >= 0");
        }
        if f64::from(rule.m_max) < rule.m1 {
            r.push(&name, "m_max must be >= m1");
        }
        if rule.axillary_pa == 0 && (rule.a1 != 0.0 || rule.a2 != 0.0) {
            r.push(&name, "the unbranched zone carries no axis coefficients");
        }
        if rules[..idx]
            .iter()
            .any(|o| o.bearer_pa == rule.bearer_pa && o.axillary_pa == rule.axillary_pa)
        {
            r.push(&name, "duplicate zone");
        }
        if z.pinned_intercepts {
            let expected_m1 = if (rule.bearer_pa, rule.axillary_pa) == (2, 2) {
                0.0
            } else {
                1.0
            };
            if rule.m1 != expected_m1 {
                r.push(
                    &name,
                    format!("pinned topology requires m1 = {expected_m1}, found {}", rule.m1),
                );
            }
            if rule.a1 != 0.0 {
                r.push(&name, format!("pinned topology requires a1 = 0, found {}", rule.a1));
            }
        }
    }
    for pa in (TRUNK_PA + 1)..pa_max {
        let ok = z
            .rule(pa, 0)
            .map(|u| u.m1.round() >= 1.0 && u.m_max >= 1)
            .unwrap_or(false);
        if !ok {
            r.push(
                format!("zone.{pa}.0"),
                "every long-shoot PA needs an unbranched zone with at least one metamer",
            );
        }
    }
    r
}

/// Checks the invariants of a target dataset.
pub fn validate_dataset(d: &TargetDataset, pa_max: u8) -> ValidationReport {
    let mut r = ValidationReport::default();
    if d.trunk_script.len() != d.tree_age as usize {
        r.push(
            "script",
            format!(
                "{} script rows for a tree of age {}",
                d.trunk_script.len(),
                d.tree_age
            ),
        );
    }
    for (i, e) in d.trunk_script.iter().enumerate() {
        let field = format!("script[{}]", i + 1);
        if e.gu_index as usize != i + 1 {
            r.push(&field, format!("expected gu_index {}, found {}", i + 1, e.gu_index));
        }
        if e.metamer_count == 0 {
            r.push(&field, "metamer_count must be >= 1");
        }
        if e.branch_count() > e.metamer_count {
            r.push(&field, "more branches than metamers");
        }
        if e.branches.iter().any(|&(pa, _)| pa <= TRUNK_PA || pa > pa_max) {
            r.push(&field, format!("branch PA must lie in 2..={pa_max}"));
        }
    }
    for (i, t) in d.trunk_profile.iter().enumerate() {
        let field = format!("trunk[{}]", i + 1);
        if t.gu_index == 0 || t.gu_index > d.tree_age {
            r.push(&field, format!("growth unit {} outside 1..={}", t.gu_index, d.tree_age));
        }
        if !(t.mass >= 0.0 && t.diameter >= 0.0 && t.length >= 0.0) {
            r.push(&field, format!("negative value at growth unit {}", t.gu_index));
        }
    }
    for (i, b) in d.branch_compartments.iter().enumerate() {
        let field = format!("branches[{}]", i + 1);
        if b.gu_index == 0 || b.gu_index > d.tree_age {
            r.push(&field, format!("growth unit {} outside 1..={}", b.gu_index, d.tree_age));
        }
        if b.pa <= TRUNK_PA || b.pa > pa_max {
            r.push(&field, format!("branch PA must lie in 2..={pa_max}"));
        }
        if !(b.wood_mass >= 0.0 && b.leaf_mass >= 0.0) {
            r.push(
                &field,
                format!("negative mass at growth unit {} PA {}", b.gu_index, b.pa),
            );
        }
    }
    let mut last: std::collections::BTreeMap<u32, (u32, f64)> = Default::default();
    let mut order: Vec<usize> = (0..d.ring_matrix.len()).collect();
    order.sort_by_key(|&i| (d.ring_matrix[i].gu_index, d.ring_matrix[i].tree_age, i));
    for i in order {
        let x = &d.ring_matrix[i];
        let field = format!("rings[{}]", i + 1);
        let gu = x.gu_index;
        if gu == 0 || x.tree_age < gu || x.tree_age > d.tree_age || !(x.diameter >= 0.0) {
            r.push(&field, format!("growth unit {gu}: invalid row at age {}", x.tree_age));
        }
        if let Some(&(age, diameter)) = last.get(&gu) {
            if x.diameter < diameter {
                r.push(
                    &field,
                    format!(
                        "growth unit {gu}: diameter decreases between ages {age} and {}",
                        x.tree_age
                    ),
                );
            }
        }
        last.insert(gu, (x.tree_age, x.diameter));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefKind, TopoCoef};

    #[test]
    fn reference_configuration_passes() {
        let report = validate_parameters(&GrowthParameters::reference(), &ZoneRuleSet::reference());
        assert!(report.is_pass(), "{report}");
    }

    #[test]
    fn lambda_out_of_range_is_reported() {
        let mut p = GrowthParameters::reference();
        p.lambda_mix = 1.2;
        let report = validate_parameters(&p, &ZoneRuleSet::reference());
        assert!(!report.is_pass());
        assert!(report.violations.iter().any(|v| v.message == "lambda_mix out of [0,1]"));
    }

    #[test]
    fn pinned_reiteration_zone_requires_zero_m1() {
        let mut z = ZoneRuleSet::reference();
        z.set(TopoCoef::new(CoefKind::M1, 2, 2), 1.0);
        let report = validate_parameters(&GrowthParameters::reference(), &z);
        assert!(report.mentions("zone.2.2"), "{report}");

        z.pinned_intercepts = false;
        assert!(validate_parameters(&GrowthParameters::reference(), &z).is_pass());
    }

    #[test]
    fn reference_ring_sink_must_be_one() {
        let mut p = GrowthParameters::reference();
        p.p_rg[0] = 0.9;
        assert!(validate_parameters(&p, &ZoneRuleSet::reference()).mentions("p_rg"));
    }

    #[test]
    fn per_pa_vectors_must_match_pa_max() {
        let mut p = GrowthParameters::reference();
        p.p_s.pop();
        assert!(validate_parameters(&p, &ZoneRuleSet::reference()).mentions("p_s"));
    }

    #[test]
    fn decreasing_ring_diameter_is_reported() {
        use crate::model::{RingObservation, ScriptEntry};
        let d = TargetDataset {
            tree_age: 3,
            trunk_script: (1..=3)
                .map(|g| ScriptEntry {
                    gu_index: g,
                    metamer_count: 3,
                    branches: vec![],
                })
                .collect(),
            ring_matrix: vec![
                RingObservation {
                    gu_index: 1,
                    tree_age: 2,
                    diameter: 1.0,
                },
                RingObservation {
                    gu_index: 1,
                    tree_age: 3,
                    diameter: 0.8,
                },
            ],
            ..Default::default()
        };
        assert!(validate_dataset(&d, 4).mentions("rings[2]"));
    }
}
