//! Q/D-driven organogenesis: zone sizes, axis totals and their distribution.

use crate::error::{ModelError, Result};
use crate::model::{acrotonic_rank, CoefKind, ScriptEntry, TopoCoef, ZoneRule, ZoneRuleSet};
use serde::Serialize;

/// Metamers in a zone of a new growth unit: `min([m1 + m2·ratio], m_max)`.
pub fn metamer_count(zone: &ZoneRule, ratio: f64) -> u32 {
    let raw = (zone.m1 + zone.m2 * ratio).round();
    if !(raw > 0.0) {
        return 0;
    }
    raw.min(f64::from(zone.m_max)) as u32
}

/// Whole-tree number of new axes on `positions` candidate metamers,
/// clamped to one axis per position.
pub fn axis_total(positions: u64, zone: &ZoneRule, ratio: f64) -> u64 {
    let raw = (positions as f64 * (zone.a1 + zone.a2 * ratio)).round();
    if !(raw > 0.0) {
        return 0;
    }
    if raw >= positions as f64 {
        positions
    } else {
        raw as u64
    }
}

/// Candidate positions sharing a growth cycle and a rank along their mother
/// axis; all of them receive the same number of axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PositionGroup {
    pub birth_cycle: u32,
    pub rank: u32,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AxisAssignment {
    /// Axes per position for each input group (0 or 1).
    pub per_position: Vec<u32>,
    pub assigned: u64,
    /// `total − assigned`; positive when axes could not be placed.
    pub slack: i64,
}

/// Places `total` axes on whole groups, oldest groups first.
///
/// Groups are ordered by birth cycle, then by decreasing rank (older bearing
/// axes first). The chosen assignment fills a prefix of that order whose size
/// is closest to `total`, ties going to the larger prefix.
pub fn distribute_axes(total: u64, groups: &[PositionGroup]) -> Result<AxisAssignment> {
    let capacity: u64 = groups.iter().map(|g| g.size).sum();
    if total > capacity {
        return Err(ModelError::OverCapacity { total, capacity });
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| (groups[i].birth_cycle, std::cmp::Reverse(groups[i].rank), i));

    let mut best_len = 0;
    let mut best_sum = 0u64;
    let mut cum = 0u64;
    for (pos, &i) in order.iter().enumerate() {
        cum += groups[i].size;
        if cum.abs_diff(total) <= best_sum.abs_diff(total) {
            best_len = pos + 1;
            best_sum = cum;
        }
        if cum > total {
            break;
        }
    }
    let mut per_position = vec![0; groups.len()];
    for &i in &order[..best_len] {
        per_position[i] = 1;
    }
    Ok(AxisAssignment {
        per_position,
        assigned: best_sum,
        slack: total as i64 - best_sum as i64,
    })
}

/// Totals that `distribute_axes` maps to the same placement as `assigned`.
pub fn total_range(groups: &[PositionGroup], assigned: u64) -> (u64, u64) {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| (groups[i].birth_cycle, std::cmp::Reverse(groups[i].rank), i));
    let mut sums = vec![0u64];
    for &i in &order {
        let next = sums[sums.len() - 1] + groups[i].size;
        if next > sums[sums.len() - 1] {
            sums.push(next);
        }
    }
    let j = sums
        .iter()
        .position(|&s| s == assigned)
        .expect("assigned total is a prefix sum");
    // Midpoints go to the larger prefix.
    let lo = if j == 0 {
        0
    } else {
        (sums[j - 1] + sums[j]).div_ceil(2)
    };
    let hi = if j + 1 == sums.len() {
        sums[j]
    } else {
        (sums[j] + sums[j + 1]).div_ceil(2) - 1
    };
    (lo, hi)
}

/// One rounding outcome of the organogenesis rules that shaped a simulated
/// structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Decision {
    /// Metamer count of a zone, used by new growth units.
    Metamers {
        cycle: u32,
        bearer_pa: u8,
        axillary_pa: u8,
        ratio: f64,
        count: u32,
    },
    /// Axis total of a zone, with the totals giving the same placement.
    Axes {
        cycle: u32,
        bearer_pa: u8,
        axillary_pa: u8,
        ratio: f64,
        positions: u64,
        total_min: u64,
        total_max: u64,
    },
}

/// Range of a coefficient over which every recorded decision is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientRange {
    /// `None` when unbounded below.
    pub lo: Option<f64>,
    /// `None` when unbounded above.
    pub hi: Option<f64>,
    /// Whether any decision depends on the coefficient.
    pub engaged: bool,
}

/// Intersects, over all decisions, the coefficient values that reproduce
/// each decision with every other coefficient held fixed.
pub fn coefficient_range(
    decisions: &[Decision],
    zones: &ZoneRuleSet,
    coef: TopoCoef,
) -> CoefficientRange {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut engaged = false;
    for d in decisions {
        let (bearer, axillary) = match *d {
            Decision::Metamers {
                bearer_pa,
                axillary_pa,
                ..
            }
            | Decision::Axes {
                bearer_pa,
                axillary_pa,
                ..
            } => (bearer_pa, axillary_pa),
        };
        if (bearer, axillary) != (coef.bearer_pa, coef.axillary_pa) {
            continue;
        }
        let Some(rule) = zones.rule(bearer, axillary) else {
            continue;
        };
        // The rule argument is `base + slope·c` for the coefficient c.
        let (base, slope, x_lo, x_hi) = match (*d, coef.kind) {
            (Decision::Metamers { ratio, count, .. }, CoefKind::M1 | CoefKind::M2) => {
                if rule.m_max == 0 {
                    continue;
                }
                let (base, slope) = if coef.kind == CoefKind::M2 {
                    (rule.m1, ratio)
                } else {
                    (rule.m2 * ratio, 1.0)
                };
                let v = f64::from(count);
                let x_lo = if count == 0 {
                    f64::NEG_INFINITY
                } else {
                    v - 0.5
                };
                let x_hi = if count >= rule.m_max {
                    f64::INFINITY
                } else {
                    v + 0.5
                };
                (base, slope, x_lo, x_hi)
            }
            (
                Decision::Axes {
                    ratio,
                    positions,
                    total_min,
                    total_max,
                    ..
                },
                CoefKind::A1 | CoefKind::A2,
            ) => {
                if positions == 0 {
                    continue;
                }
                let n = positions as f64;
                let (base, slope) = if coef.kind == CoefKind::A2 {
                    (n * rule.a1, n * ratio)
                } else {
                    (n * rule.a2 * ratio, n)
                };
                let x_lo = if total_min == 0 {
                    f64::NEG_INFINITY
                } else {
                    total_min as f64 - 0.5
                };
                let x_hi = if total_max >= positions {
                    f64::INFINITY
                } else {
                    total_max as f64 + 0.5
                };
                (base, slope, x_lo, x_hi)
            }
            _ => continue,
        };
        if !(slope > 0.0) {
            continue;
        }
        engaged = true;
        lo = lo.max((x_lo - base) / slope);
        hi = hi.min((x_hi - base) / slope);
    }
    CoefficientRange {
        lo: lo.is_finite().then_some(lo),
        hi: hi.is_finite().then_some(hi),
        engaged,
    }
}

/// Zone layout `(axillary PA, metamers)` of a new growth unit of PA `bearer`,
/// basal to apical.
pub fn zone_layout(zones: &ZoneRuleSet, bearer: u8, ratio: f64) -> Vec<(u8, u32)> {
    zones
        .zones_of(bearer)
        .map(|z| (z.axillary_pa, metamer_count(z, ratio)))
        .collect()
}

/// Layout of a trunk growth unit from its script entry: unbranched metamers
/// at the base, then scripted branches from the weakest PA to the most
/// vigorous toward the apex.
pub fn trunk_layout(entry: &ScriptEntry) -> Result<Vec<(u8, u32)>> {
    let branched = entry.branch_count();
    if branched > entry.metamer_count {
        return Err(ModelError::ScriptOverflow {
            gu: entry.gu_index,
            branches: branched,
            metamers: entry.metamer_count,
        });
    }
    let mut by_pa: Vec<(u8, u32)> = Vec::new();
    for &(pa, n) in &entry.branches {
        match by_pa.iter_mut().find(|(p, _)| *p == pa) {
            Some(slot) => slot.1 += n,
            None => by_pa.push((pa, n)),
        }
    }
    by_pa.retain(|&(_, n)| n > 0);
    by_pa.sort_by_key(|&(pa, _)| acrotonic_rank(pa));
    let mut layout = vec![(0, entry.metamer_count - branched)];
    layout.extend(by_pa);
    Ok(layout)
}

/// Outcome of one zone type's axis placement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneAxes {
    pub bearer_pa: u8,
    pub axillary_pa: u8,
    pub positions: u64,
    pub total: u64,
    pub groups: Vec<PositionGroup>,
    pub assignment: AxisAssignment,
}

/// Decisions taken at the end of a cycle for the shoots of the next one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrganogenesisPlan {
    pub ratio: f64,
    /// Zone layout of the new growth units, per bearer PA.
    pub layouts: Vec<(u8, Vec<(u8, u32)>)>,
    pub axes: Vec<ZoneAxes>,
}

impl OrganogenesisPlan {
    pub fn layout(&self, pa: u8) -> Option<&[(u8, u32)]> {
        self.layouts
            .iter()
            .find(|(p, _)| *p == pa)
            .map(|(_, l)| l.as_slice())
    }

    pub fn slack(&self) -> i64 {
        self.axes.iter().map(|a| a.assignment.slack).sum()
    }
}

/// Computes zone layouts for `branched_pas` and distributes new axes over
/// the candidate groups of every branched zone.
pub fn plan_organogenesis(
    zones: &ZoneRuleSet,
    branched_pas: impl IntoIterator<Item = u8>,
    ratio: f64,
    mut groups_for: impl FnMut(&ZoneRule) -> Vec<PositionGroup>,
) -> Result<OrganogenesisPlan> {
    let layouts = branched_pas
        .into_iter()
        .map(|pa| (pa, zone_layout(zones, pa, ratio)))
        .collect();
    let mut axes = Vec::new();
    for rule in zones.rules().iter().filter(|r| r.axillary_pa != 0) {
        let groups = groups_for(rule);
        let positions = groups.iter().map(|g| g.size).sum();
        let total = axis_total(positions, rule, ratio);
        let assignment = distribute_axes(total, &groups)?;
        if assignment.slack != 0 {
            log::debug!(
                "zone {}{}: {} axes requested, {} placed",
                rule.bearer_pa,
                rule.axillary_pa,
                total,
                assignment.assigned
            );
        }
        axes.push(ZoneAxes {
            bearer_pa: rule.bearer_pa,
            axillary_pa: rule.axillary_pa,
            positions,
            total,
            groups,
            assignment,
        });
    }
    Ok(OrganogenesisPlan {
        ratio,
        layouts,
        axes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zone(m1: f64, m2: f64, m_max: u32, a1: f64, a2: f64) -> ZoneRule {
        ZoneRule {
            bearer_pa: 2,
            axillary_pa: 4,
            m1,
            m2,
            m_max,
            a1,
            a2,
        }
    }

    fn group(birth_cycle: u32, rank: u32, size: u64) -> PositionGroup {
        PositionGroup {
            birth_cycle,
            rank,
            size,
        }
    }

    /// Enumerates every group-uniform assignment respecting the oldest-first
    /// rule (a group is filled only if every older group is) and keeps the one
    /// closest to `total`, preferring more axes.
    fn enumeration_oracle(total: u64, groups: &[PositionGroup]) -> u64 {
        let n = groups.len();
        let older = |a: &PositionGroup, b: &PositionGroup| {
            (a.birth_cycle, std::cmp::Reverse(a.rank)) < (b.birth_cycle, std::cmp::Reverse(b.rank))
        };
        let mut best: Option<u64> = None;
        for mask in 0u32..(1 << n) {
            let filled = |i: usize| mask & (1 << i) != 0;
            let ordered = (0..n).all(|i| {
                !filled(i) || (0..n).all(|j| !older(&groups[j], &groups[i]) || filled(j))
            });
            if !ordered {
                continue;
            }
            let sum: u64 = (0..n).filter(|&i| filled(i)).map(|i| groups[i].size).sum();
            best = match best {
                None => Some(sum),
                Some(b) => {
                    let (db, ds) = (b.abs_diff(total), sum.abs_diff(total));
                    if ds < db || (ds == db && sum > b) {
                        Some(sum)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best.unwrap_or(0)
    }

    #[test]
    fn metamer_count_examples() {
        assert_eq!(metamer_count(&zone(1.0, 1.2, 5, 0.0, 0.0), 2.0), 3);
        assert_eq!(metamer_count(&zone(1.0, 1.2, 5, 0.0, 0.0), 0.0), 1);
        assert_eq!(metamer_count(&zone(1.0, 1e9, 5, 0.0, 0.0), 0.5), 5);
        // Half rounds away from zero.
        assert_eq!(metamer_count(&zone(1.0, 1.0, 5, 0.0, 0.0), 1.5), 3);
    }

    #[test]
    fn axis_total_examples() {
        assert_eq!(axis_total(81, &zone(1.0, 0.0, 5, 0.0, 0.6), 4.31), 81);
        assert_eq!(axis_total(81, &zone(1.0, 0.0, 5, 0.0, 0.6), 0.0), 0);
        assert_eq!(axis_total(10, &zone(1.0, 0.0, 5, 0.0, 0.6), 0.5), 3);
    }

    #[test]
    fn saturated_distribution_fills_everything() {
        let groups = [group(7, 5, 2), group(7, 3, 4)];
        let a = distribute_axes(6, &groups).unwrap();
        assert_eq!(a.per_position, vec![1, 1]);
        assert_eq!(a.slack, 0);
    }

    #[test]
    fn group_uniformity_rounds_to_nearest_prefix() {
        // 2 or 4 axes are equally close to 3; the tie goes to more axes.
        let groups = [group(7, 5, 2), group(7, 3, 2)];
        let a = distribute_axes(3, &groups).unwrap();
        assert_eq!(a.assigned, enumeration_oracle(3, &groups));
        assert_eq!(a.per_position, vec![1, 1]);
        assert_eq!(a.slack, -1);

        let single = [group(4, 1, 6)];
        assert_eq!(distribute_axes(2, &single).unwrap().assigned, 0);
        assert_eq!(distribute_axes(3, &single).unwrap().assigned, 6);
        assert_eq!(distribute_axes(4, &single).unwrap().assigned, 6);
    }

    #[test]
    fn oldest_groups_are_served_first() {
        let groups = [group(9, 1, 3), group(9, 4, 3), group(9, 2, 3)];
        let a = distribute_axes(3, &groups).unwrap();
        assert_eq!(a.per_position, vec![0, 1, 0]);
    }

    #[test]
    fn over_capacity_is_rejected() {
        assert!(distribute_axes(5, &[group(1, 1, 4)]).is_err());
    }

    #[test]
    fn trunk_layout_places_vigorous_branches_apically() {
        let entry = ScriptEntry {
            gu_index: 12,
            metamer_count: 8,
            branches: vec![(2, 1), (3, 2)],
        };
        assert_eq!(trunk_layout(&entry).unwrap(), vec![(0, 5), (3, 2), (2, 1)]);
        let bare = ScriptEntry {
            gu_index: 1,
            metamer_count: 5,
            branches: vec![],
        };
        assert_eq!(trunk_layout(&bare).unwrap(), vec![(0, 5)]);
        let overfull = ScriptEntry {
            gu_index: 3,
            metamer_count: 1,
            branches: vec![(4, 2)],
        };
        assert!(trunk_layout(&overfull).is_err());
    }

    #[test]
    fn zone_layout_follows_acrotony() {
        let z = ZoneRuleSet::reference();
        let layout = zone_layout(&z, 2, 10.0);
        let order: Vec<u8> = layout.iter().map(|&(k, _)| k).collect();
        assert_eq!(order, vec![0, 4, 3, 2]);
        assert!(layout.iter().all(|&(_, n)| n > 0));
    }

    #[test]
    fn capped_zone_is_unbounded_above() {
        let z = ZoneRuleSet::reference();
        let coef = TopoCoef::new(CoefKind::M2, 2, 4);
        let d = [Decision::Metamers {
            cycle: 3,
            bearer_pa: 2,
            axillary_pa: 4,
            ratio: 2.0,
            count: 3,
        }];
        let r = coefficient_range(&d, &z, coef);
        assert!(r.engaged);
        assert_eq!(r.hi, None);
        assert_eq!(r.lo, Some(0.75));
        let inert = coefficient_range(&d, &z, TopoCoef::new(CoefKind::M2, 3, 0));
        assert!(!inert.engaged);
    }

    #[test]
    fn range_reproduces_metamer_counts() {
        let z = ZoneRuleSet::reference();
        let coef = TopoCoef::new(CoefKind::M2, 2, 0);
        let ratios = [0.7, 1.9, 3.3];
        let decisions: Vec<Decision> = ratios
            .iter()
            .map(|&r| Decision::Metamers {
                cycle: 1,
                bearer_pa: 2,
                axillary_pa: 0,
                ratio: r,
                count: metamer_count(z.rule(2, 0).unwrap(), r),
            })
            .collect();
        let range = coefficient_range(&decisions, &z, coef);
        let (lo, hi) = (range.lo.unwrap(), range.hi.unwrap());
        assert!(lo < 0.425 && 0.425 < hi);
        // Brute-force sweep at 1e-3 resolution.
        let counts = |c: f64| {
            let mut zz = z.clone();
            zz.set(coef, c);
            ratios
                .iter()
                .map(|&r| metamer_count(zz.rule(2, 0).unwrap(), r))
                .collect::<Vec<_>>()
        };
        let reference = counts(0.425);
        let mut c = 0.0;
        while c < 2.0 {
            let inside = c >= lo && c < hi;
            assert_eq!(counts(c) == reference, inside, "c = {c}");
            c += 1e-3;
        }
    }

    proptest! {
        #[test]
        fn total_range_matches_distribution(
            sizes in prop::collection::vec(0u64..6, 1..7),
            frac in 0.0f64..=1.0,
        ) {
            let groups: Vec<PositionGroup> = sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| group(2, i as u32, s))
                .collect();
            let capacity: u64 = sizes.iter().sum();
            let total = (capacity as f64 * frac).floor() as u64;
            let assigned = distribute_axes(total, &groups).unwrap().assigned;
            let (lo, hi) = total_range(&groups, assigned);
            for t in 0..=capacity {
                let same = distribute_axes(t, &groups).unwrap().assigned == assigned;
                prop_assert_eq!(same, t >= lo && t <= hi, "t = {}", t);
            }
        }

        #[test]
        fn distribution_matches_enumeration(
            sizes in prop::collection::vec(0u64..6, 1..8),
            frac in 0.0f64..=1.0,
        ) {
            let groups: Vec<PositionGroup> = sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| group(3, (i as u32 * 7) % 11 + i as u32 * 13, s))
                .collect();
            let capacity: u64 = sizes.iter().sum();
            let total = (capacity as f64 * frac).floor() as u64;
            let a = distribute_axes(total, &groups).unwrap();
            prop_assert_eq!(a.assigned, enumeration_oracle(total, &groups));
            let placed: u64 = a.per_position.iter().zip(&groups).map(|(&p, g)| p as u64 * g.size).sum();
            prop_assert_eq!(placed, a.assigned);
        }

        #[test]
        fn counts_are_monotone_in_ratio(
            m1 in 0.0f64..3.0, m2 in 0.0f64..3.0, a2 in 0.0f64..2.0,
            n in 0u64..200, r in 0.0f64..10.0, dr in 0.0f64..5.0,
        ) {
            let z = zone(m1, m2, 6, 0.0, a2);
            prop_assert!(metamer_count(&z, r + dr) >= metamer_count(&z, r));
            prop_assert!(axis_total(n, &z, r + dr) >= axis_total(n, &z, r));
            prop_assert!(axis_total(n, &z, r) <= n);
        }
    }
}
