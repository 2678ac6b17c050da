//! Parameter files, target files and run outputs.
//!
//! Parameter files are line-oriented `key = value` text with `#` comments and
//! comma-separated arrays. Top-level keys are the [`GrowthParameters`] field
//! names, except that the SLW schedule is given as `slw_age`/`slw_value` and
//! the length allometry as `a_len`/`b_len` (one entry per PA). Missing keys
//! keep their reference values. Two optional sections follow:
//!
//! ```text
//! [zones]
//! pinned_intercepts = true
//! # bearer, axillary, m1, m2, m_max, a1, a2
//! zone = 2, 0, 1, 0.425, 6, 0, 0
//!
//! [fit]
//! seed = 1
//! nesting = fast 5            # or: full
//! free = sp0, 0.001, 0.2      # name, lo, hi[, init]
//! topology = m2.2.0, 0, 5     # coefficient, lo, hi[, init]; or: none
//! weight = ring, auto         # class, auto | value
//! anneal_t0 = auto
//! ```
//!
//! Target files are sectioned CSV: `[script]`, `[trunk]`, `[rings]` and
//! `[branches]`, each followed by a fixed header row.

use crate::calibration::{
    AnnealSchedule, ContinuousParam, FitResult, FitSpec, FreeCoef, FreeParam, LmSettings,
    Nesting, Weight,
};
use crate::engine::{BranchRecord, RingRecord, SimulationOutput, TrunkUnitRecord};
use crate::error::{ModelError, Result};
use crate::model::{
    Allometry, BranchObservation, GrowthParameters, RingObservation, ScriptEntry, SlwKnot,
    TargetDataset, TopoCoef, TrunkObservation, ZoneRule, ZoneRuleSet,
};
use crate::targets::DataClass;
use crate::validate::validate_dataset;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Contents of a parameter file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterFile {
    pub params: GrowthParameters,
    pub zones: ZoneRuleSet,
    /// The `[fit]` section, if present.
    pub fit: Option<FitSpec>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

#[derive(Default)]
struct Errors {
    origin: String,
    list: Vec<String>,
}

impl Errors {
    fn at(&mut self, line: usize, msg: impl std::fmt::Display) {
        self.list.push(format!("{}:{line}: {msg}", self.origin));
    }

    fn finish<T>(self, value: T) -> Result<T> {
        if self.list.is_empty() {
            Ok(value)
        } else {
            Err(ModelError::Parse(self.list))
        }
    }
}

fn parse_list<T: FromStr>(value: &str) -> Option<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim().parse().ok())
        .collect::<Option<Vec<T>>>()
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Parses parameter-file text; `origin` prefixes error locations.
pub fn parse_parameters(text: &str, origin: &str) -> Result<ParameterFile> {
    let mut errors = Errors {
        origin: origin.to_string(),
        ..Default::default()
    };
    let mut sections: BTreeMap<&str, Vec<Entry>> = BTreeMap::new();
    let mut current = "";
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            match name.trim() {
                n @ ("zones" | "fit") => {
                    current = n;
                    sections.entry(n).or_default();
                }
                n => errors.at(line, format!("unknown section [{n}]")),
            }
            continue;
        }
        match content.split_once('=') {
            Some((k, v)) => sections.entry(current).or_default().push(Entry {
                line,
                key: k.trim(),
                value: v.trim(),
            }),
            None => errors.at(line, "expected `key = value`"),
        }
    }

    let mut p = GrowthParameters::reference();
    let mut slw_age: Option<(usize, Vec<f64>)> = None;
    let mut slw_value: Option<(usize, Vec<f64>)> = None;
    let mut a_len: Option<(usize, Vec<f64>)> = None;
    let mut b_len: Option<(usize, Vec<f64>)> = None;
    for e in sections.get("").into_iter().flatten() {
        macro_rules! scalar {
            ($field:expr) => {
                match e.value.parse() {
                    Ok(v) => $field = v,
                    Err(_) => errors.at(e.line, format!("{}: cannot parse `{}`", e.key, e.value)),
                }
            };
        }
        macro_rules! list {
            ($field:expr) => {
                match parse_list(e.value) {
                    Some(v) => $field = v,
                    None => errors.at(e.line, format!("{}: cannot parse `{}`", e.key, e.value)),
                }
            };
        }
        macro_rules! located_list {
            ($slot:ident) => {
                match parse_list(e.value) {
                    Some(v) => $slot = Some((e.line, v)),
                    None => errors.at(e.line, format!("{}: cannot parse `{}`", e.key, e.value)),
                }
            };
        }
        match e.key {
            "v_env" => list!(p.v_env),
            "sp0" => scalar!(p.sp0),
            "alpha" => scalar!(p.alpha),
            "k_beer" => scalar!(p.k_beer),
            "q0" => scalar!(p.q0),
            "pa_max" => scalar!(p.pa_max),
            "p_s" => list!(p.p_s),
            "p_r" => scalar!(p.p_r),
            "gamma" => scalar!(p.gamma),
            "lambda_mix" => scalar!(p.lambda_mix),
            "p_rg" => list!(p.p_rg),
            "root_fraction" => scalar!(p.root_fraction),
            "internode_leaf_ratio" => list!(p.internode_leaf_ratio),
            "long_short_shoot_ratio" => scalar!(p.long_short_shoot_ratio),
            "slw_age" => located_list!(slw_age),
            "slw_value" => located_list!(slw_value),
            "a_len" => located_list!(a_len),
            "b_len" => located_list!(b_len),
            "wood_density" => scalar!(p.wood_density),
            "short_shoot_metamers" => scalar!(p.short_shoot_metamers),
            "production_scale" => scalar!(p.production_scale),
            "leaves_above_inclusive" => scalar!(p.leaves_above_inclusive),
            k => errors.at(e.line, format!("unknown key `{k}`")),
        }
    }
    if slw_age.is_some() || slw_value.is_some() {
        let ages = slw_age.map_or_else(|| p.slw_schedule.iter().map(|k| k.age).collect(), |x| x.1);
        let (line, values) = slw_value
            .unwrap_or_else(|| (0, p.slw_schedule.iter().map(|k| k.slw).collect()));
        if ages.len() == values.len() {
            p.slw_schedule = ages
                .into_iter()
                .zip(values)
                .map(|(age, slw)| SlwKnot { age, slw })
                .collect();
        } else {
            errors.at(line, "slw_age and slw_value differ in length");
        }
    }
    if a_len.is_some() || b_len.is_some() {
        let a = a_len.map_or_else(|| p.allometry.iter().map(|x| x.a_len).collect(), |x| x.1);
        let (line, b) =
            b_len.unwrap_or_else(|| (0, p.allometry.iter().map(|x| x.b_len).collect()));
        if a.len() == b.len() {
            p.allometry = a
                .into_iter()
                .zip(b)
                .map(|(a_len, b_len)| Allometry { a_len, b_len })
                .collect();
        } else {
            errors.at(line, "a_len and b_len differ in length");
        }
    }

    let mut zones = ZoneRuleSet::reference();
    if let Some(entries) = sections.get("zones") {
        let mut rules = Vec::new();
        let mut pinned = true;
        for e in entries {
            match e.key {
                "pinned_intercepts" => match e.value.parse() {
                    Ok(v) => pinned = v,
                    Err(_) => errors.at(e.line, "pinned_intercepts: expected true or false"),
                },
                "zone" => match parse_zone(e.value) {
                    Some(z) => rules.push(z),
                    None => errors.at(
                        e.line,
                        "zone: expected `bearer, axillary, m1, m2, m_max, a1, a2`",
                    ),
                },
                k => errors.at(e.line, format!("unknown key `{k}` in [zones]")),
            }
        }
        zones = ZoneRuleSet::new(rules, pinned);
    }

    let fit = sections
        .get("fit")
        .map(|entries| parse_fit(entries, &p, &zones, &mut errors));
    errors.finish(ParameterFile {
        params: p,
        zones,
        fit,
    })
}

fn parse_zone(value: &str) -> Option<ZoneRule> {
    let f: Vec<&str> = value.split(',').map(str::trim).collect();
    if f.len() != 7 {
        return None;
    }
    Some(ZoneRule {
        bearer_pa: f[0].parse().ok()?,
        axillary_pa: f[1].parse().ok()?,
        m1: f[2].parse().ok()?,
        m2: f[3].parse().ok()?,
        m_max: f[4].parse().ok()?,
        a1: f[5].parse().ok()?,
        a2: f[6].parse().ok()?,
    })
}

fn parse_fit(
    entries: &[Entry],
    p: &GrowthParameters,
    z: &ZoneRuleSet,
    errors: &mut Errors,
) -> FitSpec {
    let mut spec = FitSpec::reference(p, z);
    let mut continuous: Option<Vec<FreeParam>> = None;
    let mut topology: Option<Vec<FreeCoef>> = None;
    for e in entries {
        let fields: Vec<&str> = e.value.split(',').map(str::trim).collect();
        let bad = |errors: &mut Errors, what: &str| {
            errors.at(e.line, format!("{}: expected {what}, got `{}`", e.key, e.value))
        };
        macro_rules! scalar {
            ($field:expr, $what:expr) => {
                match e.value.parse() {
                    Ok(v) => $field = v,
                    Err(_) => bad(errors, $what),
                }
            };
        }
        match e.key {
            "seed" => scalar!(spec.seed, "an unsigned integer"),
            "nesting" => {
                let words: Vec<&str> = e.value.split_whitespace().collect();
                match words.as_slice() {
                    ["full"] => spec.nesting = Nesting::Full,
                    ["fast", k] => match k.parse() {
                        Ok(k) => spec.nesting = Nesting::Fast { k },
                        Err(_) => bad(errors, "`full` or `fast K`"),
                    },
                    _ => bad(errors, "`full` or `fast K`"),
                }
            }
            "free" => {
                let parsed = ContinuousParam::parse(fields[0]).and_then(|param| {
                    if !param.applies_to(p) {
                        return None;
                    }
                    let nums: Option<Vec<f64>> =
                        fields[1..].iter().map(|s| s.parse().ok()).collect();
                    match nums?.as_slice() {
                        &[lo, hi] => Some(FreeParam {
                            param,
                            lo,
                            hi,
                            init: param.get(p),
                        }),
                        &[lo, hi, init] => Some(FreeParam { param, lo, hi, init }),
                        _ => None,
                    }
                });
                match parsed {
                    Some(f) => continuous.get_or_insert_with(Vec::new).push(f),
                    None => bad(errors, "`name, lo, hi[, init]` with a known parameter"),
                }
            }
            "topology" if e.value == "none" => {
                topology.get_or_insert_with(Vec::new);
            }
            "topology" => {
                let parsed = TopoCoef::parse(fields[0]).and_then(|coef| {
                    let nums: Option<Vec<f64>> =
                        fields[1..].iter().map(|s| s.parse().ok()).collect();
                    match nums?.as_slice() {
                        &[lo, hi] => Some(FreeCoef {
                            coef,
                            lo,
                            hi,
                            init: z.get(coef)?,
                        }),
                        &[lo, hi, init] => Some(FreeCoef { coef, lo, hi, init }),
                        _ => None,
                    }
                });
                match parsed {
                    Some(f) => topology.get_or_insert_with(Vec::new).push(f),
                    None => bad(errors, "`coefficient, lo, hi[, init]` or `none`"),
                }
            }
            "weight" => {
                let parsed = match fields.as_slice() {
                    [class, "auto"] => DataClass::parse(class).map(|c| (c, Weight::Auto)),
                    [class, w] => DataClass::parse(class)
                        .and_then(|c| w.parse().ok().map(|w| (c, Weight::Fixed(w)))),
                    _ => None,
                };
                match parsed {
                    Some((c, w)) => {
                        spec.weights.insert(c, w);
                    }
                    None => bad(errors, "`class, auto | value`"),
                }
            }
            "anneal_t0" if e.value == "auto" => spec.anneal.t0 = None,
            "anneal_t0" => match e.value.parse() {
                Ok(v) => spec.anneal.t0 = Some(v),
                Err(_) => bad(errors, "`auto` or a number"),
            },
            "anneal_cooling" => scalar!(spec.anneal.cooling, "a number"),
            "anneal_proposals" => scalar!(spec.anneal.proposals_per_temperature, "an integer"),
            "anneal_stop_ratio" => scalar!(spec.anneal.stop_ratio, "a number"),
            "lm_max_iter" => scalar!(spec.lm.max_iter, "an integer"),
            "lm_inner_max_iter" => scalar!(spec.lm.inner_max_iter, "an integer"),
            "lm_ftol" => scalar!(spec.lm.ftol, "a number"),
            "lm_xtol" => scalar!(spec.lm.xtol, "a number"),
            "lm_fd_step" => scalar!(spec.lm.fd_step, "a number"),
            "lm_coarse_fd_step" => scalar!(spec.lm.coarse_fd_step, "a number"),
            "lm_initial_radius" => scalar!(spec.lm.initial_radius, "a number"),
            "lm_max_rounds" => scalar!(spec.lm.max_rounds, "an integer"),
            "lm_inner_max_rounds" => scalar!(spec.lm.inner_max_rounds, "an integer"),
            k => errors.at(e.line, format!("unknown key `{k}` in [fit]")),
        }
    }
    if let Some(c) = continuous {
        spec.continuous = c;
    }
    if let Some(t) = topology {
        spec.topology = t;
    }
    spec
}

/// Renders a parameter file; parsing the result gives back `pf`.
pub fn format_parameters(pf: &ParameterFile) -> String {
    let p = &pf.params;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("v_env", join(&p.v_env));
    kv("sp0", p.sp0.to_string());
    kv("alpha", p.alpha.to_string());
    kv("k_beer", p.k_beer.to_string());
    kv("q0", p.q0.to_string());
    kv("pa_max", p.pa_max.to_string());
    kv("p_s", join(&p.p_s));
    kv("p_r", p.p_r.to_string());
    kv("gamma", p.gamma.to_string());
    kv("lambda_mix", p.lambda_mix.to_string());
    kv("p_rg", join(&p.p_rg));
    kv("root_fraction", p.root_fraction.to_string());
    kv("internode_leaf_ratio", join(&p.internode_leaf_ratio));
    kv("long_short_shoot_ratio", p.long_short_shoot_ratio.to_string());
    kv("slw_age", join(p.slw_schedule.iter().map(|k| k.age)));
    kv("slw_value", join(p.slw_schedule.iter().map(|k| k.slw)));
    kv("a_len", join(p.allometry.iter().map(|a| a.a_len)));
    kv("b_len", join(p.allometry.iter().map(|a| a.b_len)));
    kv("wood_density", p.wood_density.to_string());
    kv("short_shoot_metamers", p.short_shoot_metamers.to_string());
    kv("production_scale", p.production_scale.to_string());
    kv("leaves_above_inclusive", p.leaves_above_inclusive.to_string());

    s.push_str("\n[zones]\n");
    let _ = writeln!(s, "pinned_intercepts = {}", pf.zones.pinned_intercepts);
    s.push_str("# bearer, axillary, m1, m2, m_max, a1, a2\n");
    for r in pf.zones.rules() {
        let _ = writeln!(
            s,
            "zone = {}, {}, {}, {}, {}, {}, {}",
            r.bearer_pa, r.axillary_pa, r.m1, r.m2, r.m_max, r.a1, r.a2
        );
    }

    if let Some(f) = &pf.fit {
        s.push_str("\n[fit]\n");
        let _ = writeln!(s, "seed = {}", f.seed);
        match f.nesting {
            Nesting::Full => s.push_str("nesting = full\n"),
            Nesting::Fast { k } => {
                let _ = writeln!(s, "nesting = fast {k}");
            }
        }
        for c in &f.continuous {
            let _ = writeln!(s, "free = {}, {}, {}, {}", c.param, c.lo, c.hi, c.init);
        }
        if f.topology.is_empty() {
            s.push_str("topology = none\n");
        }
        for c in &f.topology {
            let _ = writeln!(s, "topology = {}, {}, {}, {}", c.coef, c.lo, c.hi, c.init);
        }
        for (c, w) in &f.weights {
            match w {
                Weight::Auto => {
                    let _ = writeln!(s, "weight = {c}, auto");
                }
                Weight::Fixed(x) => {
                    let _ = writeln!(s, "weight = {c}, {x}");
                }
            }
        }
        let AnnealSchedule {
            t0,
            cooling,
            proposals_per_temperature,
            stop_ratio,
        } = f.anneal;
        match t0 {
            Some(t) => {
                let _ = writeln!(s, "anneal_t0 = {t}");
            }
            None => s.push_str("anneal_t0 = auto\n"),
        }
        let _ = writeln!(s, "anneal_cooling = {cooling}");
        let _ = writeln!(s, "anneal_proposals = {proposals_per_temperature}");
        let _ = writeln!(s, "anneal_stop_ratio = {stop_ratio}");
        let LmSettings {
            max_iter,
            inner_max_iter,
            ftol,
            xtol,
            fd_step,
            coarse_fd_step,
            initial_radius,
            max_rounds,
            inner_max_rounds,
        } = f.lm;
        let _ = writeln!(s, "lm_max_iter = {max_iter}");
        let _ = writeln!(s, "lm_inner_max_iter = {inner_max_iter}");
        let _ = writeln!(s, "lm_ftol = {ftol}");
        let _ = writeln!(s, "lm_xtol = {xtol}");
        let _ = writeln!(s, "lm_fd_step = {fd_step}");
        let _ = writeln!(s, "lm_coarse_fd_step = {coarse_fd_step}");
        let _ = writeln!(s, "lm_initial_radius = {initial_radius}");
        let _ = writeln!(s, "lm_max_rounds = {max_rounds}");
        let _ = writeln!(s, "lm_inner_max_rounds = {inner_max_rounds}");
    }
    s
}

pub fn read_parameter_file(path: &Path) -> Result<ParameterFile> {
    parse_parameters(&read_text(path)?, &path.display().to_string())
}

pub fn write_parameter_file(path: &Path, pf: &ParameterFile) -> Result<()> {
    write_text(path, &format_parameters(pf))
}

const SCRIPT_HEADER: [&str; 3] = ["gu_index", "metamer_count", "branches"];
const TRUNK_HEADER: [&str; 4] = ["gu_index", "mass", "diameter", "length"];
const RINGS_HEADER: [&str; 3] = ["gu_index", "tree_age", "diameter"];
const BRANCHES_HEADER: [&str; 4] = ["gu_index", "pa", "wood_mass", "leaf_mass"];

fn parse_branches(cell: &str) -> Option<Vec<(u8, u32)>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Some(Vec::new());
    }
    cell.split(';')
        .map(|item| {
            let (pa, n) = item.trim().strip_prefix("PA")?.split_once('x')?;
            Some((pa.parse().ok()?, n.parse().ok()?))
        })
        .collect()
}

fn format_branches(b: &[(u8, u32)]) -> String {
    b.iter()
        .map(|(pa, n)| format!("PA{pa}x{n}"))
        .collect::<Vec<_>>()
        .join(";")
}

struct Section<'a> {
    header_line: usize,
    rows: Vec<(usize, &'a str)>,
}

/// Parses target-file text. Every violation is reported with its line and,
/// for cell errors, its column.
pub fn parse_target(text: &str, origin: &str) -> Result<TargetDataset> {
    let mut errors = Errors {
        origin: origin.to_string(),
        ..Default::default()
    };
    let mut sections: BTreeMap<&str, Section> = BTreeMap::new();
    let mut current: Option<&str> = None;
    let mut expect_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        if content.starts_with('[') {
            let name = content.trim_start_matches('[').trim_end_matches(']').trim();
            match name {
                "script" | "trunk" | "rings" | "branches" if content.ends_with(']') => {
                    if sections.contains_key(name) {
                        errors.at(line, format!("duplicate section [{name}]"));
                    }
                    sections.insert(
                        name,
                        Section {
                            header_line: line,
                            rows: Vec::new(),
                        },
                    );
                    current = Some(name);
                    expect_header = true;
                }
                _ => {
                    errors.at(line, format!("malformed section header `{content}`"));
                    current = None;
                }
            }
            continue;
        }
        let Some(name) = current else {
            errors.at(line, "data outside any section");
            continue;
        };
        let section = sections.get_mut(name).expect("section was registered");
        if expect_header {
            section.header_line = line;
            expect_header = false;
        }
        section.rows.push((line, raw));
    }

    let mut d = TargetDataset::default();
    let mut lines: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    match sections.get("script") {
        None => errors.at(1, "missing [script] section"),
        Some(sec) => {
            let rows = read_section(sec, &SCRIPT_HEADER, &mut errors);
            for (line, cells) in rows {
                let gu = cell::<u32>(&cells, 0, line, &mut errors);
                let m = cell::<u32>(&cells, 1, line, &mut errors);
                let b = parse_branches(&cells[2]);
                if b.is_none() {
                    errors.at(line, format!("column 3: cannot parse branches `{}`", cells[2]));
                }
                if let (Some(gu_index), Some(metamer_count), Some(branches)) = (gu, m, b) {
                    d.trunk_script.push(ScriptEntry {
                        gu_index,
                        metamer_count,
                        branches,
                    });
                    lines.entry("script").or_default().push(line);
                }
            }
        }
    }
    d.tree_age = d.trunk_script.len() as u32;
    if let Some(sec) = sections.get("trunk") {
        for (line, cells) in read_section(sec, &TRUNK_HEADER, &mut errors) {
            let gu = cell(&cells, 0, line, &mut errors);
            let mass = cell(&cells, 1, line, &mut errors);
            let diameter = cell(&cells, 2, line, &mut errors);
            let length = cell(&cells, 3, line, &mut errors);
            if let (Some(gu_index), Some(mass), Some(diameter), Some(length)) =
                (gu, mass, diameter, length)
            {
                d.trunk_profile.push(TrunkObservation {
                    gu_index,
                    mass,
                    diameter,
                    length,
                });
                lines.entry("trunk").or_default().push(line);
            }
        }
    }
    if let Some(sec) = sections.get("rings") {
        for (line, cells) in read_section(sec, &RINGS_HEADER, &mut errors) {
            let gu = cell(&cells, 0, line, &mut errors);
            let age = cell(&cells, 1, line, &mut errors);
            let diameter = cell(&cells, 2, line, &mut errors);
            if let (Some(gu_index), Some(tree_age), Some(diameter)) = (gu, age, diameter) {
                d.ring_matrix.push(RingObservation {
                    gu_index,
                    tree_age,
                    diameter,
                });
                lines.entry("rings").or_default().push(line);
            }
        }
    }
    if let Some(sec) = sections.get("branches") {
        for (line, cells) in read_section(sec, &BRANCHES_HEADER, &mut errors) {
            let gu = cell(&cells, 0, line, &mut errors);
            let pa = cell(&cells, 1, line, &mut errors);
            let wood = cell(&cells, 2, line, &mut errors);
            let leaf = cell(&cells, 3, line, &mut errors);
            if let (Some(gu_index), Some(pa), Some(wood_mass), Some(leaf_mass)) =
                (gu, pa, wood, leaf)
            {
                d.branch_compartments.push(BranchObservation {
                    gu_index,
                    pa,
                    wood_mass,
                    leaf_mass,
                });
                lines.entry("branches").or_default().push(line);
            }
        }
    }
    if !errors.list.is_empty() {
        return errors.finish(d);
    }

    let pa_max = d
        .trunk_script
        .iter()
        .flat_map(|e| e.branches.iter().map(|&(pa, _)| pa))
        .chain(d.branch_compartments.iter().map(|b| b.pa))
        .max()
        .unwrap_or(2)
        .max(GrowthParameters::reference().pa_max);
    for v in validate_dataset(&d, pa_max).violations {
        let line = v
            .field
            .split_once('[')
            .and_then(|(sec, rest)| {
                let row: usize = rest.trim_end_matches(']').parse().ok()?;
                lines.get(sec)?.get(row.checked_sub(1)?).copied()
            })
            .or_else(|| sections.get(v.field.as_str()).map(|s| s.header_line))
            .unwrap_or(1);
        errors.at(line, format!("{}: {}", v.field, v.message));
    }
    errors.finish(d)
}

fn read_section(sec: &Section, header: &[&str], errors: &mut Errors) -> Vec<(usize, Vec<String>)> {
    let mut rows = Vec::new();
    let mut it = sec.rows.iter();
    let Some(&(hline, htext)) = it.next() else {
        errors.at(sec.header_line, format!("missing header `{}`", header.join(",")));
        return rows;
    };
    let split = |text: &str| -> Option<Vec<String>> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let rec = r.records().next()?.ok()?;
        Some(rec.iter().map(str::to_string).collect())
    };
    match split(htext) {
        Some(h) if h.iter().map(String::as_str).eq(header.iter().copied()) => {}
        _ => {
            errors.at(hline, format!("expected header `{}`", header.join(",")));
            return rows;
        }
    }
    for &(line, text) in it {
        match split(text) {
            Some(cells) if cells.len() == header.len() => rows.push((line, cells)),
            Some(cells) => errors.at(
                line,
                format!("expected {} columns, found {}", header.len(), cells.len()),
            ),
            None => errors.at(line, "unreadable row"),
        }
    }
    rows
}

fn cell<T: FromStr>(cells: &[String], col: usize, line: usize, errors: &mut Errors) -> Option<T> {
    let v = cells[col].parse().ok();
    if v.is_none() {
        errors.at(
            line,
            format!("column {}: not a number: `{}`", col + 1, cells[col]),
        );
    }
    v
}

/// Renders a target file; parsing the result gives back `d`.
pub fn format_target(d: &TargetDataset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[script]\n{}", SCRIPT_HEADER.join(","));
    for e in &d.trunk_script {
        let _ = writeln!(
            s,
            "{},{},{}",
            e.gu_index,
            e.metamer_count,
            format_branches(&e.branches)
        );
    }
    let _ = writeln!(s, "\n[trunk]\n{}", TRUNK_HEADER.join(","));
    for t in &d.trunk_profile {
        let _ = writeln!(s, "{},{},{},{}", t.gu_index, t.mass, t.diameter, t.length);
    }
    let _ = writeln!(s, "\n[rings]\n{}", RINGS_HEADER.join(","));
    for r in &d.ring_matrix {
        let _ = writeln!(s, "{},{},{}", r.gu_index, r.tree_age, r.diameter);
    }
    let _ = writeln!(s, "\n[branches]\n{}", BRANCHES_HEADER.join(","));
    for b in &d.branch_compartments {
        let _ = writeln!(s, "{},{},{},{}", b.gu_index, b.pa, b.wood_mass, b.leaf_mass);
    }
    s
}

pub fn read_target_file(path: &Path) -> Result<TargetDataset> {
    parse_target(&read_text(path)?, &path.display().to_string())
}

pub fn write_target_file(path: &Path, d: &TargetDataset) -> Result<()> {
    write_text(path, &format_target(d))
}

/// One row of `cycles.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub cycle: u32,
    pub s_blade: f64,
    pub ratio_used: f64,
    pub q: f64,
    pub d: f64,
    pub d_s: f64,
    pub d_r: f64,
    pub q_s: f64,
    pub q_r: f64,
    pub ratio: f64,
    pub ring_total: f64,
    pub effective_lambda: f64,
    pub degenerate_foliage: bool,
    pub axis_slack: i64,
    /// Funded shoots per PA, `;`-separated.
    pub bud_counts: String,
}

pub fn cycle_rows(out: &SimulationOutput) -> Vec<CycleRow> {
    out.cycles
        .iter()
        .map(|c| CycleRow {
            cycle: c.cycle,
            s_blade: c.s_blade,
            ratio_used: c.ratio_used,
            q: c.allocation.q,
            d: c.allocation.d,
            d_s: c.allocation.d_s,
            d_r: c.allocation.d_r,
            q_s: c.allocation.q_s,
            q_r: c.allocation.q_r,
            ratio: c.allocation.ratio,
            ring_total: c.ring_total,
            effective_lambda: c.effective_lambda,
            degenerate_foliage: c.degenerate_foliage,
            axis_slack: c.axis_slack,
            bud_counts: c
                .bud_counts
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| io_err(path, e)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes `cycles.csv`, `trunk.csv`, `rings.csv`, `branches.csv` and
/// `topology.json` into `dir`.
pub fn write_simulation(dir: &Path, out: &SimulationOutput) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let paths: Vec<PathBuf> = ["cycles.csv", "trunk.csv", "rings.csv", "branches.csv", "topology.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_csv(&paths[0], &cycle_rows(out))?;
    write_csv::<TrunkUnitRecord>(&paths[1], &out.trunk)?;
    write_csv::<RingRecord>(&paths[2], &out.rings)?;
    write_csv::<BranchRecord>(&paths[3], &out.branches)?;
    write_json(&paths[4], &out.topology)?;
    Ok(paths)
}

pub fn fit_result_json(r: &FitResult) -> Result<String> {
    serde_json::to_string_pretty(r)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| ModelError::Io(e.to_string()))
}

pub fn parse_fit_result(text: &str) -> Result<FitResult> {
    serde_json::from_str(text).map_err(|e| ModelError::Parse(vec![e.to_string()]))
}

/// Writes `fit_result.json` and `predicted.csv` into `dir`.
pub fn write_fit(dir: &Path, r: &FitResult) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let json = dir.join("fit_result.json");
    write_text(&json, &fit_result_json(r)?)?;
    let csv = dir.join("predicted.csv");
    write_csv(&csv, &r.predicted)?;
    Ok(vec![json, csv])
}
