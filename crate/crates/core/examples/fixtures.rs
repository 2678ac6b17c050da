//! Regenerates the bundled fixtures: `cargo run --example fixtures`.

use greenlab::calibration::FitSpec;
use greenlab::io::{write_parameter_file, write_target_file, ParameterFile};
use greenlab::targets::{spread_ring_gus, synthetic_script, synthetic_target, ScriptProfile};
use greenlab::{GrowthParameters, ZoneRuleSet};
use std::path::Path;

fn main() -> greenlab::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir).map_err(|e| greenlab::ModelError::Io(e.to_string()))?;
    let p = GrowthParameters::reference();
    let z = ZoneRuleSet::reference();
    write_parameter_file(&dir.join("reference.params"), &ParameterFile::default())?;

    let mut spec = FitSpec::reference(&p, &z);
    for (i, f) in spec.continuous.iter_mut().enumerate() {
        let s = if i % 2 == 0 { 1.2 } else { 0.8 };
        f.init = (f.init * s).clamp(f.lo, f.hi);
    }
    spec.anneal.cooling = 0.8;
    spec.anneal.proposals_per_temperature = 10;
    spec.anneal.stop_ratio = 1e-2;
    spec.seed = 11;
    let small_fit = ParameterFile {
        fit: Some(spec),
        ..ParameterFile::default()
    };
    write_parameter_file(&dir.join("fit_small.params"), &small_fit)?;

    let early = ScriptProfile {
        base_metamers: 4.0,
        extra_metamers: 3.0,
        rise: 2.0,
        branches: [1.5, 1.0, 2.0],
        onset: [2, 2, 2],
    };
    let sets: [(&str, u32, ScriptProfile, usize, u32); 5] = [
        ("tree1_like.csv", 21, ScriptProfile::tree1_like(), 0, 8),
        ("tree2_like.csv", 46, ScriptProfile::tree2_like(), 1, 12),
        ("small_a.csv", 4, ScriptProfile::tree1_like(), 0, 4),
        ("small_b.csv", 5, early, 0, 5),
        ("small_c.csv", 6, ScriptProfile::tree2_like(), 1, 6),
    ];
    for (name, cycles, profile, tree, rings) in sets {
        let script = synthetic_script(cycles, &profile);
        let d = synthetic_target(&p, &z, &script, tree, &spread_ring_gus(cycles, rings))?;
        write_target_file(&dir.join(name), &d)?;
        println!("{name}: {cycles} cycles");
    }
    Ok(())
}
