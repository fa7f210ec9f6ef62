//! Replays the bundled step script on a virtual clock and prints every
//! tenth state as CSV.
//!
//! cargo run --example replay_demo

use std::fs::File;
use std::path::Path;

use gripper_twin::demo::{run_deterministic, write_states_csv, DemoScript, DemoSettings};
use gripper_twin::twin::TwinConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    let script = DemoScript::from_csv(File::open(assets.join("demo_steps.csv"))?)?;
    let resolved = TwinConfig::load(assets.join("twin.json"))?.resolve()?;

    let states = run_deterministic(&script, &resolved.pipeline, &resolved.flange, &DemoSettings::default())?;
    let sampled: Vec<_> = states.iter().step_by(10).cloned().collect();
    write_states_csv(std::io::stdout().lock(), &sampled)?;
    eprintln!("{} states, final tip {:?}", states.len(), states.last().map(|s| s.position()));
    Ok(())
}
