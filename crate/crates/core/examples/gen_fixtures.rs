//! Regenerates the shipped instance fixtures from default parameters.

use opera_core::instances::{
    BellmanCompleteParams, KnrInstance, KnrParams, LinearMixtureInstance, LinearMixtureParams, TabularInstance,
    WitnessInstance, WitnessParams,
};

fn main() -> opera_core::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let write = |name: &str, text: String| std::fs::write(dir.join(name), text + "\n");
    write("linear_mixture.json", LinearMixtureInstance::generate(&LinearMixtureParams::default())?.to_json()?)?;
    write("witness.json", WitnessInstance::generate(&WitnessParams::default())?.to_json()?)?;
    write("tabular.json", TabularInstance::generate(&BellmanCompleteParams::default())?.to_json()?)?;
    write("knr.json", KnrInstance::generate(&KnrParams::default())?.to_json()?)?;
    Ok(())
}
