#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tilemerge::formats::read_json;
use tilemerge::pipeline::{Dataset, SimulatedBackend};
use tilemerge::synth::{generate_scenario, ground_truth_index, SimDetectorParams, SynthScenario};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn suite_spec(name: &str) -> (SynthScenario, SimDetectorParams) {
    let dir = fixtures();
    let scenario = read_json(&dir.join(format!("{name}.scenario.json"))).expect("scenario fixture");
    let params = read_json(&dir.join(format!("{name}.sim.json"))).expect("sim fixture");
    (scenario, params)
}

/// Synthetic dataset plus a simulated backend over its ground truth.
pub fn suite(name: &str) -> (Dataset, SimulatedBackend) {
    suite_with(name, |_| {})
}

pub fn suite_with(name: &str, tweak: impl FnOnce(&mut SimDetectorParams)) -> (Dataset, SimulatedBackend) {
    let (scenario, mut params) = suite_spec(name);
    tweak(&mut params);
    let data = generate_scenario(&scenario).expect("scenario");
    let backend = SimulatedBackend::new(ground_truth_index(&data.images), params);
    (Dataset::from_synth(name, data, fixtures()), backend)
}
