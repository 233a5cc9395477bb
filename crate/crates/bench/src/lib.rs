//! Shared fixtures for the criterion benches.

use oponerf_core::config::TrainConfig;
use oponerf_core::model::Model;
use oponerf_core::rig::{ArcRig, Rig};
use oponerf_core::scene::{generate_scene, Scene};
use oponerf_core::train::TrainData;

pub struct Fixture {
    pub scene: Scene,
    pub rig: Rig,
    pub model: Model,
    pub data: TrainData,
}

/// The default toy setup: five objects, 21 views at 48x48, default config.
pub fn fixture() -> Fixture {
    let config = TrainConfig::default();
    let rig = ArcRig::default().build().expect("default rig");
    let scene = generate_scene(5, 7).expect("default scene");
    let data = TrainData::from_scene(&scene, &rig, &config).expect("training data");
    let model = Model::init(&config).expect("model init");
    Fixture { scene, rig, model, data }
}
