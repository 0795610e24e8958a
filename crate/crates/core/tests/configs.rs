use std::path::Path;

use recourse_core::data::DatasetConfig;
use recourse_core::synth;

#[test]
fn shipped_configs_match_generators() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, rows, seed) in [("german", 1000, 2024), ("adult", 6000, 0)] {
        let shipped = DatasetConfig::from_path(&dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(shipped, synth::by_name(name, rows, seed).unwrap().config, "{name}");
    }
}
