#![no_main]

use firmcascade::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_json_str(text) else { return };
    let again = ExperimentConfig::from_json_str(&cfg.to_json_string()).expect("reparse");
    assert_eq!(cfg.to_json_string(), again.to_json_string());
});
