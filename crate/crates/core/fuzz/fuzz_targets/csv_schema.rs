#![no_main]

use firmcascade::data::CsvSchema;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = CsvSchema::from_json_str(text);
});
