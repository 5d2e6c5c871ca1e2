#![no_main]

use firmcascade::CascadeArchitecture;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(arch) = CascadeArchitecture::from_json_str(text) else { return };
    // validation reports problems, it never panics
    let _ = arch.validate(64);
    let again = CascadeArchitecture::from_json_str(&arch.to_json_string()).expect("reparse");
    assert_eq!(arch.to_json_string(), again.to_json_string());
});
