#![no_main]

use firmcascade::data::{load_csv_from_reader, CsvSchema};
use libfuzzer_sys::fuzz_target;

// Input is `<schema json>\0<csv bytes>`; without a NUL the whole input is
// CSV read with a `label` column.
fuzz_target!(|data: &[u8]| {
    let (schema, csv) = match data.iter().position(|&b| b == 0) {
        Some(i) => {
            let Ok(text) = std::str::from_utf8(&data[..i]) else { return };
            let Ok(schema) = CsvSchema::from_json_str(text) else { return };
            (schema, &data[i + 1..])
        }
        None => (CsvSchema::binary(firmcascade::data::ColumnRef::Name("label".into())), data),
    };
    if let Ok(ds) = load_csv_from_reader(csv, &schema) {
        assert_eq!(ds.labels().len(), ds.len());
        for r in 0..ds.len() {
            assert_eq!(ds.row(r).len(), ds.n_features());
            assert!(ds.row(r).iter().all(|v| v.is_finite()));
        }
    }
});
