//! Every checked-in fuzz seed must still parse, so the corpus keeps
//! exercising the accept paths as formats change.

use std::path::PathBuf;

use firmcascade::data::{load_csv_from_reader, ColumnRef, CsvSchema};
use firmcascade::experiment::{ExperimentConfig, ExperimentReport};
use firmcascade::training::TrainedModel;
use firmcascade::CascadeArchitecture;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn architecture_seeds_parse() {
    for (name, b) in seeds("architecture") {
        CascadeArchitecture::from_json_str(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn schema_seeds_parse() {
    for (name, b) in seeds("csv_schema") {
        CsvSchema::from_json_str(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn csv_seeds_load() {
    for (name, b) in seeds("csv_loader") {
        let (schema, csv) = match b.iter().position(|&c| c == 0) {
            Some(i) => (CsvSchema::from_json_str(text(&b[..i])).unwrap(), &b[i + 1..]),
            None => (CsvSchema::binary(ColumnRef::Name("label".into())), &b[..]),
        };
        let ds = load_csv_from_reader(csv, &schema).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!ds.is_empty(), "{name}");
    }
}

#[test]
fn model_seeds_parse() {
    for (name, b) in seeds("model") {
        TrainedModel::from_json_str(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn experiment_config_seeds_parse() {
    for (name, b) in seeds("experiment_config") {
        ExperimentConfig::from_json_str(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn report_seeds_parse() {
    for (name, b) in seeds("report") {
        ExperimentReport::from_json_str(text(&b)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
