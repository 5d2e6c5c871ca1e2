#![no_main]

use firmcascade::training::TrainedModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = TrainedModel::from_json_str(text) else { return };
    // a model that loads must run on any row wide enough for its stages
    let width =
        model.arch.coords().flat_map(|c| model.arch.spec(c).feature_mask.iter().copied()).max().map_or(0, |m| m + 1);
    if width > 4096 {
        return;
    }
    let _ = firmcascade::inference::predict_hard(&model, &vec![0.25; width]);
});
