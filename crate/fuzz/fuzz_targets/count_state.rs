#![no_main]

use adaprompt::lm::CountMlm;
use adaprompt::MaskedLm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    if let Ok(m) = CountMlm::from_json(s) {
        let _ = m.predict_fillers("it was <mask> .", 5);
    }
});
