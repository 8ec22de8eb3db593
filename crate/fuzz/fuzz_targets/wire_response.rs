#![no_main]

use adaprompt::wire::{decode_nli, decode_predictions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    if let Ok(preds) = decode_predictions(s, 10) {
        assert!(preds.len() <= 10);
    }
    if let Ok(p) = decode_nli(s) {
        assert!(p.is_valid());
    }
});
