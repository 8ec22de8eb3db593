#![no_main]

use adaprompt::Lexicon;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    let _ = Lexicon::parse(s);
});
