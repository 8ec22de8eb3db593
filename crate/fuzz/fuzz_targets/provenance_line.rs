#![no_main]

use adaprompt::query::parse_provenance_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    let _ = parse_provenance_line(s);
});
