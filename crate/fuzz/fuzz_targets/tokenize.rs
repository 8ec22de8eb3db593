#![no_main]

use adaprompt::text::{dedup_key, tokenize};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    let toks = tokenize(s);
    for t in &toks {
        assert!(!t.is_empty());
        assert!(t.chars().all(char::is_alphanumeric));
    }
    // the dedup key is a fixed point
    let k = dedup_key(s);
    assert_eq!(dedup_key(&k), k);
});
