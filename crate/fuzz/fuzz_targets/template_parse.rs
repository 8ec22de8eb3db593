#![no_main]

use adaprompt::PromptTemplate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    if let Ok(t) = PromptTemplate::parse("fuzz", s) {
        let masked = t.apply("some input", "<mask>");
        assert!(masked.is_ok() || s.contains("<mask>"));
        let _ = t.literal_tokens();
        let _ = PromptTemplate::parse("again", t.source()).expect("source reparses");
    }
});
