#![no_main]

use adaprompt::CorpusIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(idx) = CorpusIndex::decode(data) {
        let again = CorpusIndex::decode(&idx.encode()).expect("re-encoded index decodes");
        let _ = again.retrieve("the movie was good", 5);
    }
});
