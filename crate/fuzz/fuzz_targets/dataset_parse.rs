#![no_main]

use std::path::Path;

use adaprompt::eval::{parse_dataset, DatasetFormat, DatasetSchema};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&sel, rest)) = data.split_first() else { return };
    let Ok(s) = std::str::from_utf8(rest) else { return };
    let format = match sel % 3 {
        0 => DatasetFormat::Jsonl,
        1 => DatasetFormat::Csv,
        _ => DatasetFormat::Tsv,
    };
    let schema = DatasetSchema {
        format,
        ..DatasetSchema::default()
    };
    let labels = vec!["positive".to_string(), "negative".to_string()];
    if let Ok(rows) = parse_dataset(s, Path::new("fuzz"), &schema, &labels) {
        assert!(rows.iter().all(|r| labels.contains(&r.label)));
    }
});
