#![no_main]

use adaprompt::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    if let Ok(cfg) = RunConfig::from_toml_str(s) {
        let _ = cfg.effective_pipeline().validate();
        let _ = cfg.task.resolve();
    }
});
