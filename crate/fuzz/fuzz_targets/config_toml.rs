#![no_main]

use dca_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let Ok(cfg) = ExperimentConfig::from_str_with(text, &[]) else { return };
    // Whatever validates must survive its own echo.
    let again = ExperimentConfig::from_str_with(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(again.hash(), cfg.hash());
});
