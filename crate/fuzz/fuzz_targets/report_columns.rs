#![no_main]

use dca_cli::svg::read_columns;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cols) = read_columns(data, &["pair_src", "t_min"]) {
        assert_eq!(cols.len(), 2);
    }
});
