#![no_main]

use dca_core::barrier::BarrierStats;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(stats) = BarrierStats::read_csv(data) else { return };
    let mut out = Vec::new();
    stats.write_csv(&mut out, None).unwrap();
    BarrierStats::read_csv(out.as_slice()).unwrap();
});
