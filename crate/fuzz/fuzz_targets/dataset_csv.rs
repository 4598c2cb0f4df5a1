#![no_main]

use dca_core::synthdata::{Dataset, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = Dataset::read_csv(data, Split::Train, None) else { return };
    let mut out = Vec::new();
    ds.write_csv(&mut out, None).unwrap();
    let again = Dataset::read_csv(out.as_slice(), Split::Train, Some(ds.num_classes)).unwrap();
    assert_eq!(again, ds);
});
