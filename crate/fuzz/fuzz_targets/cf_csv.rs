#![no_main]

use dca_core::selfcorrect::{read_cf_csv, write_cf_csv};
use dca_core::synthdata::Codec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let codec = Codec::identity(2);
    let Ok(cf) = read_cf_csv(data, &codec) else { return };
    let mut out = Vec::new();
    write_cf_csv(&cf, 2, &mut out, None).unwrap();
    assert_eq!(read_cf_csv(out.as_slice(), &codec).unwrap().len(), cf.len());
});
