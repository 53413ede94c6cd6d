#![no_main]

use delora::noise::{read_records, reconstruct_original, write_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(records) = read_records(data) else { return };
    let _ = reconstruct_original(&records);
    let mut out = Vec::new();
    write_records(&records, &mut out).unwrap();
    assert_eq!(read_records(out.as_slice()).unwrap(), records);
});
