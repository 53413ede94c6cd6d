#![no_main]

use delora::stage2::{read_relabeled, write_relabeled};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(set) = read_relabeled(data) else { return };
    let mut out = Vec::new();
    write_relabeled(&set, &mut out).unwrap();
    assert_eq!(read_relabeled(out.as_slice()).unwrap(), set);
});
