#![no_main]

use delora::baselines::{read_baseline_selection, write_baseline_selection};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(sel) = read_baseline_selection(data) else { return };
    let mut once = Vec::new();
    write_baseline_selection(&sel, &mut once).unwrap();
    let mut twice = Vec::new();
    write_baseline_selection(&read_baseline_selection(once.as_slice()).unwrap(), &mut twice).unwrap();
    assert_eq!(once, twice);
});
