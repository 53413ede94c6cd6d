#![no_main]

use delora::detector::{read_epoch_logs, write_epoch_logs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(logs) = read_epoch_logs(data) else { return };
    let mut once = Vec::new();
    write_epoch_logs(&logs, &mut once).unwrap();
    let mut twice = Vec::new();
    write_epoch_logs(&read_epoch_logs(once.as_slice()).unwrap(), &mut twice).unwrap();
    assert_eq!(once, twice);
});
