#![no_main]

use delora::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(ck) = Checkpoint::from_json(text) else { return };
    let once = ck.to_json().unwrap();
    assert_eq!(Checkpoint::from_json(&once).unwrap().to_json().unwrap(), once);
});
