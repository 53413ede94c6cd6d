#![no_main]

use delora::harness::RunReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = RunReport::from_json(text) {
        let _ = r.failed_seeds();
        let _ = r.mean("test_accuracy");
    }
});
