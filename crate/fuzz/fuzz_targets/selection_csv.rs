#![no_main]

use delora::detector::{read_selection, write_selection};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(sel) = read_selection(data) else { return };
    assert_eq!(sel.clean_indices.len() + sel.noisy_indices.len(), sel.len());
    let mut once = Vec::new();
    write_selection(&sel, &mut once).unwrap();
    let mut twice = Vec::new();
    write_selection(&read_selection(once.as_slice()).unwrap(), &mut twice).unwrap();
    assert_eq!(once, twice);
});
