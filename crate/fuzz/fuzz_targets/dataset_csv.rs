#![no_main]

use delora::data::{read_dataset_csv, HashingFeaturizer};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_dataset_csv(data, None, None) {
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let again = read_dataset_csv(out.as_slice(), None, Some(ds.class_names())).unwrap();
        assert_eq!(again.len(), ds.len());
        assert_eq!(again.observed_labels(), ds.observed_labels());
    }
    let _ = read_dataset_csv(data, Some(HashingFeaturizer::new(16).unwrap()), None);
});
