#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = cotflow::io::parse_dataset(text) {
            assert_eq!(ds.samples.nrows(), ds.conditions.nrows());
            let _ = cotflow::io::dataset_to_string(&ds);
        }
    }
});
