#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ckpt) = cotflow::io::parse_checkpoint(text, Path::new("fuzz")) {
            // anything accepted must survive a round trip
            let again = cotflow::io::checkpoint_to_string(&ckpt).unwrap();
            assert_eq!(
                cotflow::io::parse_checkpoint(&again, Path::new("fuzz")).unwrap(),
                ckpt
            );
        }
    }
});
