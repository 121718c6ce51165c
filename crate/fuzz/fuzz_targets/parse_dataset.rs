#![no_main]

use libfuzzer_sys::fuzz_target;
use vfagg::io::{parse_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cohort) = parse_dataset(text, None) {
        let mut out = Vec::new();
        write_dataset(&mut out, &cohort).unwrap();
        let again = parse_dataset(std::str::from_utf8(&out).unwrap(), None).unwrap();
        assert_eq!(cohort, again);
    }
});
