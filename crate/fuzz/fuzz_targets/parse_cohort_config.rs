#![no_main]

use libfuzzer_sys::fuzz_target;
use vfagg::io::parse_cohort_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = parse_cohort_config(text) {
        let json = serde_json::to_string(&config).unwrap();
        assert_eq!(parse_cohort_config(&json).unwrap(), config);
    }
});
