#![no_main]

use libfuzzer_sys::fuzz_target;
use vfagg::experts::ExpertsDocument;
use vfagg::io::parse_experts;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(pools) = parse_experts(text) {
        let json = serde_json::to_string(&ExpertsDocument::from_pools(&pools)).unwrap();
        assert_eq!(parse_experts(&json).unwrap(), pools);
    }
});
