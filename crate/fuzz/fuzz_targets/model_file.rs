#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmc_core::TabularMlm;

fuzz_target!(|data: &[u8]| {
    // keep allocations small; the header alone can claim a large table
    if let Ok(m) = TabularMlm::from_bytes_with_cap(data, 1 << 16) {
        let again = TabularMlm::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(again.to_bytes(), m.to_bytes());
    }
});
