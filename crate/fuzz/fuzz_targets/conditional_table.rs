#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmc_core::oracle::{bayes_consistency_gap, ConditionalTable};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = ConditionalTable::parse(text) {
        // a table against itself is a valid pair of the same size
        let gap = bayes_consistency_gap(&t, &t).unwrap();
        assert!(gap.is_finite() && gap >= 0.0);
    }
});
