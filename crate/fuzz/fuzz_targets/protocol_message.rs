#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmc_bridge::protocol::{decode, encode};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(msg) = decode(line) {
        if let Ok(text) = encode(&msg) {
            assert_eq!(decode(&text).unwrap(), msg);
        }
    }
});
