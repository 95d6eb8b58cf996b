#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmc::export::{read_csv, write_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok((meta, records)) = read_csv(data) {
        let mut out = Vec::new();
        write_csv(&mut out, &meta, &records).unwrap();
        let (meta2, records2) = read_csv(out.as_slice()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(records2.len(), records.len());
    }
});
