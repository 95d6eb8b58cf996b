#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmc::export::{read_jsonl, write_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok((meta, records)) = read_jsonl(data) {
        let mut out = Vec::new();
        write_jsonl(&mut out, &meta, &records).unwrap();
        let (meta2, records2) = read_jsonl(out.as_slice()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(records2.len(), records.len());
    }
});
