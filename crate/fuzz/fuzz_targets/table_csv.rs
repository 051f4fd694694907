#![no_main]
use eqfree::io::read_table;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, rows)) = read_table(data) {
        assert!(rows.iter().all(|r| r.len() == header.len()));
    }
});
