#![no_main]
use eqfree::io::read_probe;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_probe(data);
});
