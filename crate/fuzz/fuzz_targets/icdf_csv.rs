#![no_main]
use eqfree::io::read_icdf;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(icdf) = read_icdf(data) {
        assert!(icdf.is_monotone());
        let _ = icdf.eval(0.5);
    }
});
