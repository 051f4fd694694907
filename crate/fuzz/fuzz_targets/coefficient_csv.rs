#![no_main]
use eqfree::io::read_coefficients;
use eqfree::observables::Orientation;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_coefficients(data, Orientation::MARGINAL_X);
});
