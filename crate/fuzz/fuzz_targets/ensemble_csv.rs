#![no_main]
use eqfree::io::{read_ensemble, write_ensemble};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ens) = read_ensemble(data) {
        let mut buf = Vec::new();
        write_ensemble(&mut buf, &ens).unwrap();
        assert_eq!(read_ensemble(&buf[..]).unwrap(), ens);
    }
});
