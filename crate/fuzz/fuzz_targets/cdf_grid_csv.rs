#![no_main]
use eqfree::io::read_cdf_grid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = read_cdf_grid(data) {
        assert!(g.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(g.values.len(), g.grid_x.len() * g.grid_y.len());
    }
});
