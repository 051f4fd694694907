#![no_main]
use eqfree_cli::RunConfig;
use libfuzzer_sys::fuzz_target;

// Accepted configs must survive a render/parse round trip unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut cfg = RunConfig::default();
    if cfg.overlay_text(text).is_ok() {
        let mut back = RunConfig::default();
        back.overlay_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
});
