#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = airdet::Config::from_toml_str(text) {
        let again = airdet::Config::from_toml_str(&cfg.to_toml_string()).expect("canonical dump parses");
        assert_eq!(again, cfg);
    }
});
