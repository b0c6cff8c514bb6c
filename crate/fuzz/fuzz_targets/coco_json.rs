#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = airdet::data::parse_coco(data) {
        if let Ok(ds) = airdet::data::Dataset::from_coco(&file, "fuzz".into()) {
            let _ = ds.class_counts();
            let _ = ds.to_coco();
        }
    }
});
