#![no_main]

use airdet_cli::service::body::{DetectRequest, NewClass, NewSupport};
use airdet_cli::session::Snapshot;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<NewClass>(data);
    let _ = serde_json::from_slice::<DetectRequest>(data);
    if let Ok(s) = serde_json::from_slice::<NewSupport>(data) {
        let _ = airdet::BBox::from(s.bbox).validate();
    }
    let _ = serde_json::from_slice::<Snapshot>(data);
});
