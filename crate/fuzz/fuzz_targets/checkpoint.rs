#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = airdet::checkpoint::decode(data);
    if let Ok((meta, params)) = airdet::checkpoint::parse_body(data) {
        let bytes = airdet::checkpoint::encode(&meta, &params).expect("re-encode");
        let (m2, p2) = airdet::checkpoint::decode(&bytes).expect("round trip");
        assert_eq!(m2, meta);
        assert_eq!(p2.content_hash(), params.content_hash());
    }
});
