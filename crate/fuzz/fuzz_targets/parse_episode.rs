#![no_main]

use libfuzzer_sys::fuzz_target;
use raimkit::ingest::{parse_episode, window_episode, Schema, Timeline};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(ep) = parse_episode(text) else { return };
    // A parsed episode must survive a text round trip and windowing.
    let again = parse_episode(&ep.to_text()).expect("round trip");
    assert_eq!(again.id, ep.id);
    let _ = window_episode(&ep, &Schema::fast(), &Timeline::fast());
});
