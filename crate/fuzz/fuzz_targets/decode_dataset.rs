#![no_main]

use libfuzzer_sys::fuzz_target;
use raimkit::ingest::decode_dataset;

// Input layout: u32 LE length of the binary part, the binary part, then the
// JSON-lines index.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
    let rest = &data[4..];
    if n > rest.len() {
        return;
    }
    let (bin, index) = rest.split_at(n);
    let Ok(index) = std::str::from_utf8(index) else { return };
    let _ = decode_dataset(bin, index);
});
