#![no_main]

use giga::channel_file::{parse_channel, write_channel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(h) = parse_channel(text) {
        // canonical output must parse back to the same matrix
        let again = parse_channel(&write_channel(&h)).expect("canonical form parses");
        assert_eq!(h, again);
    }
});
