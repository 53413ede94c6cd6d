#![no_main]

use delora::relabel::{extract_reply_text, parse_label_reply};
use libfuzzer_sys::fuzz_target;

// First line: options separated by '|'. The rest: the raw reply body.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (head, body) = text.split_once('\n').unwrap_or(("negative|positive", text));
    let options: Vec<String> = head.split('|').map(str::to_string).collect();
    let reply = extract_reply_text(body);
    if let Some(i) = parse_label_reply(&reply, &options) {
        assert!(i < options.len());
    }
});
