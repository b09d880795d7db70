#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maxl::data::{parse_idx_images, parse_idx_labels};

fuzz_target!(|data: &[u8]| {
    let path = Path::new("fuzz.idx");
    if let Ok((n, rows, cols, pixels)) = parse_idx_images(data, path) {
        assert_eq!(pixels.len(), n * rows * cols);
        assert_eq!(data.len(), 16 + pixels.len());
    }
    if let Ok(labels) = parse_idx_labels(data, path) {
        assert_eq!(data.len(), 8 + labels.len());
    }
});
