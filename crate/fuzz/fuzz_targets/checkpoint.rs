#![no_main]

use libfuzzer_sys::fuzz_target;
use maxl::nn::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // the encoding is canonical
        assert_eq!(ckpt.to_bytes(), data);
    }
});
