#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maxl::data::{parse_cifar, CifarVariant, CIFAR_IMAGE_BYTES};

fuzz_target!(|data: &[u8]| {
    for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
        if let Ok((fine, coarse, pixels)) = parse_cifar(data, variant, Path::new("fuzz.bin")) {
            assert_eq!(fine.len() * variant.record_len(), data.len());
            assert_eq!(pixels.len(), fine.len() * CIFAR_IMAGE_BYTES);
            assert!(fine.iter().all(|&l| (l as usize) < variant.num_classes()));
            if variant == CifarVariant::Cifar100 {
                assert_eq!(coarse.len(), fine.len());
            }
        }
    }
});
