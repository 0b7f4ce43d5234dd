#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| ghostbench_fuzz::checkpoint_decode(data));
