//! Byte-level fixtures shared with the external backend. They were written
//! with Python's `struct` module, not with this crate.

use std::path::PathBuf;

use sourceswap::bridge::{self, MessageType, TensorWire};
use sourceswap::ddim::ConditioningRef;
use sourceswap::LatentGrid;

fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn hello_matches_fixture() {
    let bytes = bridge::frame_message(MessageType::Hello as u8, &[]).unwrap();
    assert_eq!(bytes, fixture("hello.bin"));
}

#[test]
fn denoise_request_matches_fixture() {
    let z = LatentGrid::new(1, 2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let payload = bridge::encode_denoise_request(&z, 10, ConditioningRef(0)).unwrap();
    let framed = bridge::frame_message(MessageType::DenoiseReq as u8, &payload).unwrap();
    let golden = fixture("denoise_req_1x2x2_t10_c0.bin");
    assert_eq!(framed, golden);

    let (msg, used) = bridge::parse_message(&golden).unwrap();
    assert_eq!(used, golden.len());
    assert_eq!(msg.kind(), Some(MessageType::DenoiseReq));
    let (tensor, t, cond): (TensorWire, u32, ConditioningRef) = bridge::decode_denoise_request(&msg.payload).unwrap();
    assert_eq!((t, cond), (10, ConditioningRef(0)));
    assert_eq!(tensor.to_grid().unwrap(), z);
}

#[test]
fn stream_of_fixtures_parses_in_order() {
    let mut bytes = fixture("hello.bin");
    bytes.extend(fixture("denoise_req_1x2x2_t10_c0.bin"));
    let (msgs, err) = bridge::parse_stream(&bytes);
    assert!(err.is_none());
    let kinds: Vec<_> = msgs.iter().map(|m| m.kind()).collect();
    assert_eq!(kinds, [Some(MessageType::Hello), Some(MessageType::DenoiseReq)]);
}
