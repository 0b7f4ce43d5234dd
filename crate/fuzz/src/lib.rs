//! Target bodies, shared by the libFuzzer binaries and the mutation smoke test.

use ghostbench::bridge::{decode_checkpoint, encode_checkpoint};
use ghostbench::compose::PromptSet;
use ghostbench::eval::votes::parse_vote_line;
use ghostbench::gateway::remote::{parse_request, parse_response, ArrayPayload};
use ghostbench::image::Image;
use ghostbench::ingest::parse_coco;
use ghostbench::run::config::{BackendSpec, RunConfig};
use ghostbench::run::manifest::{parse_line, RunManifest};

pub const TARGETS: [(&str, fn(&[u8])); 8] = [
    ("png_decode", png_decode),
    ("checkpoint_decode", checkpoint_decode),
    ("manifest", manifest),
    ("run_config", run_config),
    ("remote_wire", remote_wire),
    ("coco", coco),
    ("prompt_templates", prompt_templates),
    ("vote_line", vote_line),
];

pub fn png_decode(data: &[u8]) {
    if let Ok(img) = Image::decode_png(data) {
        assert_eq!(img.rgb.len(), (img.width * img.height * 3) as usize);
        let png = img.encode_png().unwrap();
        assert_eq!(Image::decode_png(&png).unwrap().rgb, img.rgb);
    }
}

pub fn checkpoint_decode(data: &[u8]) {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let again = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
    }
}

pub fn manifest(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for line in text.lines() {
        let _ = parse_line(line);
    }
    let _ = RunManifest::parse(text);
}

pub fn run_config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = RunConfig::parse(text);
    let _ = BackendSpec::parse(text);
}

pub fn remote_wire(data: &[u8]) {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let _ = parse_request(line);
    if let Ok(resp) = parse_response(line) {
        assert!(resp.result.is_some() != resp.error.is_some());
    }
    if let Ok(arr) = serde_json::from_str::<ArrayPayload>(line) {
        if let Ok(values) = arr.decode() {
            assert_eq!(values.len(), arr.shape.iter().product::<usize>());
        }
    }
}

/// Instances and captions documents separated by a NUL byte.
pub fn coco(data: &[u8]) {
    match data.iter().position(|&b| b == 0) {
        Some(i) => {
            let _ = parse_coco(&data[..i], Some(&data[i + 1..]));
        }
        None => {
            let _ = parse_coco(data, None);
        }
    }
}

pub fn prompt_templates(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = PromptSet::parse(text) {
        for i in 0..set.len() {
            assert!(!set.render(i, "zebra").contains("{obj}"));
        }
    }
}

pub fn vote_line(data: &[u8]) {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = parse_vote_line(line) {
        let again = parse_vote_line(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(again, rec);
    }
}
