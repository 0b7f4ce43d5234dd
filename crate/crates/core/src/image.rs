//! RGB images as exchanged with backends. PNG is the wire and storage
//! format; metadata tags ride along in a `tEXt` chunk so mock backends can
//! key behaviour off them.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed;

const TAGS_KEYWORD: &str = "ghostbench:tags";
/// Upper bound on decoded pixel count; rejects decompression bombs.
const MAX_PIXELS: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB8.
    pub rgb: Vec<u8>,
    pub tags: BTreeSet<String>,
}

impl Image {
    pub fn new(width: u32, height: u32, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() as u64 != width as u64 * height as u64 * 3 {
            return Err(Error::InvalidInput(format!(
                "rgb buffer of {} bytes does not match {width}x{height}",
                rgb.len()
            )));
        }
        Ok(Self {
            width,
            height,
            rgb,
            tags: BTreeSet::new(),
        })
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags.extend(tags.into_iter().map(Into::into));
        self
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width, self.height);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            if !self.tags.is_empty() {
                let tags: Vec<&String> = self.tags.iter().collect();
                encoder
                    .add_text_chunk(TAGS_KEYWORD.to_string(), serde_json::to_string(&tags)?)
                    .map_err(|e| Error::decode("png", e))?;
            }
            let mut writer = encoder.write_header().map_err(|e| Error::decode("png", e))?;
            writer
                .write_image_data(&self.rgb)
                .map_err(|e| Error::decode("png", e))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::decode("png", e))?;
        let (width, height) = {
            let info = reader.info();
            (info.width, info.height)
        };
        if width as u64 * height as u64 > MAX_PIXELS {
            return Err(Error::decode("png", format!("{width}x{height} exceeds pixel limit")));
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::decode("png", "output buffer size overflow"))?;
        let mut buf = vec![0u8; size];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::decode("png", e))?;
        buf.truncate(frame.buffer_size());
        let rgb = to_rgb8(&buf, frame.color_type)?;

        let mut tags = BTreeSet::new();
        for chunk in &reader.info().uncompressed_latin1_text {
            if chunk.keyword == TAGS_KEYWORD {
                let parsed: Vec<String> = serde_json::from_str(&chunk.text)
                    .map_err(|e| Error::decode("png tags", e))?;
                tags.extend(parsed);
            }
        }
        let mut image = Image::new(width, height, rgb)?;
        image.tags = tags;
        Ok(image)
    }

    /// Loads an image file. PNGs keep their tags; other formats go through
    /// the generic decoder.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"\x89PNG") {
            return Self::decode_png(&bytes);
        }
        let decoded = image::load_from_memory(&bytes)
            .map_err(|e| Error::decode("image", e))?
            .to_rgb8();
        let (w, h) = decoded.dimensions();
        Image::new(w, h, decoded.into_raw())
    }

    /// SHA-256 of the PNG encoding; the content address used by the image
    /// store.
    pub fn content_hash(&self) -> Result<String> {
        Ok(seed::sha256_hex(&self.encode_png()?))
    }

    /// Deterministic noise image, used by synthetic corpora and tests.
    pub fn synthetic(seed: u64, width: u32, height: u32) -> Self {
        use rand::RngCore;
        let mut rng = seed::rng(seed);
        let mut rgb = vec![0u8; (width * height * 3) as usize];
        rng.fill_bytes(&mut rgb);
        Image {
            width,
            height,
            rgb,
            tags: BTreeSet::new(),
        }
    }
}

fn to_rgb8(buf: &[u8], color: png::ColorType) -> Result<Vec<u8>> {
    let rgb = match color {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(Error::decode("png", "palette not expanded"));
        }
    };
    Ok(rgb)
}
