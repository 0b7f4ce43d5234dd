//! Content-addressed PNG store: `images/<sha256>.png`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::sha256_hex;

#[derive(Debug, Clone)]
pub struct ImageStore {
    dir: PathBuf,
}

pub fn is_valid_hash(hash: &str) -> bool {
    hash.len() == 64 && hash.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

impl ImageStore {
    /// Uses `root/images`, creating it if needed.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = root.join("images");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, hash: &str) -> Result<PathBuf> {
        if !is_valid_hash(hash) {
            return Err(Error::InvalidInput(format!("not an image hash: {hash:?}")));
        }
        Ok(self.dir.join(format!("{hash}.png")))
    }

    /// Stores the PNG encoding and returns its hash.
    pub fn put(&self, image: &Image) -> Result<String> {
        self.put_png(&image.encode_png()?)
    }

    pub fn put_png(&self, png: &[u8]) -> Result<String> {
        let hash = sha256_hex(png);
        let path = self.path(&hash)?;
        if !path.exists() {
            let tmp = self.dir.join(format!(".{hash}.{}.tmp", std::process::id()));
            std::fs::write(&tmp, png).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(hash)
    }

    pub fn get_png(&self, hash: &str) -> Result<Vec<u8>> {
        let path = self.path(hash)?;
        std::fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, hash: &str) -> Result<Image> {
        Image::decode_png(&self.get_png(hash)?)
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.path(hash).is_ok_and(|p| p.is_file())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let img = Image::synthetic(4, 8, 8).with_tags(["boat"]);
        let h = store.put(&img).unwrap();
        assert_eq!(store.put(&img).unwrap(), h);
        assert!(store.contains(&h));
        assert_eq!(store.get(&h).unwrap(), img);
        assert!(store.path("../../etc/passwd").is_err());
    }
}
