//! 8-bit PNG/PGM/PPM reading and writing, and dataset directories.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::map::Map2;
use crate::tensor::Tensor;

/// Planar colour image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub channels: Vec<Map2>,
}

impl ColorImage {
    pub fn new(channels: Vec<Map2>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::invalid("color_image", "no channels"));
        };
        for c in &channels[1..] {
            first.check_same("color_image", c)?;
        }
        Ok(ColorImage { channels })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn map_channels(&self, f: impl Fn(&Map2) -> Map2) -> ColorImage {
        ColorImage { channels: self.channels.iter().map(f).collect() }
    }

    /// Appends `[C,H,W]` planes to a batch buffer.
    pub fn extend_batch(&self, out: &mut Vec<f64>) {
        for c in &self.channels {
            out.extend_from_slice(c.data());
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(self.channels.len() * h * w);
        self.extend_batch(&mut data);
        Tensor::new(vec![1, self.channels.len(), h, w], data).expect("planes share dims")
    }
}

/// Image/label pair. Labels are strictly 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: ColorImage,
    pub label: Map2,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: ColorImage, label: Map2) -> Result<Self> {
        image.channels[0].check_same("sample_pair", &label)?;
        if !label.is_binary() {
            return Err(Error::Data("label must be binary".into()));
        }
        Ok(SamplePair { id: id.into(), image, label })
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_gray(path: &Path) -> Result<Map2> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Map2::new(h as usize, w as usize, img.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
}

/// Loads a label; 8-bit values of 128 and above are foreground.
pub fn load_label(path: &Path) -> Result<Map2> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Map2::new(h as usize, w as usize, img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect())
}

/// Loads an image as three planes (greyscale inputs are replicated).
pub fn load_color(path: &Path) -> Result<ColorImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let channels = (0..3)
        .map(|c| Map2::new(h, w, (0..h * w).map(|i| raw[3 * i + c] as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    ColorImage::new(channels)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    // keep the real extension so the encoder is chosen correctly
    let tmp = dir.join(format!(".tmp{}-{name}", std::process::id()));
    save(&tmp).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a `[0, 1]` map as 8-bit greyscale; the format follows the extension.
pub fn save_gray(path: &Path, m: &Map2) -> Result<()> {
    let (h, w) = m.dims();
    let img = GrayImage::from_raw(w as u32, h as u32, m.data().iter().map(|&v| to_u8(v)).collect())
        .expect("buffer sized to dims");
    encode(path, |p| img.save(p))
}

pub fn save_color(path: &Path, im: &ColorImage) -> Result<()> {
    let (h, w) = im.dims();
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            let ch = &im.channels[c.min(im.channels.len() - 1)];
            buf.push(to_u8(ch.data()[i]));
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to dims");
    encode(path, |p| img.save(p))
}

/// `images/<id>.png` and `labels/<id>.png` listed by `manifest.txt`, one
/// `image label` pair of relative paths per line.
pub const MANIFEST: &str = "manifest.txt";

pub fn write_dataset(dir: &Path, pairs: &[SamplePair]) -> Result<Vec<PathBuf>> {
    for sub in ["images", "labels"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::new();
    let mut written = Vec::new();
    for p in pairs {
        let img = format!("images/{}.png", p.id);
        let lab = format!("labels/{}.png", p.id);
        save_color(&dir.join(&img), &p.image)?;
        save_gray(&dir.join(&lab), &p.label)?;
        manifest.push_str(&format!("{img} {lab}\n"));
        written.push(dir.join(img));
        written.push(dir.join(lab));
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())?;
    written.push(dir.join(MANIFEST));
    Ok(written)
}

/// Pairs listed in a dataset directory, in manifest order. Without a
/// manifest, files under `images/` and `labels/` are matched by stem.
pub fn dataset_entries(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mpath = dir.join(MANIFEST);
    if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Data(format!("{}:{}: expected `image label`", mpath.display(), n + 1)));
            }
            let img = dir.join(parts[0]);
            let id = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((id, img, dir.join(parts[1])));
        }
        return Ok(out);
    }
    let list = |sub: &str| -> Result<Vec<PathBuf>> {
        let d = dir.join(sub);
        let mut v: Vec<PathBuf> = std::fs::read_dir(&d)
            .map_err(|e| Error::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        Ok(v)
    };
    let labels = list("labels")?;
    let mut out = Vec::new();
    for img in list("images")? {
        let stem = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let lab = labels
            .iter()
            .find(|l| l.file_stem().is_some_and(|s| s.to_string_lossy() == stem))
            .ok_or_else(|| Error::Data(format!("no label for image {}", img.display())))?;
        out.push((stem, img, lab.clone()));
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    dataset_entries(dir)?
        .into_iter()
        .map(|(id, img, lab)| SamplePair::new(id, load_color(&img)?, load_label(&lab)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let m = Map2::from_fn(5, 7, |i, j| ((i * 7 + j) * 7) as f64 / 255.0);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            save_gray(&p, &m).unwrap();
            let back = load_gray(&p).unwrap();
            for (a, b) in back.data().iter().zip(m.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_threshold_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let img = GrayImage::from_raw(3, 1, vec![127, 128, 255]).unwrap();
        img.save(&p).unwrap();
        assert_eq!(load_label(&p).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img =
            ColorImage::new(vec![Map2::filled(4, 4, 0.2), Map2::filled(4, 4, 0.4), Map2::filled(4, 4, 0.6)]).unwrap();
        let pair = SamplePair::new("s0", img, Map2::from_fn(4, 4, |i, _| (i == 1) as u8 as f64)).unwrap();
        write_dataset(dir.path(), &[pair.clone()]).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].label, pair.label);
        assert_eq!(back[0].id, "s0");
    }
}
