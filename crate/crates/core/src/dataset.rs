//! Few-shot dataset directory layout:
//!
//! ```text
//! images/NNN.png    RGB subject photo
//! masks/NNN.png     foreground mask (white = subject)
//! poses/NNN.json    {"width": W, "height": H, "joints": {"pelvis": [u, v], ...}}
//! captions/NNN.txt  whitespace-separated tokens
//! ```
//!
//! Pose coordinates are normalized to [0, 1] (u right, v down) and must name
//! every joint of the standard skeleton.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::booth::FewShotExample;
use crate::error::{Error, Result};
use crate::geometry::skeleton::{bone_colors, BONES, JOINT_NAMES};
use crate::geometry::draw_pose_2d;
use crate::guidance::Vocabulary;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub width: usize,
    pub height: usize,
    pub joints: BTreeMap<String, [f64; 2]>,
}

impl PoseFile {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Format("pose file needs a positive width and height".into()));
        }
        for name in JOINT_NAMES {
            let p = self.joints.get(name).ok_or_else(|| Error::Format(format!("pose file lacks joint {name:?}")))?;
            if p.iter().any(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
                return Err(Error::Format(format!("joint {name:?} = {p:?} outside [0, 1]")));
            }
        }
        if let Some(extra) = self.joints.keys().find(|k| !JOINT_NAMES.contains(&k.as_str())) {
            return Err(Error::Format(format!("pose file names unknown joint {extra:?}")));
        }
        Ok(())
    }

    /// Joints in standard skeleton order.
    pub fn ordered(&self) -> Vec<Option<(f64, f64)>> {
        JOINT_NAMES.iter().map(|n| self.joints.get(*n).map(|p| (p[0], p[1]))).collect()
    }

    /// Skeleton raster at the given size.
    pub fn raster(&self, height: usize, width: usize) -> Image {
        draw_pose_2d(&self.ordered(), &BONES, &bone_colors(&JOINT_NAMES, &BONES), height, width)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("pose JSON: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// One example as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub image: Image,
    pub mask: Image,
    pub pose: PoseFile,
    pub caption: String,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const SUBDIRS: [&str; 4] = ["images", "masks", "poses", "captions"];

pub fn write_dataset(dir: &Path, examples: &[RawExample]) -> Result<()> {
    for sub in SUBDIRS {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, ex) in examples.iter().enumerate() {
        let stem = format!("{i:03}");
        ex.image.write_png(dir.join("images").join(format!("{stem}.png")))?;
        ex.mask.write_png(dir.join("masks").join(format!("{stem}.png")))?;
        write_text(&dir.join("poses").join(format!("{stem}.json")), &ex.pose.to_json()?)?;
        write_text(&dir.join("captions").join(format!("{stem}.txt")), &format!("{}\n", ex.caption))?;
    }
    Ok(())
}

fn stems(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let path: PathBuf = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Format(format!("no images in {}", images.display())));
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<RawExample>> {
    stems(dir)?
        .into_iter()
        .map(|s| {
            let image = Image::read_png(dir.join("images").join(format!("{s}.png")))?;
            let mask = Image::read_png(dir.join("masks").join(format!("{s}.png")))?;
            let pose = PoseFile::from_json(&read_text(&dir.join("poses").join(format!("{s}.json")))?)?;
            let caption = read_text(&dir.join("captions").join(format!("{s}.txt")))?.trim().to_string();
            if image.height != mask.height || image.width != mask.width {
                return Err(Error::Format(format!("example {s}: mask size differs from the image")));
            }
            if pose.width != image.width || pose.height != image.height {
                return Err(Error::Format(format!("example {s}: pose file size differs from the image")));
            }
            Ok(RawExample { image, mask, pose, caption })
        })
        .collect()
}

impl RawExample {
    /// Applies the mask over a constant background and tokenizes the caption.
    pub fn to_training(&self, vocab: &Vocabulary, background: [f64; 3]) -> Result<FewShotExample> {
        let (h, w) = (self.image.height, self.image.width);
        let mut img = Image::new(h, w, 3);
        for r in 0..h {
            for c in 0..w {
                let m = self.mask.pixel(r, c)[0];
                let src = self.image.pixel(r, c);
                for k in 0..3 {
                    img.pixel_mut(r, c)[k] = src[k] * m + background[k] * (1.0 - m);
                }
            }
        }
        FewShotExample::new(img, self.pose.raster(h, w), vocab.tokenize(&self.caption)?)
    }
}

pub fn load_training_set(dir: &Path, vocab: &Vocabulary) -> Result<Vec<FewShotExample>> {
    read_dataset(dir)?.iter().map(|e| e.to_training(vocab, [0.0; 3])).collect()
}
