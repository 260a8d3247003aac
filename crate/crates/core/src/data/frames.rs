use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patching::{Clip, ClipSpec, Image};

fn is_frame(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Digits in the file stem, for numeric ordering (`frame_10` after `frame_9`).
fn frame_number(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Reads a PNG or PPM as RGB values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data)
}

/// Writes an image as 8-bit PNG or binary PPM, chosen by extension.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let rgb: Vec<u8> = match img.channels {
        3 => img.data.iter().map(|&v| to_u8(v)).collect(),
        1 => img.data.iter().flat_map(|&v| [to_u8(v); 3]).collect(),
        c => return Err(Error::Data(format!("cannot write a {c}-channel image"))),
    };
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, rgb)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    buf.save_with_format(path, format)?;
    Ok(())
}

/// A clip loaded from disk with its directory name.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedClip {
    pub name: String,
    pub clip: Clip,
}

/// Loads every subdirectory of `root` as one clip: `raw_frames` consecutive
/// frames from a seeded random start, keeping every `stride`-th.
pub fn load_frames_dir(root: &Path, spec: &ClipSpec, seed: u64) -> Result<Vec<NamedClip>> {
    spec.validate(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::new();
    for dir in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string();
        let mut frames: Vec<(u64, PathBuf)> = list_dir(&dir)?
            .into_iter()
            .filter(|p| is_frame(p))
            .map(|p| {
                frame_number(&p)
                    .map(|n| (n, p.clone()))
                    .ok_or_else(|| Error::Data(format!("clip {name}: frame {} has no number", p.display())))
            })
            .collect::<Result<_>>()?;
        frames.sort();
        if frames.len() < spec.raw_frames {
            return Err(Error::Data(format!(
                "clip {name} has {} frames, needs {}",
                frames.len(),
                spec.raw_frames
            )));
        }
        let start = rng.gen_range(0..=frames.len() - spec.raw_frames);
        let picked = (0..spec.frames())
            .map(|t| {
                let img = read_image(&frames[start + t * spec.stride].1)?;
                if (img.height, img.width) != (spec.height, spec.width) || spec.channels != 3 {
                    return Err(Error::Data(format!(
                        "clip {name}: frame is {}x{}, expected {}x{}x{}",
                        img.height, img.width, spec.height, spec.width, spec.channels
                    )));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        clips.push(NamedClip {
            name,
            clip: Clip::from_frames(&picked)?,
        });
    }
    if clips.is_empty() {
        return Err(Error::Data(format!("no clip directories under {}", root.display())));
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_clip(dir: &Path, frames: usize) {
        std::fs::create_dir_all(dir).unwrap();
        for i in 0..frames {
            // frame i is uniformly i/20
            let img = Image::new(4, 4, 3, vec![i as f32 / 20.0; 48]).unwrap();
            write_image(&dir.join(format!("frame_{i}.png")), &img).unwrap();
        }
    }

    fn spec() -> ClipSpec {
        ClipSpec {
            height: 4,
            width: 4,
            channels: 3,
            raw_frames: 16,
            stride: 2,
        }
    }

    #[test]
    fn stride_sampling_from_start() {
        let t = tempfile::tempdir().unwrap();
        write_clip(&t.path().join("a"), 16);
        let clips = load_frames_dir(t.path(), &spec(), 0).unwrap();
        assert_eq!(clips[0].clip.frames, 8);
        for k in 0..8 {
            let expect = ((2 * k) as f32 / 20.0 * 255.0).round() / 255.0;
            assert_eq!(clips[0].clip.frame(k).data[0], expect);
        }
    }

    #[test]
    fn short_clip_named_in_error() {
        let t = tempfile::tempdir().unwrap();
        write_clip(&t.path().join("short_one"), 10);
        let e = load_frames_dir(t.path(), &spec(), 0).unwrap_err();
        assert!(matches!(&e, Error::Data(m) if m.contains("short_one")));
    }

    #[test]
    fn seeded_start() {
        let t = tempfile::tempdir().unwrap();
        write_clip(&t.path().join("a"), 30);
        let a = load_frames_dir(t.path(), &spec(), 4).unwrap();
        assert_eq!(a, load_frames_dir(t.path(), &spec(), 4).unwrap());
    }

    #[test]
    fn ppm_round_trip() {
        let t = tempfile::tempdir().unwrap();
        let img = Image::new(2, 3, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        let p = t.path().join("x.ppm");
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
