use std::path::Path;

use image::{imageops::FilterType, Rgb, RgbImage};

use crate::diffarray::DiffArray;
use crate::error::{Error, Result};
use crate::model::VisionMode;
use crate::scalar::Scalar;

use super::{Frame, Sample};

/// Flat two-tone scene with the projected joints stamped on it.
pub fn procedural_image(frame: &Frame, size: u32) -> RgbImage {
    let torso = frame.p2d.first().copied().unwrap_or([0.0, 0.0]);
    let tint = ((torso[0] * 40.0).rem_euclid(200.0)) as u8;
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        if y > size / 2 {
            Rgb([90, 80 + tint / 4, 60])
        } else {
            Rgb([40 + tint / 2, 60, 120 + (x * 100 / size.max(1)) as u8])
        }
    });
    let px_per_m = size as f64 / 6.0;
    for p in &frame.p2d {
        let cx = size as f64 / 2.0 + (p[0] - 1.0) * px_per_m;
        let cy = size as f64 / 2.0 - p[1] * px_per_m;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, Rgb([250, 250, 250]));
                }
            }
        }
    }
    img
}

/// Reads an image, resizes it to `size x size`, returns `[3, size, size]` in `[0, 1]`.
pub fn load_image_tensor<S: Scalar>(path: &Path, size: usize) -> Result<DiffArray<S>> {
    let img = image::open(path)
        .map_err(|e| Error::input(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let resized = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    let mut data = vec![S::zero(); 3 * size * size];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[(c * size + y as usize) * size + x as usize] = S::from_f64(px[c] as f64 / 255.0);
        }
    }
    DiffArray::new(vec![3, size, size], data)
}

/// Image tensor a sample feeds to the extractor: the last frame (`[3,H,W]`) or all
/// observed frames stacked on the channel axis (`[3T,H,W]`). Relative paths resolve
/// against `base_dir`.
pub fn sample_image_tensor<S: Scalar>(
    sample: &Sample,
    mode: VisionMode,
    size: usize,
    base_dir: &Path,
) -> Result<Option<DiffArray<S>>> {
    let load = |k: usize| -> Result<DiffArray<S>> {
        let rel = sample.obs_images[k]
            .as_ref()
            .ok_or_else(|| Error::input(format!("observed frame {} has no image", sample.start + k)))?;
        load_image_tensor(&base_dir.join(rel), size)
    };
    match mode {
        VisionMode::None => Ok(None),
        VisionMode::LastImage => load(sample.obs_len() - 1).map(Some),
        VisionMode::Sequence => {
            let mut data = Vec::with_capacity(3 * sample.obs_len() * size * size);
            for k in 0..sample.obs_len() {
                data.extend(load(k)?.into_data());
            }
            Ok(Some(DiffArray::new(vec![3 * sample.obs_len(), size, size], data)?))
        }
    }
}

/// Renders a procedural PNG for every frame into `root/subdir` and points each
/// frame's `image` at it (relative to `root`).
pub fn render_sequence_images(seq: &mut super::SkeletonSequence, root: &Path, subdir: &str, size: u32) -> Result<()> {
    for (k, frame) in seq.frames.iter_mut().enumerate() {
        let rel = format!("{subdir}/frame_{k:05}.png");
        let mut bytes = Vec::new();
        procedural_image(frame, size)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::format(rel.clone(), e.to_string()))?;
        crate::fsutil::write_atomic(root.join(&rel), &bytes)?;
        frame.image = Some(rel);
    }
    Ok(())
}
