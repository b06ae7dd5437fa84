//! Image batches, dataset ingestion and the on-disk tensor container.

pub mod container;
pub mod toy;

use std::fs;
use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use container::{load_container, save_container, Array, ArrayData, Dtype};
pub use toy::{gen_toy_dataset, ToyDataset, ToySpec};

/// A batch of square images with pixels in `[-1, 1]`, laid out `(B, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    tensor: Tensor,
}

impl ImageBatch {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (b, c, h, w) = tensor.dims4()?;
        if b == 0 {
            return Err(Error::Shape("image batch must not be empty".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("{} channels; expected 1 or 3", c)));
        }
        if h != w {
            return Err(Error::Shape(format!("non-square images {}x{}", h, w)));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {} outside [-1, 1]",
                v
            )));
        }
        Ok(ImageBatch { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn len(&self) -> usize {
        self.tensor.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Pixels per image, `C·H·W`.
    pub fn pixels(&self) -> usize {
        self.tensor.row_len()
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            tensor: self.tensor.select_rows(idx),
        }
    }

    pub fn concat(parts: &[&ImageBatch]) -> Result<ImageBatch> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| &p.tensor).collect();
        ImageBatch::new(Tensor::concat_rows(&ts)?)
    }

    /// Saves as a float32 container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_container(&Array::from_tensor_f32(&self.tensor), path)
    }

    /// Loads a rank-4 container (any float dtype, or uint8 raw pixels).
    pub fn load(path: impl AsRef<Path>) -> Result<ImageBatch> {
        let arr = load_container(path)?;
        match &arr.data {
            ArrayData::U8(raw) => normalize_pixels(raw, &arr.shape),
            _ => ImageBatch::new(arr.to_tensor()),
        }
    }
}

/// `raw / 127.5 - 1`.
pub fn normalize_pixels(raw: &[u8], shape: &[usize]) -> Result<ImageBatch> {
    let data = raw.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    ImageBatch::new(Tensor::from_vec(shape, data)?)
}

/// Inverse of [`normalize_pixels`]: round to nearest, clamp to `[0, 255]`.
pub fn denormalize_pixels(b: &ImageBatch) -> Vec<u8> {
    denormalize_values(b.tensor().data())
}

pub fn denormalize_values(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Loads every file in `path` (sorted bytewise by file name), resized to
/// `resolution × resolution` with `channels` ∈ {1, 3}.
pub fn load_image_dir(path: impl AsRef<Path>, resolution: usize, channels: usize) -> Result<ImageBatch> {
    let path = path.as_ref();
    if !path.is_dir() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!("{} channels", channels)));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort_by(|a, b| {
        a.file_name()
            .unwrap_or_default()
            .as_encoded_bytes()
            .cmp(b.file_name().unwrap_or_default().as_encoded_bytes())
    });
    if files.is_empty() {
        return Err(Error::NoImages(path.to_path_buf()));
    }
    let res = resolution as u32;
    let mut raw = Vec::with_capacity(files.len() * channels * resolution * resolution);
    for f in &files {
        let img = image::ImageReader::open(f)
            .map_err(|e| Error::io(f, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(f, e))?
            .decode()
            .map_err(|e| Error::Undecodable {
                path: f.clone(),
                reason: e.to_string(),
            })?;
        let img = if img.width() != res || img.height() != res {
            img.resize_exact(res, res, FilterType::Triangle)
        } else {
            img
        };
        // planar CHW
        if channels == 3 {
            let rgb = img.to_rgb8();
            for c in 0..3 {
                raw.extend(rgb.pixels().map(|p| p.0[c]));
            }
        } else {
            raw.extend(img.to_luma8().pixels().map(|p| p.0[0]));
        }
    }
    normalize_pixels(&raw, &[files.len(), channels, resolution, resolution])
}

/// Writes a batch as PNG files `prefix_0000.png, ...` into `dir`.
pub fn save_image_dir(b: &ImageBatch, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, c, h, w) = b.tensor().dims4()?;
    for i in 0..n {
        let px = denormalize_values(b.tensor().row(i));
        let p = dir.join(format!("{}_{:04}.png", prefix, i));
        let res = if c == 3 {
            let mut buf = Vec::with_capacity(3 * h * w);
            for j in 0..h * w {
                for ch in 0..3 {
                    buf.push(px[ch * h * w + j]);
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("sized")
                .save(&p)
        } else {
            image::GrayImage::from_raw(w as u32, h as u32, px).expect("sized").save(&p)
        };
        res.map_err(|e| Error::Undecodable {
            path: p.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// Rotates every image by `90° · k` counter-clockwise.
pub fn rotate_batch(b: &ImageBatch, k: usize) -> Result<ImageBatch> {
    if k > 3 {
        return Err(Error::InvalidArgument(format!("rotation k = {} not in 0..=3", k)));
    }
    let t = rotate_tensor(b.tensor(), k)?;
    Ok(ImageBatch { tensor: t })
}

pub(crate) fn rotate_tensor(t: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    if h != w {
        return Err(Error::Shape("rotation needs square images".into()));
    }
    let n = h;
    let mut out = t.clone();
    if k % 4 == 0 {
        return Ok(out);
    }
    for (src, dst) in t.data().chunks(n * n).zip(out.data_mut().chunks_mut(n * n)) {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match k % 4 {
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                dst[i * n + j] = src[si * n + sj];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        let b = normalize_pixels(&[0, 255, 128, 0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(b.tensor().data()[0], -1.0);
        assert_eq!(b.tensor().data()[1], 1.0);
        assert!((b.tensor().data()[2] - 0.003_921_568_627_451).abs() < 1e-12);
    }

    #[test]
    fn denormalize_inverts_normalize_on_all_bytes() {
        let all: Vec<u8> = (0..=255u8).collect();
        let b = normalize_pixels(&all, &[1, 1, 16, 16]).unwrap();
        assert_eq!(denormalize_pixels(&b), all);
    }

    #[test]
    fn ccw_rotation_of_2x2() {
        // [[a, b], [c, d]] -> [[b, d], [a, c]]
        let b = ImageBatch::new(Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let r = rotate_batch(&b, 1).unwrap();
        assert_eq!(r.tensor().data(), &[0.2, 0.4, 0.1, 0.3]);
        assert_eq!(rotate_batch(&b, 0).unwrap(), b);
        assert!(rotate_batch(&b, 4).is_err());
    }

    #[test]
    fn rotation_group_law() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 5).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let b = ImageBatch::new(Tensor::from_vec(&[2, 3, 5, 5], data).unwrap()).unwrap();
        let mut r = b.clone();
        for _ in 0..4 {
            r = rotate_batch(&r, 1).unwrap();
        }
        assert_eq!(r, b);
        let twice = rotate_batch(&rotate_batch(&b, 1).unwrap(), 1).unwrap();
        assert_eq!(twice, rotate_batch(&b, 2).unwrap());
        let thrice = rotate_batch(&twice, 1).unwrap();
        assert_eq!(thrice, rotate_batch(&b, 3).unwrap());
    }

    #[test]
    fn batch_invariants() {
        assert!(ImageBatch::new(Tensor::zeros(&[0, 1, 4, 4])).is_err());
        assert!(ImageBatch::new(Tensor::zeros(&[1, 2, 4, 4])).is_err());
        assert!(ImageBatch::new(Tensor::zeros(&[1, 3, 4, 5])).is_err());
        assert!(ImageBatch::new(Tensor::full(&[1, 1, 4, 4], 1.5)).is_err());
    }
}
