//! Frames, masks and feature tensors on disk.
//!
//! Frames and masks are 8-bit PNGs. Feature tensors use a small binary
//! container shared with the offline feature exporter:
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"SDFT"
//! 4       1         version (1)
//! 5       1         dtype   (1 = float32 little-endian)
//! 6       1         ndim    (>= 1)
//! 7       1         reserved, must be 0
//! 8       4 * ndim  extents, u32 little-endian, outermost first
//! ..      4 * prod  payload, f32 little-endian, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"SDFT";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32_LE: u8 = 1;
/// File extension used for feature and confidence tensors.
pub const TENSOR_EXTENSION: &str = "sdft";

/// An 8-bit RGB frame, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "frame extents must be positive, got {width}x{height}"
            )));
        }
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch(format!(
                "frame {width}x{height} needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Builds a frame by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "frame extents must be positive");
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Per-pixel object ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "mask extents must be positive, got {width}x{height}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask extents must be positive");
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "mask extents must be positive");
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self { width, height, labels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Number of foreground objects, i.e. the largest label present.
    pub fn num_objects(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Binary view of a single object: `true` where the label equals `id`.
    pub fn object(&self, id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    /// Inclusive bounding box `(x_min, y_min, x_max, y_max)` of `id`, if present.
    pub fn bbox(&self, id: u8) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != id {
                    continue;
                }
                bb = Some(match bb {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        bb
    }
}

/// Dense float32 tensor, row-major with the first dimension outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidTensor("ndim must be at least 1".into()));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidTensor(format!("ndim {} exceeds 255", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::InvalidTensor(format!("extent {d} exceeds u32")));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} hold {count} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.dims, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size in bytes of the serialized form.
    pub fn encoded_len(&self) -> usize {
        8 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&[TENSOR_VERSION, DTYPE_F32_LE, self.dims.len() as u8, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::InvalidTensor(format!(
                "header truncated: {} bytes",
                bytes.len()
            )));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != TENSOR_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes[4] != TENSOR_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes[5] != DTYPE_F32_LE {
            return Err(Error::UnsupportedDtype(bytes[5]));
        }
        let ndim = bytes[6] as usize;
        if ndim == 0 {
            return Err(Error::InvalidTensor("ndim must be at least 1".into()));
        }
        if bytes[7] != 0 {
            return Err(Error::InvalidTensor(format!("reserved byte is {}", bytes[7])));
        }
        let header = 8 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::InvalidTensor(format!(
                "header needs {header} bytes, file has {}",
                bytes.len()
            )));
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let expected = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidTensor(format!("dims {dims:?} overflow")))?;
        let actual = bytes.len() - header;
        if actual != expected {
            return Err(Error::PayloadMismatch { expected, actual });
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

fn open_png(path: &Path) -> Result<png::Decoder<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(png::Decoder::new(BufReader::new(file)))
}

fn malformed(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::MalformedPng { path: path.to_path_buf(), reason: e.to_string() }
}

fn decode(
    path: &Path,
    transformations: png::Transformations,
) -> Result<(png::ColorType, usize, usize, Vec<u8>)> {
    let mut decoder = open_png(path)?;
    decoder.set_transformations(transformations);
    let mut reader = decoder.read_info().map_err(|e| malformed(path, e))?;
    let depth = reader.info().bit_depth;
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth { path: path.to_path_buf(), depth: depth as u8 });
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| malformed(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| malformed(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info.color_type, info.width as usize, info.height as usize, buf))
}

/// Reads an 8-bit PNG as RGB. Grayscale is replicated to three channels,
/// alpha is dropped and palettes are expanded.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageFrame> {
    let path = path.as_ref();
    let (color, width, height, buf) = decode(path, png::Transformations::EXPAND)?;
    let data: Vec<u8> = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => {
            buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
        }
        other => {
            return Err(Error::UnsupportedColorType {
                path: path.to_path_buf(),
                color: format!("{other:?}"),
            })
        }
    };
    ImageFrame::new(width, height, data).map_err(|e| malformed(path, e))
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let to_io = |e: png::EncodingError| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    {
        let mut encoder = png::Encoder::new(&mut writer, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut png_writer = encoder.write_header().map_err(to_io)?;
        png_writer.write_image_data(data).map_err(to_io)?;
        png_writer.finish().map_err(to_io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn write_image(frame: &ImageFrame, path: impl AsRef<Path>) -> Result<()> {
    encode_png(path.as_ref(), frame.width, frame.height, png::ColorType::Rgb, &frame.data)
}

/// Writes an 8-bit grayscale PNG from raw bytes.
pub fn write_gray(width: usize, height: usize, data: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "gray image {width}x{height} needs {} bytes, got {}",
            width * height,
            data.len()
        )));
    }
    encode_png(path.as_ref(), width, height, png::ColorType::Grayscale, data)
}

/// Reads a mask PNG whose pixel values (or palette indices) are object ids.
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (color, width, height, buf) = decode(path, png::Transformations::IDENTITY)?;
    match color {
        png::ColorType::Grayscale | png::ColorType::Indexed => {
            LabelMask::new(width, height, buf).map_err(|e| malformed(path, e))
        }
        png::ColorType::Rgb | png::ColorType::Rgba => Err(Error::RgbMask { path: path.to_path_buf() }),
        other => Err(Error::UnsupportedColorType {
            path: path.to_path_buf(),
            color: format!("{other:?}"),
        }),
    }
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_gray(mask.width, mask.height, &mask.labels, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let frame = ImageFrame::from_fn(7, 5, |x, y| [(x * 30) as u8, (y * 40) as u8, (x + y) as u8]);
        write_image(&frame, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), frame);
    }

    #[test]
    fn white_pixel_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        write_gray(1, 1, &[255], &path).unwrap();
        let frame = read_image(&path).unwrap();
        assert_eq!(frame.data(), &[255, 255, 255]);
    }

    #[test]
    fn truncated_png_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let frame = ImageFrame::from_fn(16, 16, |x, y| [x as u8, y as u8, 0]);
        write_image(&frame, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_image(&path), Err(Error::MalformedPng { .. })));
    }

    #[test]
    fn missing_file_reported() {
        let err = read_image("/nonexistent/frame.png").unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        {
            let file = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 8]).unwrap();
        }
        assert!(matches!(read_image(&path), Err(Error::UnsupportedBitDepth { depth: 16, .. })));
        assert!(matches!(read_mask(&path), Err(Error::UnsupportedBitDepth { .. })));
    }

    #[test]
    fn tensor_byte_layout() {
        let t = Tensor::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 8 + 12 + 8);
        assert_eq!(&bytes[..8], &[b'S', b'D', b'F', b'T', 1, 1, 3, 0]);
        assert_eq!(&bytes[8..20], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..], &[0, 0, 0, 0, 0, 0, 0x80, 0x3f]);
        assert_eq!(Tensor::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn tensor_errors() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        let mut bytes = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::UnsupportedVersion(2))));
        let mut bad = bytes.clone();
        bad[5] = 7;
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::UnsupportedDtype(7))));
        let mut bad = bytes.clone();
        bad[6] = 0;
        assert!(Tensor::from_bytes(&bad).is_err());
        bytes.pop();
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::PayloadMismatch { expected: 8, actual: 7 })
        ));
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sdft");
        let t = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f32 * 0.5 - 1.0).collect()).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 12 + 48);
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn mask_num_objects() {
        assert_eq!(LabelMask::zeros(4, 4).num_objects(), 0);
        let m = LabelMask::new(3, 1, vec![0, 1, 2]).unwrap();
        assert_eq!(m.num_objects(), 2);
    }

    #[test]
    fn rgb_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_image(&ImageFrame::from_fn(2, 2, |_, _| [1, 1, 1]), &path).unwrap();
        let err = read_mask(&path).unwrap_err();
        assert!(matches!(err, Error::RgbMask { .. }));
        assert!(err.to_string().contains("single-channel"));
    }

    #[test]
    fn palette_mask_reads_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        {
            let file = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(file), 3, 1);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(vec![0, 0, 0, 128, 0, 0, 0, 128, 0]);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 2, 1]).unwrap();
        }
        let m = read_mask(&path).unwrap();
        assert_eq!(m.labels(), &[0, 2, 1]);
        assert_eq!(m.num_objects(), 2);
    }

    proptest! {
        #[test]
        fn tensor_bytes_round_trip(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) as u32) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let bytes = t.to_bytes();
            prop_assert_eq!(bytes.len(), 8 + 4 * dims.len() + 4 * n);
            let back = Tensor::from_bytes(&bytes).unwrap();
            let same_bits = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
            prop_assert_eq!(back.dims(), t.dims());
        }

        #[test]
        fn mask_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.png");
            let mask = LabelMask::from_fn(w, h, |x, y| {
                ((seed >> ((x * 7 + y * 3) % 60)) & 3) as u8
            });
            write_mask(&mask, &path).unwrap();
            prop_assert_eq!(read_mask(&path).unwrap(), mask);
        }
    }
}
