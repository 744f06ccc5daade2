//! Channel-first float images and PPM (P6) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `(channels, height, width)` float image.
///
/// Images loaded from disk are clamped to `[0, 1]`. Images produced by the
/// model (velocities, intermediate ODE states) may hold any finite value.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim("image", format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImageTensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn clamped(&self) -> ImageTensor {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert!(self.same_dims(other), "max_abs_diff on mismatched images");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the `w×h` window at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageTensor> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::contract(
                "crop",
                format!("window {w}x{h}+{x}+{y} outside {}x{}", self.width, self.height),
            ));
        }
        Ok(ImageTensor::from_fn(self.channels, h, w, |c, yy, xx| {
            self.get(c, y + yy, x + xx)
        }))
    }

    /// Pastes `src` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, src: &ImageTensor, x: usize, y: usize) -> Result<()> {
        if src.channels != self.channels || x + src.width > self.width || y + src.height > self.height {
            return Err(Error::contract("paste", "source does not fit destination"));
        }
        for c in 0..src.channels {
            for yy in 0..src.height {
                for xx in 0..src.width {
                    self.set(c, y + yy, x + xx, src.get(c, yy, xx));
                }
            }
        }
        Ok(())
    }

    /// Nearest-neighbour resampling with pixel-centre alignment. Upsampling
    /// followed by downsampling back to the original size is the identity.
    pub fn resize_nearest(&self, height: usize, width: usize) -> ImageTensor {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let src_y: Vec<usize> = (0..height)
            .map(|y| (((y as f64 + 0.5) * sy) as usize).min(self.height - 1))
            .collect();
        let src_x: Vec<usize> = (0..width)
            .map(|x| (((x as f64 + 0.5) * sx) as usize).min(self.width - 1))
            .collect();
        ImageTensor::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, src_y[y], src_x[x])
        })
    }

    /// Flattened view as a `[channels, height, width]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<ImageTensor> {
        match t.shape() {
            &[c, h, w] => ImageTensor::new(c, h, w, t.data().to_vec()),
            s => Err(Error::dim("image", format!("expected rank-3 tensor, got {s:?}"))),
        }
    }

    /// Encodes as binary PPM. Values are clamped to `[0,1]` and quantised to
    /// 8 bits; only 3-channel images are accepted.
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::contract("ppm", format!("PPM needs 3 channels, got {}", self.channels)));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(quantize(self.get(c, y, x)));
                }
            }
        }
        Ok(out)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<ImageTensor> {
        let bad = |d: &str| Error::Format {
            format: "ppm",
            detail: d.to_string(),
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("only binary P6 is supported"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must be in 1..=255"));
        }
        pos += 1; // single whitespace byte after maxval
        let payload = bytes.get(pos..).ok_or_else(|| bad("missing payload"))?;
        if payload.len() < 3 * w * h {
            return Err(bad("truncated payload"));
        }
        let scale = maxval as f64;
        Ok(ImageTensor::from_fn(3, h, w, |c, y, x| {
            (payload[(y * w + x) * 3 + c] as f64 / scale).clamp(0.0, 1.0)
        }))
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_ppm()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}

/// Maps a value in `[0,1]` to the nearest 8-bit code. NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
