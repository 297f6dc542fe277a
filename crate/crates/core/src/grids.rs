//! Dense 2-D maps: images, label maps, per-pixel probability maps and the
//! shared elementwise operations on them.
//!
//! Every map is stored row-major as `(row, column, channel)` in `f64`.
//! Maps serialize to the `CGRD` container:
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"CGRD"
//! 4       4     version (u32 LE, currently 1)
//! 8       4     height  (u32 LE)
//! 12      4     width   (u32 LE)
//! 16      4     channels(u32 LE)
//! 20      8*N   payload, N = height*width*channels f64 LE, row-major
//! ```
//!
//! Label maps are stored with one channel holding the class index as `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CGRD_MAGIC: [u8; 4] = *b"CGRD";
pub const CGRD_VERSION: u32 = 1;

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// A dense `height x width x channels` grid of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "payload of {} values does not fill {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty grid");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Iterates over per-pixel channel vectors in row-major order.
    pub fn pixel_iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resampling of every channel using pixel-centre alignment.
    /// Resizing to the current size returns an exact copy.
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> Grid {
        assert!(new_height > 0 && new_width > 0, "resize target must be non-empty");
        if new_height == self.height && new_width == self.width {
            return self.clone();
        }
        let ys = axis_samples(self.height, new_height);
        let xs = axis_samples(self.width, new_width);
        let c = self.channels;
        let mut out = Grid::zeros(new_height, new_width, c);
        for (r, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (col, &(x0, x1, fx)) in xs.iter().enumerate() {
                let a = self.pixel(y0, x0);
                let b = self.pixel(y0, x1);
                let d = self.pixel(y1, x0);
                let e = self.pixel(y1, x1);
                let dst = out.pixel_mut(r, col);
                for k in 0..c {
                    let top = a[k] + fx * (b[k] - a[k]);
                    let bottom = d[k] + fx * (e[k] - d[k]);
                    dst[k] = top + fy * (bottom - top);
                }
            }
        }
        out
    }

    pub fn write_cgrd<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&CGRD_MAGIC)?;
        for v in [
            CGRD_VERSION,
            dim_u32(self.height)?,
            dim_u32(self.width)?,
            dim_u32(self.channels)?,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cgrd<R: Read>(mut r: R) -> Result<Grid> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CGRD_MAGIC {
            return Err(Error::Format(format!("bad grid magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CGRD_VERSION {
            return Err(Error::Format(format!("unsupported grid version {version}")));
        }
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after grid payload".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Grid::new(height, width, channels, data)
    }

    /// Lossless text export: one `row,col,channel,value` line per entry.
    /// Values use the shortest representation that parses back exactly.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,col,channel,value")?;
        for row in 0..self.height {
            for col in 0..self.width {
                for (ch, v) in self.pixel(row, col).iter().enumerate() {
                    writeln!(w, "{row},{col},{ch},{v:?}")?;
                }
            }
        }
        Ok(())
    }
}

/// Source coordinates for bilinear sampling along one axis.
fn axis_samples(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Column reversal. Applying it twice is the identity.
pub trait HFlip {
    fn hflip(&self) -> Self;
}

impl HFlip for Grid {
    fn hflip(&self) -> Self {
        let mut out = self.clone();
        for row in 0..self.height {
            for col in 0..self.width {
                out.pixel_mut(row, self.width - 1 - col)
                    .copy_from_slice(self.pixel(row, col));
            }
        }
        out
    }
}

/// An RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Grid);

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::new(height, width, Self::CHANNELS, data)?)
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels() != Self::CHANNELS {
            return Err(Error::Shape(format!(
                "image needs 3 channels, got {}",
                grid.channels()
            )));
        }
        if let Some(v) = grid.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self(grid))
    }

    /// Builds an image from a grid whose values are clamped into `[0, 1]`.
    pub fn from_grid_clamped(mut grid: Grid) -> Self {
        assert_eq!(grid.channels(), Self::CHANNELS);
        for v in grid.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self(grid)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut g = Grid::zeros(height, width, 3);
        for px in g.data_mut().chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self::from_grid_clamped(g)
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let p = self.0.pixel(row, col);
        [p[0], p[1], p[2]]
    }

    /// Bilinear resize; the result stays inside `[0, 1]`.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        Image::from_grid_clamped(self.0.resize_bilinear(height, width))
    }
}

impl HFlip for Image {
    fn hflip(&self) -> Self {
        Self(self.0.hflip())
    }
}

/// Per-pixel ground-truth or predicted class indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "label payload of {} does not fill {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    /// Checks that every label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::InvalidParameter(format!(
                "label {l} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn to_grid(&self) -> Grid {
        Grid::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&l| l as f64).collect(),
        )
        .expect("label map is non-empty")
    }

    pub fn from_grid(grid: &Grid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Shape("label grid must have one channel".into()));
        }
        let data = grid
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("invalid label value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid.height(), grid.width(), data)
    }
}

impl HFlip for LabelMap {
    fn hflip(&self) -> Self {
        let mut out = self.clone();
        for row in 0..self.height {
            for col in 0..self.width {
                out.set(row, self.width - 1 - col, self.get(row, col));
            }
        }
        out
    }
}

/// Per-pixel class probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Grid);

impl ProbMap {
    /// Validates probability bounds and per-pixel sums.
    pub fn from_grid(grid: Grid) -> Result<Self> {
        for (i, px) in grid.pixel_iter().enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "pixel {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(Self(grid))
    }

    pub(crate) fn from_grid_unchecked(grid: Grid) -> Self {
        Self(grid)
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self(Grid::filled(height, width, classes, 1.0 / classes as f64))
    }

    /// One-hot encoding of a label map.
    pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<Self> {
        labels.validate(classes)?;
        let mut g = Grid::zeros(labels.height(), labels.width(), classes);
        for (px, &l) in g.data_mut().chunks_exact_mut(classes).zip(labels.data()) {
            px[l as usize] = 1.0;
        }
        Ok(Self(g))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        self.0.pixel(row, col)
    }

    pub fn pixel_iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.0.pixel_iter()
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        self.0.same_shape(&other.0)
    }

    /// Largest deviation of any per-pixel sum from one.
    pub fn max_sum_error(&self) -> f64 {
        self.pixel_iter()
            .map(|px| (px.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

impl HFlip for ProbMap {
    fn hflip(&self) -> Self {
        Self(self.0.hflip())
    }
}

/// Per-pixel winning class and its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfLabelPair {
    pub conf: Vec<f64>,
    pub label: LabelMap,
}

impl ConfLabelPair {
    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }
}

/// Per-pixel argmax with ties resolved to the lowest class index.
pub fn argmax_conf(p: &ProbMap) -> ConfLabelPair {
    let mut conf = Vec::with_capacity(p.grid().pixels());
    let mut label = Vec::with_capacity(p.grid().pixels());
    for px in p.pixel_iter() {
        let (best, value) = argmax(px);
        conf.push(value);
        label.push(best as u8);
    }
    ConfLabelPair {
        conf,
        label: LabelMap {
            height: p.height(),
            width: p.width(),
            data: label,
        },
    }
}

/// Index and value of the first maximum.
#[inline]
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut value = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > value {
            best = i;
            value = v;
        }
    }
    (best, value)
}

/// Numerically stable softmax of one logit vector, in place.
#[inline]
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the channel axis of a logit grid.
pub fn softmax_rows(logits: &Grid) -> Result<ProbMap> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut out = logits.clone();
    let c = out.channels();
    for px in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(px);
    }
    Ok(ProbMap(out))
}

/// Bilinear resize of every class channel followed by per-pixel
/// renormalization.
pub fn resize_prob(p: &ProbMap, height: usize, width: usize) -> ProbMap {
    if height == p.height() && width == p.width() {
        return p.clone();
    }
    let mut g = p.grid().resize_bilinear(height, width);
    renormalize(&mut g);
    ProbMap(g)
}

pub(crate) fn renormalize(g: &mut Grid) {
    let c = g.channels();
    for px in g.data_mut().chunks_exact_mut(c) {
        let sum: f64 = px.iter().sum();
        for v in px.iter_mut() {
            *v /= sum;
        }
    }
}
