//! Images, scribble masks and the scaled RGBXY embedding that defines the
//! Gaussian affinity `W_pq = exp(-|f_p - f_q|^2 / 2)`.
//!
//! Pixel `(x, y)` lives at index `y * width + x` everywhere in the crate.

use std::path::Path;

use image::{DynamicImage, GenericImageView};
use ndarray::Array2;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Mask value for pixels that carry no scribble label.
pub const UNLABELED: u8 = 255;

/// An RGB raster with channel values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    rgb: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, rgb: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("image", format!("empty raster {width}x{height}")));
        }
        if rgb.len() != width * height {
            return Err(invalid(
                "image",
                format!("{} pixels for a {width}x{height} raster", rgb.len()),
            ));
        }
        if let Some(p) = rgb
            .iter()
            .position(|px| px.iter().any(|c| !(0.0..=255.0).contains(c)))
        {
            return Err(invalid(
                "image",
                format!("pixel {p} has a channel outside [0, 255]"),
            ));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * width * height {
            return Err(invalid("image", "byte count is not 3 * width * height"));
        }
        let rgb = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Self::new(width, height, rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.rgb
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    /// Colors as an `N x 3` matrix, the input of the K-means terms.
    pub fn colors<T: Scalar>(&self) -> Array2<T> {
        Array2::from_shape_fn((self.len(), 3), |(p, c)| T::of(self.rgb[p][c]))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .flat_map(|px| px.map(|c| c.round().clamp(0.0, 255.0) as u8))
            .collect()
    }
}

/// Partial labeling: the seed set, its labels and the class count `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    num_classes: usize,
}

impl ScribbleMask {
    /// `labels` uses [`UNLABELED`] for pixels outside the seed set.
    pub fn new(width: usize, height: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if !(2..=255).contains(&num_classes) {
            return Err(invalid(
                "class count",
                format!("K = {num_classes}, need 2 <= K <= 255"),
            ));
        }
        if labels.len() != width * height || labels.is_empty() {
            return Err(invalid(
                "scribble mask",
                "label count does not match dimensions",
            ));
        }
        if let Some((index, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| v != UNLABELED && v as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                index,
                value,
                classes: num_classes,
            });
        }
        Ok(Self {
            width,
            height,
            labels,
            num_classes,
        })
    }

    /// A mask with an empty seed set.
    pub fn unlabeled(width: usize, height: usize, num_classes: usize) -> Result<Self> {
        Self::new(width, height, vec![UNLABELED; width * height], num_classes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn raw(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, p: usize) -> Option<usize> {
        match self.labels[p] {
            UNLABELED => None,
            v => Some(v as usize),
        }
    }

    /// `u_p`: 1 on the seed set, 0 elsewhere.
    pub fn indicator(&self, p: usize) -> u8 {
        u8::from(self.labels[p] != UNLABELED)
    }

    /// `(pixel, label)` for every seed, in index order.
    pub fn seeds(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != UNLABELED)
            .map(|(p, &v)| (p, v as usize))
    }

    pub fn seed_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// `present[k]` is true when some scribble carries label `k`.
    pub fn present_classes(&self) -> Vec<bool> {
        let mut present = vec![false; self.num_classes];
        for (_, k) in self.seeds() {
            present[k] = true;
        }
        present
    }

    pub fn matches(&self, img: &Image) -> bool {
        self.width == img.width() && self.height == img.height()
    }
}

/// Gaussian bandwidths: `sigma_rgb` in intensity units, `sigma_xy` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub sigma_rgb: f64,
    pub sigma_xy: f64,
}

impl KernelSpec {
    pub fn new(sigma_rgb: f64, sigma_xy: f64) -> Result<Self> {
        if !(sigma_rgb > 0.0 && sigma_rgb.is_finite() && sigma_xy > 0.0 && sigma_xy.is_finite()) {
            return Err(invalid(
                "kernel spec",
                format!("sigma_rgb = {sigma_rgb}, sigma_xy = {sigma_xy}; both must be positive"),
            ));
        }
        Ok(Self {
            sigma_rgb,
            sigma_xy,
        })
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            sigma_rgb: 15.0,
            sigma_xy: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// `(r, g, b) / sigma_rgb` followed by `(x, y) / sigma_xy`.
    Rgbxy,
    /// `(r, g, b) / sigma_rgb` only.
    Rgb,
}

/// One scaled feature vector per pixel, row-major over the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    rows: Array2<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn from_rows(rows: Array2<T>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(invalid(
                "feature matrix",
                "needs at least one point and one dimension",
            ));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature matrix", "non-finite feature"));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<T> {
        &self.rows
    }

    pub fn row(&self, p: usize) -> ndarray::ArrayView1<'_, T> {
        self.rows.row(p)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMatrix<U> {
        FeatureMatrix {
            rows: self.rows.mapv(|v| U::of(v.as_f64())),
        }
    }
}

pub fn embed_features<T: Scalar>(
    img: &Image,
    spec: KernelSpec,
    mode: FeatureMode,
) -> FeatureMatrix<T> {
    let dim = match mode {
        FeatureMode::Rgbxy => 5,
        FeatureMode::Rgb => 3,
    };
    let rows = Array2::from_shape_fn((img.len(), dim), |(p, j)| {
        let v = if j < 3 {
            img.rgb[p][j] / spec.sigma_rgb
        } else {
            let (x, y) = img.coords(p);
            (if j == 3 { x } else { y }) as f64 / spec.sigma_xy
        };
        T::of(v)
    });
    FeatureMatrix { rows }
}

fn read_raster(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(Error::Io)?
        .with_guessed_format()
        .map_err(Error::Io)?
        .decode()
        .map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads an 8-bit RGB, RGBA, gray or gray+alpha raster. Gray is replicated
/// to three channels and alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    let (w, h) = raster.dimensions();
    let rgb = match raster {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => raster.to_rgb8(),
        other => {
            return Err(Error::UnsupportedRaster {
                path: path.to_path_buf(),
                detail: format!("{:?}; only 8-bit channels are accepted", other.color()),
            })
        }
    };
    Image::from_rgb8(w as usize, h as usize, rgb.as_raw())
}

/// Loads a single-channel 8-bit mask: `255` is unlabeled, `0..K` are labels.
pub fn load_scribbles(path: impl AsRef<Path>, num_classes: usize) -> Result<ScribbleMask> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    let (w, h) = raster.dimensions();
    let DynamicImage::ImageLuma8(gray) = raster else {
        return Err(Error::UnsupportedRaster {
            path: path.to_path_buf(),
            detail: format!(
                "{:?}; scribble masks must be 8-bit single channel",
                raster.color()
            ),
        });
    };
    ScribbleMask::new(w as usize, h as usize, gray.into_raw(), num_classes)
}
