//! Image → token sequence: patch extraction and the learned linear patch
//! embedding with a prepended classification token.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::params::{ParamId, Session};
use crate::tensor::Tensor;

/// Initial standard deviation of positional and cls embeddings.
pub const EMBED_INIT_STD: f64 = 0.02;

/// An image with channel-last row-major pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
    /// Test-time ground truth; always false for training samples.
    pub anomaly: bool,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>, label: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("{channels} channels; expected 1 or 3")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{}x{}x{} image needs {} pixels, got {}",
                height,
                width,
                channels,
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(ImageSample {
            height,
            width,
            channels,
            pixels,
            label,
            anomaly: false,
        })
    }

    /// Luminance (0.299 R + 0.587 G + 0.114 B) for colour images, the pixels
    /// themselves for grayscale.
    pub fn grayscale(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// Patch grid geometry for a given image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "{height}x{width} image is not divisible into {patch}x{patch} patches"
            )));
        }
        Ok(PatchGrid {
            height,
            width,
            channels,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// Number of patch tokens `s`.
    pub fn tokens(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Flattened patch length `patch² · channels`.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Splits an image into an `s × (patch²·C)` matrix. Patches are ordered
/// row-major over the grid and flattened row-major (then channel) inside.
pub fn patchify(image: &ImageSample, patch: usize) -> Result<Tensor> {
    let grid = PatchGrid::new(image.height, image.width, image.channels, patch)?;
    patchify_pixels(&image.pixels, &grid)
}

pub fn patchify_pixels(pixels: &[f64], grid: &PatchGrid) -> Result<Tensor> {
    let PatchGrid {
        width,
        channels,
        patch,
        ..
    } = *grid;
    if pixels.len() != grid.height * width * channels {
        return Err(Error::Dimension("pixel buffer does not match patch grid".into()));
    }
    let mut out = Vec::with_capacity(pixels.len());
    for gr in 0..grid.rows() {
        for gc in 0..grid.cols() {
            for y in 0..patch {
                let start = ((gr * patch + y) * width + gc * patch) * channels;
                out.extend_from_slice(&pixels[start..start + patch * channels]);
            }
        }
    }
    Tensor::new(vec![grid.tokens(), grid.patch_len()], out)
}

/// Inverse of [`patchify_pixels`].
pub fn unpatchify(patches: &Tensor, grid: &PatchGrid) -> Result<Vec<f64>> {
    if patches.shape() != [grid.tokens(), grid.patch_len()] {
        return Err(Error::Dimension(format!(
            "expected {}x{} patches, got {:?}",
            grid.tokens(),
            grid.patch_len(),
            patches.shape()
        )));
    }
    let PatchGrid {
        width,
        channels,
        patch,
        ..
    } = *grid;
    let mut pixels = vec![0.0; grid.height * width * channels];
    let row_len = patch * channels;
    for (t, values) in patches.data().chunks(grid.patch_len()).enumerate() {
        let (gr, gc) = (t / grid.cols(), t % grid.cols());
        for (y, src) in values.chunks(row_len).enumerate() {
            let start = ((gr * patch + y) * width + gc * patch) * channels;
            pixels[start..start + row_len].copy_from_slice(src);
        }
    }
    Ok(pixels)
}

/// Linear patch projection, learned positional table and cls token.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    pub projection: Linear,
    /// `(s+1) × e`
    pub positional: ParamId,
    /// `1 × e`
    pub cls_token: ParamId,
}

impl PatchEmbedder {
    pub fn init<R: Rng>(p: &mut Init<'_, R>, grid: &PatchGrid, dim: usize) -> Self {
        p.scoped("embed", |p| PatchEmbedder {
            projection: p.linear("projection", grid.patch_len(), dim, true),
            positional: p.normal("positional", &[grid.tokens() + 1, dim], EMBED_INIT_STD),
            cls_token: p.normal("cls", &[1, dim], EMBED_INIT_STD),
        })
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.projection.weight];
        ids.extend(self.projection.bias);
        ids.extend([self.positional, self.cls_token]);
        ids
    }

    /// `s × (patch²·C)` patches → `(s+1) × e` sequence. Row 0 is
    /// `cls + pos[0]`, row `i ≥ 1` is `proj(patch[i-1]) + pos[i]`.
    pub fn embed(&self, s: &mut Session, patches: Var) -> Result<Var> {
        let projected = self.projection.forward(s, patches)?;
        let cls = s.param(self.cls_token);
        let seq = s.graph.concat_rows(&[cls, projected])?;
        let pos = s.param(self.positional);
        s.graph.add(seq, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamStore, SeedStream};

    fn image(h: usize, w: usize, c: usize, seed: u64) -> ImageSample {
        use rand::Rng;
        let mut rng = SeedStream::new(seed).rng("img");
        let px = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        ImageSample::new(h, w, c, px, 0).unwrap()
    }

    #[test]
    fn patch_counts() {
        let p = patchify(&image(28, 28, 1, 1), 7).unwrap();
        assert_eq!(p.shape(), &[16, 49]);
        assert!(matches!(patchify(&image(28, 28, 1, 1), 5), Err(Error::Config(_))));
    }

    #[test]
    fn patch_layout_is_row_major() {
        let px: Vec<f64> = (0..16).map(f64::from).collect();
        let img = ImageSample::new(4, 4, 1, px, 0).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn round_trip_colour() {
        let img = image(8, 12, 3, 4);
        let grid = PatchGrid::new(8, 12, 3, 4).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(unpatchify(&p, &grid).unwrap(), img.pixels);
    }

    fn embedder(seed: u64) -> (ParamStore, PatchEmbedder) {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(seed).rng("init");
        let grid = PatchGrid::new(4, 4, 1, 2).unwrap();
        let e = PatchEmbedder::init(&mut Init::new(&mut store, &mut rng), &grid, 6);
        (store, e)
    }

    #[test]
    fn zero_inputs_leave_cls_row() {
        let (mut store, e) = embedder(3);
        store.set(e.projection.bias.unwrap(), Tensor::zeros(&[6])).unwrap();
        store.set(e.positional, Tensor::zeros(&[5, 6])).unwrap();
        let cls = store.get(e.cls_token).clone();
        let mut s = Session::inference(&store);
        let patches = s.graph.constant(Tensor::zeros(&[4, 4]));
        let out = e.embed(&mut s, patches).unwrap();
        let v = s.graph.value(out);
        assert_eq!(v.shape(), &[5, 6]);
        assert_eq!(v.row(0), cls.data());
        assert!(v.data()[6..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_patches_differ_by_positional_offset() {
        let (store, e) = embedder(5);
        let mut s = Session::inference(&store);
        let patches = s.graph.constant(Tensor::new(vec![4, 4], [0.3, 0.1, 0.9, 0.5].repeat(4)).unwrap());
        let out = e.embed(&mut s, patches).unwrap();
        let v = s.graph.value(out);
        let pos = store.get(e.positional);
        for c in 0..6 {
            let lhs = v.at(1, c) - v.at(3, c);
            let rhs = pos.at(1, c) - pos.at(3, c);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_is_linear_in_patch_content() {
        let (store, e) = embedder(6);
        let mut rng = SeedStream::new(9).rng("p");
        let p = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let run = |t: Tensor| {
            let mut s = Session::inference(&store);
            let v = s.graph.constant(t);
            let zero = s.graph.constant(Tensor::zeros(&[4, 4]));
            let a = e.embed(&mut s, v).unwrap();
            let b = e.embed(&mut s, zero).unwrap();
            let d = s.graph.sub(a, b).unwrap();
            s.graph.value(d).clone()
        };
        let base = run(p.clone());
        let scaled = run(p.map(|x| 2.5 * x));
        assert!(scaled.max_abs_diff(&base.map(|x| 2.5 * x)) < 1e-12);
    }
}
