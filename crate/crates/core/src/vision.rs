//! Patch-embedding vision transformer producing `{v_cls, v_1, .., v_n}`.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MissError, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn;
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig { depth: 2, d: 64, heads: 4, ffn_dim: 256, patch_size: 16, image_size: 32 }
    }

    /// ViT-Base sized encoder.
    pub fn base() -> Self {
        EncoderConfig { depth: 12, d: 768, heads: 12, ffn_dim: 3072, patch_size: 16, image_size: 224 }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(MissError::Config(format!(
                "vision encoder needs depth >= 1 and d divisible by heads (depth {}, d {}, heads {})",
                self.depth, self.d, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            return Err(MissError::ImageNotDivisible {
                height: self.image_size,
                width: self.image_size,
                patch: self.patch_size,
            });
        }
        Ok(())
    }
}

/// Per-channel normalization applied after resizing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5; 3], std: [0.5; 3] }
    }
}

/// Normalized pixels, `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().0 != 3 {
            return Err(MissError::shape(format!("expected 3 channels, got {}", pixels.dim().0)));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(MissError::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(ImageTensor { pixels })
    }

    pub fn from_rgb(img: &RgbImage, size: usize, norm: &Normalization) -> Self {
        let resized;
        let img = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
            &resized
        };
        let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            let v = img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
            (v - norm.mean[c]) / norm.std[c]
        });
        ImageTensor { pixels }
    }

    /// Reads an 8-bit raster file, resizes to `size`×`size` and normalizes.
    pub fn load(path: &Path, size: usize, norm: &Normalization) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb(&img, size, norm))
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// `[n+1, d]`; row 0 is `v_cls`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbeddings(pub Tensor);

impl ImageEmbeddings {
    pub fn cls(&self) -> ndarray::ArrayView1<'_, f64> {
        self.0.row(0)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Flattened patches in row-major patch order; each row is laid out as
/// `(channel, y, x)`.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        return Err(MissError::ImageNotDivisible { height: h, width: w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let px = &img.pixels;
    let mut out = Tensor::zeros((gh * gw, 3 * patch * patch));
    for py in 0..gh {
        for pxi in 0..gw {
            let mut row = out.row_mut(py * gw + pxi);
            let mut k = 0;
            for c in 0..3 {
                for y in 0..patch {
                    for x in 0..patch {
                        row[k] = px[[c, py * patch + y, pxi * patch + x]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn init_params<R: Rng>(init: &mut Init<'_, R>, cfg: &EncoderConfig) {
    let d = cfg.d;
    init.linear("vision.patch", 3 * cfg.patch_size * cfg.patch_size, d);
    init.normal("vision.cls".into(), 1, d);
    init.normal("vision.pos".into(), cfg.num_patches() + 1, d);
    for i in 0..cfg.depth {
        let p = format!("vision.layers.{i}");
        init.layer_norm(&format!("{p}.ln1"), d);
        nn::init_attention(init, &format!("{p}.attn"), d);
        init.layer_norm(&format!("{p}.ln2"), d);
        nn::init_ffn(init, &format!("{p}.ffn"), d, cfg.ffn_dim);
    }
    init.layer_norm("vision.ln_f", d);
}

/// Runs the encoder on the tape. Output is `[n+1, d]`.
pub fn encode_image(g: &mut Graph, ps: &ParamStore, cfg: &EncoderConfig, img: &ImageTensor) -> Result<Var> {
    cfg.validate()?;
    let patches = patchify(img, cfg.patch_size)?;
    let pos_shape = ps.expect("vision.pos")?.dim();
    if pos_shape != (patches.nrows() + 1, cfg.d) {
        return Err(MissError::shape(format!(
            "image gives {} patches but positional table is {:?}",
            patches.nrows(),
            pos_shape
        )));
    }
    let w_shape = ps.expect("vision.patch.w")?.dim();
    if w_shape.0 != patches.ncols() {
        return Err(MissError::shape(format!("patch width {} vs embedding {:?}", patches.ncols(), w_shape)));
    }
    let x = g.constant(patches);
    let tokens = nn::linear(g, ps, "vision.patch", x)?;
    let cls = g.param(ps, "vision.cls")?;
    let x = g.concat_rows(&[cls, tokens]);
    let pos = g.param(ps, "vision.pos")?;
    let mut x = g.add(x, pos);
    for i in 0..cfg.depth {
        let p = format!("vision.layers.{i}");
        let h = nn::layer_norm(g, ps, &format!("{p}.ln1"), x)?;
        let h = nn::multi_head_attention(g, ps, &format!("{p}.attn"), cfg.heads, h, h, None, None)?;
        x = g.add(x, h);
        let h = nn::layer_norm(g, ps, &format!("{p}.ln2"), x)?;
        let h = nn::ffn(g, ps, &format!("{p}.ffn"), h)?;
        x = g.add(x, h);
    }
    nn::layer_norm(g, ps, "vision.ln_f", x)
}

/// Forward-only convenience wrapper.
pub fn embed_image(ps: &ParamStore, cfg: &EncoderConfig, img: &ImageTensor) -> Result<ImageEmbeddings> {
    let mut g = Graph::inference();
    let v = encode_image(&mut g, ps, cfg, img)?;
    Ok(ImageEmbeddings(g.value(v).clone()))
}

/// Resamples a `[1 + old², d]` positional table to a `new`×`new` grid with
/// bilinear interpolation (half-pixel centers, edge clamped). The CLS row is
/// kept as is.
pub fn interpolate_positions(pos: &Tensor, old_grid: usize, new_grid: usize) -> Result<Tensor> {
    let d = pos.ncols();
    if pos.nrows() != old_grid * old_grid + 1 {
        return Err(MissError::shape(format!("positional table has {} rows, grid {old_grid}", pos.nrows())));
    }
    if old_grid == new_grid {
        return Ok(pos.clone());
    }
    let mut out = Tensor::zeros((new_grid * new_grid + 1, d));
    out.row_mut(0).assign(&pos.row(0));
    let scale = old_grid as f64 / new_grid as f64;
    let src = |i: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (old_grid - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(old_grid - 1);
        (lo, hi, c - lo as f64)
    };
    for y in 0..new_grid {
        let (y0, y1, fy) = src(y);
        for x in 0..new_grid {
            let (x0, x1, fx) = src(x);
            let at = |yy: usize, xx: usize| pos.row(1 + yy * old_grid + xx);
            let mut row = out.row_mut(1 + y * new_grid + x);
            for k in 0..d {
                let top = at(y0, x0)[k] * (1.0 - fx) + at(y0, x1)[k] * fx;
                let bottom = at(y1, x0)[k] * (1.0 - fx) + at(y1, x1)[k] * fx;
                row[k] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>() * 2.0 - 1.0)).unwrap()
    }

    fn params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut Init { store: &mut ps, rng: &mut rng, std: 0.2 }, cfg);
        ps
    }

    #[test]
    fn patchify_shapes() {
        assert_eq!(patchify(&random_image(224, 224, 0), 16).unwrap().dim(), (196, 768));
        assert_eq!(patchify(&random_image(32, 32, 0), 16).unwrap().dim(), (4, 768));
        let err = patchify(&random_image(30, 32, 0), 16).unwrap_err();
        assert!(err.to_string().starts_with("image not divisible by patch size"));
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = ImageTensor::new(Array3::from_elem((3, 32, 32), 0.25)).unwrap();
        let p = patchify(&img, 16).unwrap();
        for r in 1..p.nrows() {
            assert_eq!(p.row(r), p.row(0));
        }
    }

    #[test]
    fn patch_rows_follow_row_major_order() {
        let img = ImageTensor::new(Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64)).unwrap();
        let p = patchify(&img, 2).unwrap();
        // patch 1 is top row, right column: first element is (c=0, y=0, x=2)
        assert_eq!(p[[1, 0]], 2.0);
        // patch 2 is bottom-left: (c=0, y=2, x=0)
        assert_eq!(p[[2, 0]], 20.0);
        // last element of patch 3: (c=2, y=3, x=3)
        assert_eq!(p[[3, 11]], 233.0);
    }

    #[test]
    fn encode_shape_and_non_degeneracy() {
        let cfg = EncoderConfig { depth: 1, d: 8, heads: 2, ffn_dim: 16, patch_size: 16, image_size: 32 };
        let ps = params(&cfg, 1);
        let a = embed_image(&ps, &cfg, &random_image(32, 32, 1)).unwrap();
        let b = embed_image(&ps, &cfg, &random_image(32, 32, 2)).unwrap();
        assert_eq!(a.0.dim(), (5, 8));
        assert_ne!(a.cls(), b.cls());
        assert!(a.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let cfg = EncoderConfig { depth: 1, d: 8, heads: 2, ffn_dim: 16, patch_size: 16, image_size: 32 };
        let ps = params(&cfg, 1);
        assert!(matches!(embed_image(&ps, &cfg, &random_image(48, 48, 1)), Err(MissError::Shape(_))));
    }

    #[test]
    fn interpolation_identity_and_constant_field() {
        let pos = Tensor::from_shape_fn((5, 3), |(r, c)| (r * 3 + c) as f64);
        assert_eq!(interpolate_positions(&pos, 2, 2).unwrap(), pos);
        let flat = Tensor::from_shape_fn((5, 2), |(r, _)| if r == 0 { 9.0 } else { 1.5 });
        let up = interpolate_positions(&flat, 2, 3).unwrap();
        assert_eq!(up.dim(), (10, 2));
        assert_eq!(up[[0, 0]], 9.0);
        assert!(up.rows().into_iter().skip(1).all(|r| r.iter().all(|&v| (v - 1.5).abs() < 1e-12)));
    }
}
