//! Differentiable bilinear sampling and continuous-center patch cropping.
//!
//! The crop is what lets the patch-selection policy train end to end: a patch
//! center moves continuously, every output pixel is a bilinear blend of four
//! lattice neighbors, and gradients flow both into the image values and into
//! the center coordinates. Storage is f32; the kernel math runs in f64 so the
//! analytic gradients are clean enough to check against finite differences.

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};

/// One frame (or patch): channels x height x width, all values finite.
#[derive(Debug, Clone)]
pub struct ImageGrid {
    data: Array3<f32>,
}

impl ImageGrid {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (_, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
        if h < 2 || w < 2 {
            return Err(Error::invalid_input(format!(
                "image must be at least 2x2, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("image contains non-finite values"));
        }
        Ok(ImageGrid { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Continuous patch selection: normalized center in [0,1]^2 plus a fixed
/// side length in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub cx: f64,
    pub cy: f64,
    pub size_px: usize,
}

impl PatchSpec {
    pub fn new(cx: f64, cy: f64, size_px: usize) -> Result<Self> {
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid_input("patch center must be finite"));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::invalid_input(format!(
                "patch center ({cx}, {cy}) outside [0,1]^2"
            )));
        }
        if size_px < 1 {
            return Err(Error::invalid_input("patch size must be >= 1"));
        }
        Ok(PatchSpec { cx, cy, size_px })
    }
}

/// Values and coordinate derivatives for a batch of sample points.
pub struct SampleGrads {
    /// (points, channels) sampled values
    pub values: Array2<f64>,
    /// (points, channels) d(value)/dx
    pub ddx: Array2<f64>,
    /// (points, channels) d(value)/dy
    pub ddy: Array2<f64>,
}

/// Four-neighbor lookup at one continuous pixel coordinate.
///
/// Returns the lattice corners (x0,x1,y0,y1) and fractional offsets after
/// clamping the point into [0, W-1] x [0, H-1].
fn corners(x: f64, y: f64, h: usize, w: usize) -> (usize, usize, usize, usize, f64, f64) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x0 = x0.min(w - 1);
    let y0 = y0.min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, x1, y0, y1, x - x0 as f64, y - y0 as f64)
}

/// Sample an image at continuous pixel coordinates.
///
/// Points are clamped to the frame before lookup. The value at each point is
/// the bilinear blend of its four lattice neighbors, so sampling at integer
/// coordinates reproduces stored pixels exactly.
pub fn bilinear_sample(image: &ImageGrid, points: &[(f64, f64)]) -> Result<Array2<f32>> {
    let g = bilinear_sample_grad(image, points)?;
    Ok(g.values.mapv(|v| v as f32))
}

/// Like [`bilinear_sample`] but also returns analytic coordinate derivatives.
///
/// Derivatives are taken with respect to the raw (pre-clamp) coordinates:
/// zero outside the frame, the usual piecewise-linear slope inside.
pub fn bilinear_sample_grad(image: &ImageGrid, points: &[(f64, f64)]) -> Result<SampleGrads> {
    for &(x, y) in points {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid_input(format!(
                "non-finite sample coordinate ({x}, {y})"
            )));
        }
    }
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let img = image.data();
    let mut values = Array2::<f64>::zeros((points.len(), c));
    let mut ddx = Array2::<f64>::zeros((points.len(), c));
    let mut ddy = Array2::<f64>::zeros((points.len(), c));
    for (pi, &(x, y)) in points.iter().enumerate() {
        let inside_x = (0.0..=(w - 1) as f64).contains(&x);
        let inside_y = (0.0..=(h - 1) as f64).contains(&y);
        let (x0, x1, y0, y1, fx, fy) = corners(x, y, h, w);
        for ci in 0..c {
            let p00 = img[[ci, y0, x0]] as f64;
            let p10 = img[[ci, y0, x1]] as f64;
            let p01 = img[[ci, y1, x0]] as f64;
            let p11 = img[[ci, y1, x1]] as f64;
            values[[pi, ci]] = (1.0 - fx) * (1.0 - fy) * p00
                + fx * (1.0 - fy) * p10
                + (1.0 - fx) * fy * p01
                + fx * fy * p11;
            if inside_x {
                ddx[[pi, ci]] = (1.0 - fy) * (p10 - p00) + fy * (p11 - p01);
            }
            if inside_y {
                ddy[[pi, ci]] = (1.0 - fx) * (p01 - p00) + fx * (p11 - p10);
            }
        }
    }
    Ok(SampleGrads { values, ddx, ddy })
}

/// Window-fit bounds for a normalized center, in normalized units.
fn center_bounds(size_px: usize, dim: usize) -> (f64, f64) {
    let lo = ((size_px - 1) as f64 / 2.0) / (dim - 1) as f64;
    (lo, 1.0 - lo)
}

/// Clip a patch center so the full window lies inside an H x W frame.
///
/// Operates in normalized coordinates, so applying it twice is a no-op
/// bit for bit. The clip is hard: callers treating the center as a learnable
/// quantity get zero gradient outside the admissible interval.
pub fn clamp_center(spec: &PatchSpec, h: usize, w: usize) -> Result<PatchSpec> {
    if spec.size_px > h.min(w) {
        return Err(Error::invalid_config(format!(
            "patch size {} exceeds frame {}x{}",
            spec.size_px, h, w
        )));
    }
    let (lox, hix) = center_bounds(spec.size_px, w);
    let (loy, hiy) = center_bounds(spec.size_px, h);
    Ok(PatchSpec {
        cx: spec.cx.clamp(lox, hix),
        cy: spec.cy.clamp(loy, hiy),
        size_px: spec.size_px,
    })
}

/// Pixel-space rectangle of the clamped window: (x0, y0) top-left corner.
/// Exposed so overlays and IoU checks use exactly the crop's geometry.
pub fn patch_rect(spec: &PatchSpec, h: usize, w: usize) -> Result<(f64, f64)> {
    let clamped = clamp_center(spec, h, w)?;
    let half = (spec.size_px - 1) as f64 / 2.0;
    let x0 = clamped.cx * (w - 1) as f64 - half;
    let y0 = clamped.cy * (h - 1) as f64 - half;
    Ok((x0.max(0.0), y0.max(0.0)))
}

/// Crop a P x P patch around a continuous center.
///
/// The center is clamped so the window always fits; output pixel (i, j) is the
/// bilinear sample at (x0 + j, y0 + i) of the clamped window's top-left
/// (x0, y0). Gradients with respect to the center flow through
/// [`crop_backward_array`].
pub fn crop_patch(image: &ImageGrid, spec: &PatchSpec) -> Result<ImageGrid> {
    let (h, w) = (image.height(), image.width());
    if spec.size_px > h.min(w) {
        return Err(Error::invalid_config(format!(
            "patch size {} exceeds frame {}x{}",
            spec.size_px, h, w
        )));
    }
    let patch = crop_forward_array(&image.data().view(), spec.cx, spec.cy, spec.size_px);
    ImageGrid::new(patch)
}

/// Array-level crop forward used by both [`crop_patch`] and the autodiff op.
/// `cx`/`cy` are normalized; clamping happens here.
pub fn crop_forward_array(image: &ArrayView3<f32>, cx: f64, cy: f64, size: usize) -> Array3<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (x0, y0) = window_origin(cx, cy, size, h, w);
    let mut out = Array3::<f32>::zeros((c, size, size));
    for i in 0..size {
        let y = y0 + i as f64;
        for j in 0..size {
            let x = x0 + j as f64;
            let (xa, xb, ya, yb, fx, fy) = corners(x, y, h, w);
            for ci in 0..c {
                let p00 = image[[ci, ya, xa]] as f64;
                let p10 = image[[ci, ya, xb]] as f64;
                let p01 = image[[ci, yb, xa]] as f64;
                let p11 = image[[ci, yb, xb]] as f64;
                out[[ci, i, j]] = ((1.0 - fx) * (1.0 - fy) * p00
                    + fx * (1.0 - fy) * p10
                    + (1.0 - fx) * fy * p01
                    + fx * fy * p11) as f32;
            }
        }
    }
    out
}

/// Backward pass of the crop: gradients for the image and for the normalized
/// center. Center gradient is zero along an axis whose raw center fell
/// outside the clamp interval.
pub fn crop_backward_array(
    image: &ArrayView3<f32>,
    cx: f64,
    cy: f64,
    size: usize,
    gpatch: &ArrayView3<f32>,
) -> (Array3<f32>, f64, f64) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (x0, y0) = window_origin(cx, cy, size, h, w);
    let (lox, hix) = center_bounds(size, w);
    let (loy, hiy) = center_bounds(size, h);
    let pass_x = (lox..=hix).contains(&cx);
    let pass_y = (loy..=hiy).contains(&cy);

    let mut gimg = Array3::<f32>::zeros((c, h, w));
    let mut gcx = 0.0f64;
    let mut gcy = 0.0f64;
    for i in 0..size {
        let y = y0 + i as f64;
        for j in 0..size {
            let x = x0 + j as f64;
            let (xa, xb, ya, yb, fx, fy) = corners(x, y, h, w);
            for ci in 0..c {
                let g = gpatch[[ci, i, j]] as f64;
                gimg[[ci, ya, xa]] += (g * (1.0 - fx) * (1.0 - fy)) as f32;
                gimg[[ci, ya, xb]] += (g * fx * (1.0 - fy)) as f32;
                gimg[[ci, yb, xa]] += (g * (1.0 - fx) * fy) as f32;
                gimg[[ci, yb, xb]] += (g * fx * fy) as f32;
                if pass_x {
                    let p00 = image[[ci, ya, xa]] as f64;
                    let p10 = image[[ci, ya, xb]] as f64;
                    let p01 = image[[ci, yb, xa]] as f64;
                    let p11 = image[[ci, yb, xb]] as f64;
                    gcx += g * ((1.0 - fy) * (p10 - p00) + fy * (p11 - p01));
                }
                if pass_y {
                    let p00 = image[[ci, ya, xa]] as f64;
                    let p10 = image[[ci, ya, xb]] as f64;
                    let p01 = image[[ci, yb, xa]] as f64;
                    let p11 = image[[ci, yb, xb]] as f64;
                    gcy += g * ((1.0 - fx) * (p01 - p00) + fx * (p11 - p10));
                }
            }
        }
    }
    // chain rule through the normalized -> pixel mapping
    gcx *= (w - 1) as f64;
    gcy *= (h - 1) as f64;
    (gimg, gcx, gcy)
}

fn window_origin(cx: f64, cy: f64, size: usize, h: usize, w: usize) -> (f64, f64) {
    let (lox, hix) = center_bounds(size, w);
    let (loy, hiy) = center_bounds(size, h);
    let half = (size - 1) as f64 / 2.0;
    let cxp = cx.clamp(lox, hix) * (w - 1) as f64;
    let cyp = cy.clamp(loy, hiy) * (h - 1) as f64;
    // belt-and-braces against float residue at the edges
    let x0 = (cxp - half).clamp(0.0, (w - size) as f64);
    let y0 = (cyp - half).clamp(0.0, (h - size) as f64);
    (x0, y0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0f32..1.0));
        ImageGrid::new(data).unwrap()
    }

    /// Smooth synthetic frame: sum of low-frequency sinusoids, so coordinate
    /// gradients are informative everywhere.
    fn smooth_image(c: usize, h: usize, w: usize) -> ImageGrid {
        let data = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            let xf = x as f32 / w as f32;
            let yf = y as f32 / h as f32;
            ((xf * 5.1 + ci as f32).sin() + (yf * 3.7 - ci as f32 * 0.5).cos()) * 0.5
        });
        ImageGrid::new(data).unwrap()
    }

    #[test]
    fn integer_coordinates_reproduce_stored_pixels() {
        let img = random_image(2, 5, 7, 3);
        let mut points = Vec::new();
        for y in 0..5 {
            for x in 0..7 {
                points.push((x as f64, y as f64));
            }
        }
        let vals = bilinear_sample(&img, &points).unwrap();
        let mut k = 0;
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..2 {
                    assert!((vals[[k, c]] - img.data()[[c, y, x]]).abs() < 1e-6);
                }
                k += 1;
            }
        }
    }

    #[test]
    fn midpoint_of_two_pixels_is_their_mean() {
        let data = Array3::from_shape_vec((1, 1, 2), vec![0.0f32, 1.0]).unwrap();
        // 1x2 is below the 2x2 floor for ImageGrid; embed in 2x2 with equal rows
        let data = ndarray::concatenate(
            ndarray::Axis(1),
            &[data.view(), Array3::from_shape_vec((1, 1, 2), vec![0.0f32, 1.0]).unwrap().view()],
        )
        .unwrap();
        let img = ImageGrid::new(data).unwrap();
        let vals = bilinear_sample(&img, &[(0.5, 0.0)]).unwrap();
        assert!((vals[[0, 0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn coordinate_gradients_match_finite_differences() {
        let img = random_image(1, 8, 8, 42);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let h = 1e-3;
        for _ in 0..50 {
            // keep fractional parts away from lattice lines where the
            // interpolant's slope jumps
            let x = rng.gen_range(1..6) as f64 + rng.gen_range(0.1..0.9);
            let y = rng.gen_range(1..6) as f64 + rng.gen_range(0.1..0.9);
            let g = bilinear_sample_grad(&img, &[(x, y)]).unwrap();
            let vxp = bilinear_sample_grad(&img, &[(x + h, y)]).unwrap().values[[0, 0]];
            let vxm = bilinear_sample_grad(&img, &[(x - h, y)]).unwrap().values[[0, 0]];
            let vyp = bilinear_sample_grad(&img, &[(x, y + h)]).unwrap().values[[0, 0]];
            let vym = bilinear_sample_grad(&img, &[(x, y - h)]).unwrap().values[[0, 0]];
            let fdx = (vxp - vxm) / (2.0 * h);
            let fdy = (vyp - vym) / (2.0 * h);
            let denom_x = g.ddx[[0, 0]].abs().max(fdx.abs()).max(1e-6);
            let denom_y = g.ddy[[0, 0]].abs().max(fdy.abs()).max(1e-6);
            assert!((g.ddx[[0, 0]] - fdx).abs() / denom_x < 1e-3);
            assert!((g.ddy[[0, 0]] - fdy).abs() / denom_y < 1e-3);
        }
    }

    #[test]
    fn sampled_value_only_depends_on_four_neighbors() {
        let img = random_image(1, 6, 6, 9);
        let point = (2.3, 3.6);
        let before = bilinear_sample(&img, &[point]).unwrap()[[0, 0]];
        let mut data = img.data().clone();
        data[[0, 0, 0]] += 10.0; // far away from the (2..3, 3..4) cell
        data[[0, 5, 5]] -= 5.0;
        let img2 = ImageGrid::new(data).unwrap();
        let after = bilinear_sample(&img2, &[point]).unwrap()[[0, 0]];
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_coordinates_are_rejected() {
        let img = random_image(1, 4, 4, 1);
        assert!(bilinear_sample(&img, &[(f64::NAN, 0.0)]).is_err());
        assert!(bilinear_sample(&img, &[(0.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let img = random_image(3, 6, 6, 5);
        for &(cx, cy) in &[(0.0, 0.0), (1.0, 1.0), (0.3, 0.8)] {
            let spec = PatchSpec::new(cx, cy, 6).unwrap();
            let patch = crop_patch(&img, &spec).unwrap();
            for (a, b) in patch.data().iter().zip(img.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_image_crops_to_constant_patch() {
        let img = ImageGrid::new(Array3::from_elem((2, 9, 9), 0.37f32)).unwrap();
        for &(cx, cy) in &[(0.0, 0.0), (0.5, 0.5), (0.91, 0.13)] {
            let spec = PatchSpec::new(cx, cy, 4).unwrap();
            let patch = crop_patch(&img, &spec).unwrap();
            for &v in patch.data().iter() {
                assert!((v - 0.37).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oversized_patch_is_invalid_config() {
        let img = random_image(1, 4, 4, 2);
        let spec = PatchSpec::new(0.5, 0.5, 5).unwrap();
        assert!(matches!(crop_patch(&img, &spec), Err(crate::error::Error::InvalidConfig(_))));
    }

    #[test]
    fn crop_center_gradients_match_finite_differences() {
        let img = smooth_image(2, 16, 16);
        let size = 6;
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let h = 1e-3;
        let loss = |cx: f64, cy: f64| -> f64 {
            crop_forward_array(&img.data().view(), cx, cy, size)
                .iter()
                .map(|&v| v as f64)
                .sum()
        };
        // every sample point of a crop shares the window ORIGIN's fractional
        // part (origin = center*(dim-1) - (size-1)/2), so one snap keeps all
        // of them away from lattice lines where the bilinear slope is
        // discontinuous
        let half = (size - 1) as f64 / 2.0;
        let snap = |c: f64| -> f64 {
            let origin = c * 15.0 - half;
            let frac = origin - origin.floor();
            let safe = 0.2 + 0.6 * frac;
            (origin.floor() + safe + half) / 15.0
        };
        for _ in 0..30 {
            // interior centers away from the clamp boundary
            let cx = snap(rng.gen_range(0.3..0.7));
            let cy = snap(rng.gen_range(0.3..0.7));
            let ones = Array3::<f32>::ones((2, size, size));
            let (_, gcx, gcy) =
                crop_backward_array(&img.data().view(), cx, cy, size, &ones.view());
            let fdx = (loss(cx + h, cy) - loss(cx - h, cy)) / (2.0 * h);
            let fdy = (loss(cx, cy + h) - loss(cx, cy - h)) / (2.0 * h);
            let dx = (gcx - fdx).abs() / gcx.abs().max(fdx.abs()).max(1e-6);
            let dy = (gcy - fdy).abs() / gcy.abs().max(fdy.abs()).max(1e-6);
            assert!(dx < 1e-3, "gcx {gcx} vs fd {fdx}");
            assert!(dy < 1e-3, "gcy {gcy} vs fd {fdy}");
        }
    }

    #[test]
    fn clamp_keeps_interior_center_unchanged() {
        let spec = PatchSpec::new(0.5, 0.5, 8).unwrap();
        let out = clamp_center(&spec, 16, 16).unwrap();
        assert_eq!(out, spec);
    }

    #[test]
    fn clamp_clips_boundary_center_to_half_patch() {
        // cx = 0 with P = H/2 on a square frame: pixel center must be (P-1)/2
        let h = 16;
        let p = 8;
        let spec = PatchSpec::new(0.0, 0.5, p).unwrap();
        let out = clamp_center(&spec, h, h).unwrap();
        let pixel_cx = out.cx * (h - 1) as f64;
        assert!((pixel_cx - (p - 1) as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn clamp_is_idempotent_on_random_specs() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..100 {
            let spec = PatchSpec::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 8).unwrap();
            let once = clamp_center(&spec, 20, 14).unwrap();
            let twice = clamp_center(&once, 20, 14).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn clamped_window_always_fits_in_frame() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let h = rng.gen_range(8..40);
            let w = rng.gen_range(8..40);
            let p = rng.gen_range(1..=h.min(w));
            let spec = PatchSpec::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), p).unwrap();
            let (x0, y0) = patch_rect(&spec, h, w).unwrap();
            assert!(x0 >= -1e-9 && x0 + p as f64 <= w as f64 + 1e-9);
            assert!(y0 >= -1e-9 && y0 + p as f64 <= h as f64 + 1e-9);
        }
    }
}
