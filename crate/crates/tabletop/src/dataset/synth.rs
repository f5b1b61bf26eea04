//! Synthetic tabletop scenes: antialiased silhouettes on black, one per
//! (object, instance, height, angle, sample) cell.
//!
//! Orientation is rotation by `class * 45°`. Camera height is simulated
//! by a vertical foreshortening plus mild shear, applied in object
//! coordinates before the class rotation so that rotating a rendered A1
//! canvas by an exact multiple of 90° reproduces the A3/A5/A7 renders
//! bit for bit. Class rotations use exact trig values for the same
//! reason. The mouse is a near-symmetric ellipse on purpose: its A_k
//! and A_{k+4} classes are almost indistinguishable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    assign_h1_splits, pgm, AngleClass, Height, Manifest, ManifestRow, ObjectKind, Split,
    ALL_OBJECTS,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Distinct object instances per class, 1..=10.
    pub instances: usize,
    /// Samples per (object, height, angle) cell; instances rotate within.
    pub per_cell: usize,
    /// Additive Gaussian pixel noise sigma.
    pub noise: f64,
    pub seed: u64,
    /// Square canvas edge, >= 32.
    pub resolution: usize,
    /// Fraction of H1 samples assigned to the validation split.
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            instances: 10,
            per_cell: 10,
            noise: 0.02,
            seed: 7,
            resolution: 64,
            val_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::Config(format!(
                "resolution must be >= 32, got {}",
                self.resolution
            )));
        }
        if !(1..=10).contains(&self.instances) {
            return Err(Error::Config(format!(
                "instances must be in 1..=10, got {}",
                self.instances
            )));
        }
        if self.per_cell == 0 {
            return Err(Error::Config("per_cell must be >= 1".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        ALL_OBJECTS.len() * 2 * 8 * self.per_cell
    }
}

/// Per-instance silhouette parameters, in canvas half-extent units.
#[derive(Debug, Clone)]
pub struct InstanceShape {
    /// Overall scale multiplier.
    pub size: f64,
    /// Stapler/mouse elongation ratio.
    pub aspect: f64,
    /// Stapler notch / mug handle scale.
    pub feature: f64,
    /// Mouse front-bump size; 0 gives an exactly point-symmetric mouse.
    pub asym: f64,
    /// Small fixed rotation offset, degrees.
    pub rot_deg: f64,
}

impl InstanceShape {
    pub fn nominal(object: ObjectKind) -> Self {
        match object {
            ObjectKind::Stapler => InstanceShape {
                size: 1.0,
                aspect: 5.0,
                feature: 1.3,
                asym: 0.0,
                rot_deg: 0.0,
            },
            ObjectKind::Mug => InstanceShape {
                size: 1.0,
                aspect: 1.0,
                feature: 1.0,
                asym: 0.0,
                rot_deg: 0.0,
            },
            ObjectKind::Mouse => InstanceShape {
                size: 1.0,
                aspect: 1.4,
                feature: 1.0,
                asym: 0.12,
                rot_deg: 0.0,
            },
        }
    }

    /// Deterministic per-instance jitter around the nominal shape.
    pub fn jittered(object: ObjectKind, instance: u8, seed: u64) -> Self {
        let mut rng = cell_rng(seed, object, instance, 0xF00D, 0, 0);
        let mut shape = Self::nominal(object);
        shape.size *= rng.gen_range(0.92..1.08);
        shape.aspect *= rng.gen_range(0.95..1.05);
        shape.feature *= rng.gen_range(0.9..1.1);
        if object == ObjectKind::Mouse {
            shape.asym = rng.gen_range(0.08..0.16);
        }
        shape.rot_deg = rng.gen_range(-5.0..5.0);
        shape
    }
}

/// Exact (cos, sin) of `k * 45°`.
fn class_trig(angle: AngleClass) -> (f64, f64) {
    const R: f64 = std::f64::consts::FRAC_1_SQRT_2;
    match angle.index() {
        0 => (1.0, 0.0),
        1 => (R, R),
        2 => (0.0, 1.0),
        3 => (-R, R),
        4 => (-1.0, 0.0),
        5 => (-R, -R),
        6 => (0.0, -1.0),
        7 => (R, -R),
        _ => unreachable!(),
    }
}

/// Vertical foreshortening and shear standing in for camera height.
fn height_distortion(height: Height) -> (f64, f64) {
    match height {
        Height::H1 => (0.9, 0.0),
        Height::H2 => (0.6, 0.15),
    }
}

fn dist_point_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (abx, aby) = (bx - ax, by - ay);
    let (apx, apy) = (px - ax, py - ay);
    let t = ((apx * abx + apy * aby) / (abx * abx + aby * aby)).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * abx, ay + t * aby);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn circle_sdf(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> f64 {
    ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r
}

/// Signed distance of the object silhouette in object coordinates
/// (canvas half-extent = 1). Negative inside.
fn object_sdf(object: ObjectKind, shape: &InstanceShape, x: f64, y: f64) -> f64 {
    match object {
        ObjectKind::Stapler => {
            // Rounded bar along x with a bite taken out of one end's top
            // edge; the bite is the only cue separating A_k from A_{k+4}.
            let half_len = 0.62 * shape.size;
            let rad = half_len / shape.aspect;
            let cap = half_len - rad;
            let bar = dist_point_segment(x, y, -cap, 0.0, cap, 0.0) - rad;
            let notch = circle_sdf(x, y, 0.5 * half_len, 0.9 * rad, shape.feature * rad);
            bar.max(-notch)
        }
        ObjectKind::Mug => {
            // Disc body with a handle stub protruding along +x.
            let body_r = 0.30 * shape.size;
            let body = circle_sdf(x, y, 0.0, 0.0, body_r);
            let handle_r = 0.34 * body_r * shape.feature;
            let handle_len = body_r + 0.42 * body_r * shape.feature;
            let handle = dist_point_segment(x, y, 0.75 * body_r, 0.0, handle_len, 0.0) - handle_r;
            body.min(handle)
        }
        ObjectKind::Mouse => {
            // Near-symmetric ellipse; an optional small bump at the front
            // tip is the only 180° cue.
            let r = 0.30 * shape.size;
            let a = r * shape.aspect.sqrt();
            let b = r / shape.aspect.sqrt();
            let g = (x / a).powi(2) + (y / b).powi(2) - 1.0;
            let grad = 2.0 * ((x / (a * a)).powi(2) + (y / (b * b)).powi(2)).sqrt();
            let ellipse = g / grad;
            if shape.asym == 0.0 {
                ellipse
            } else {
                let bump_r = shape.asym * r;
                ellipse.min(circle_sdf(x, y, 0.95 * a, 0.0, bump_r))
            }
        }
    }
}

fn render_with_translation(
    object: ObjectKind,
    shape: &InstanceShape,
    angle: AngleClass,
    height: Height,
    resolution: usize,
    tx: f64,
    ty: f64,
) -> Tensor<f32> {
    let half = resolution as f64 / 2.0;
    let (cos_c, sin_c) = class_trig(angle);
    let jitter = shape.rot_deg.to_radians();
    let (cos_j, sin_j) = (jitter.cos(), jitter.sin());
    let (scale_y, shear) = height_distortion(height);

    let mut img = Tensor::zeros(&[1, resolution, resolution]);
    for row in 0..resolution {
        let py = (row as f64 + 0.5 - half) / half - ty;
        for col in 0..resolution {
            let px = (col as f64 + 0.5 - half) / half - tx;
            // Undo class rotation (exact), then jitter rotation, then the
            // height distortion, landing in object coordinates.
            let (rx, ry) = (cos_c * px + sin_c * py, -sin_c * px + cos_c * py);
            let (ux, uy) = (cos_j * rx + sin_j * ry, -sin_j * rx + cos_j * ry);
            let qx = ux - shear * uy;
            let qy = uy / scale_y;
            let d_px = object_sdf(object, shape, qx, qy) * half;
            let alpha = (0.5 - d_px / 1.5).clamp(0.0, 1.0);
            img.set3(0, row, col, alpha as f32);
        }
    }
    img
}

/// Render one noiseless, centered silhouette.
pub fn render_silhouette(
    object: ObjectKind,
    shape: &InstanceShape,
    angle: AngleClass,
    height: Height,
    resolution: usize,
) -> Tensor<f32> {
    render_with_translation(object, shape, angle, height, resolution, 0.0, 0.0)
}

fn cell_rng(seed: u64, object: ObjectKind, instance: u8, tag: u64, ha: u64, k: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    let words = [
        seed,
        tag ^ ((object.class_index() as u64) << 8 | instance as u64),
        ha,
        k,
    ];
    for (chunk, word) in bytes.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Generate the full synthetic archive (PGMs plus manifest) under
/// `out_dir`. Deterministic: the same config writes identical bytes.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(config.total_images());
    for object in ALL_OBJECTS {
        let obj_dir = out_dir.join(object.as_str());
        std::fs::create_dir_all(&obj_dir).map_err(|e| Error::io(&obj_dir, e))?;
        for height in [Height::H1, Height::H2] {
            for angle in AngleClass::all() {
                for k in 0..config.per_cell {
                    let instance = (k % config.instances) as u8 + 1;
                    let shape = InstanceShape::jittered(object, instance, config.seed);
                    let ha = (matches!(height, Height::H2) as u64) << 32 | angle.index() as u64;
                    let mut rng =
                        cell_rng(config.seed, object, instance, 0x5A11, ha, k as u64);
                    let tx = rng.gen_range(-0.06..0.06);
                    let ty = rng.gen_range(-0.06..0.06);
                    let mut img = render_with_translation(
                        object,
                        &shape,
                        angle,
                        height,
                        config.resolution,
                        tx,
                        ty,
                    );
                    if config.noise > 0.0 {
                        let normal = Normal::new(0.0, config.noise)
                            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
                        for v in img.data_mut() {
                            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
                        }
                    }
                    let file = format!(
                        "{}_{:02}_{}_{}_{:04}.pgm",
                        object.as_str(),
                        instance,
                        height,
                        angle.label(),
                        k
                    );
                    pgm::write_pgm(&obj_dir.join(&file), &pgm::tensor_to_pgm(&img)?)?;
                    rows.push(ManifestRow {
                        path: format!("{}/{file}", object.as_str()),
                        object,
                        instance,
                        height,
                        angle,
                        dx: 0,
                        dy: 0,
                        split: if height == Height::H2 {
                            Split::Test
                        } else {
                            Split::Train
                        },
                    });
                }
            }
        }
    }
    assign_h1_splits(&mut rows, config.val_fraction, config.seed)?;
    let manifest = Manifest { rows };
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a1_h1_stapler_principal_axis_horizontal() {
        let shape = InstanceShape::nominal(ObjectKind::Stapler);
        let img = render_silhouette(
            ObjectKind::Stapler,
            &shape,
            AngleClass::new(0).unwrap(),
            Height::H1,
            64,
        );
        // Second-moment orientation of the silhouette.
        let (mut m, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..64 {
            for x in 0..64 {
                let v = img.at3(0, y, x) as f64;
                m += v;
                mx += v * x as f64;
                my += v * y as f64;
            }
        }
        let (cx, cy) = (mx / m, my / m);
        let (mut u20, mut u02, mut u11) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..64 {
            for x in 0..64 {
                let v = img.at3(0, y, x) as f64;
                u20 += v * (x as f64 - cx).powi(2);
                u02 += v * (y as f64 - cy).powi(2);
                u11 += v * (x as f64 - cx) * (y as f64 - cy);
            }
        }
        let theta = 0.5 * (2.0 * u11).atan2(u20 - u02);
        assert!(
            theta.to_degrees().abs() < 5.0,
            "principal axis at {:.2}°",
            theta.to_degrees()
        );
        assert!(u20 > 2.0 * u02, "silhouette not elongated along x");
    }

    #[test]
    fn a3_equals_a1_rotated_90_degrees() {
        let n = 64;
        for object in ALL_OBJECTS {
            let shape = InstanceShape::jittered(object, 4, 123);
            for height in [Height::H1, Height::H2] {
                let a1 =
                    render_silhouette(object, &shape, AngleClass::new(0).unwrap(), height, n);
                let a3 =
                    render_silhouette(object, &shape, AngleClass::new(2).unwrap(), height, n);
                for i in 0..n {
                    for j in 0..n {
                        assert_eq!(
                            a3.at3(0, i, j),
                            a1.at3(0, n - 1 - j, i),
                            "{object} {height} mismatch at ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_mouse_a1_a5_near_identical() {
        let mut shape = InstanceShape::nominal(ObjectKind::Mouse);
        shape.asym = 0.0;
        let a1 = render_silhouette(
            ObjectKind::Mouse,
            &shape,
            AngleClass::new(0).unwrap(),
            Height::H1,
            64,
        );
        let a5 = render_silhouette(
            ObjectKind::Mouse,
            &shape,
            AngleClass::new(4).unwrap(),
            Height::H1,
            64,
        );
        let mean_abs: f32 = a1
            .data()
            .iter()
            .zip(a5.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / a1.len() as f32;
        assert!(mean_abs < 0.01, "mean abs diff {mean_abs}");
    }

    #[test]
    fn default_mouse_has_a_faint_front_cue() {
        let shape = InstanceShape::nominal(ObjectKind::Mouse);
        let a1 = render_silhouette(
            ObjectKind::Mouse,
            &shape,
            AngleClass::new(0).unwrap(),
            Height::H1,
            64,
        );
        let a5 = render_silhouette(
            ObjectKind::Mouse,
            &shape,
            AngleClass::new(4).unwrap(),
            Height::H1,
            64,
        );
        assert!(a1.data().iter().zip(a5.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn resolution_below_32_rejected() {
        let config = SynthConfig {
            resolution: 31,
            ..SynthConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn heights_differ_visibly() {
        let shape = InstanceShape::nominal(ObjectKind::Mug);
        let h1 = render_silhouette(
            ObjectKind::Mug,
            &shape,
            AngleClass::new(0).unwrap(),
            Height::H1,
            64,
        );
        let h2 = render_silhouette(
            ObjectKind::Mug,
            &shape,
            AngleClass::new(0).unwrap(),
            Height::H2,
            64,
        );
        let diff: f32 = h1
            .data()
            .iter()
            .zip(h2.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / h1.len() as f32;
        assert!(diff > 0.02, "H1 and H2 renders nearly identical ({diff})");
    }
}
