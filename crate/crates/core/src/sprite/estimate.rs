//! Recovers sprite geometry and color from a rendered or generated image.
//!
//! The face is segmented against the known background color, its extent gives
//! center and scale, eyes are located by the centroid of dark mass in each
//! half of the eye band, and skin color is fit on the forehead.

use super::render::{skin_color, FaceGeometry, BACKGROUND};
use super::spec::FaceSpec;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

const FOREGROUND_THRESHOLD: f32 = 0.1;

fn luminance(p: [f32; 3]) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

fn is_foreground(p: [f32; 3]) -> bool {
    (0..3).any(|c| (p[c] - BACKGROUND[c]).abs() > FOREGROUND_THRESHOLD)
}

/// Inclusive extent of indices whose count reaches `min_count`.
fn extent(counts: &[usize], min_count: usize) -> Option<(usize, usize)> {
    let first = counts.iter().position(|&c| c >= min_count)?;
    let last = counts.iter().rposition(|&c| c >= min_count)?;
    Some((first, last))
}

/// Horizontal centroid of dark mass in one half of the eye band, in pixels.
/// Dark pixels are those well below the forehead luminance `reference`.
fn dark_centroid(lum: &[f64], size: usize, geom: &FaceGeometry, side: f64, reference: f64) -> Option<f64> {
    let s = size as f64;
    let (mut mass, mut moment) = (0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let u = (px - geom.cx) / geom.a;
            let v = (py - geom.eye_y) / geom.b;
            let r2 = u * u + ((py - geom.cy) / geom.b).powi(2);
            if v.abs() > 0.3 || u * side < 0.1 || r2 > 0.9 {
                continue;
            }
            let w = (0.6 * reference - lum[y * size + x]).max(0.0);
            mass += w;
            moment += w * x as f64;
        }
    }
    (mass > 1e-6).then(|| moment / mass)
}

/// Estimates the geometry and coloring of the face in `image`. Accessory
/// flags are left empty.
pub fn estimate_face_spec(image: &ImageTensor) -> Result<FaceSpec> {
    let size = image.size();
    let s = size as f64;
    let mut cols = vec![0usize; size];
    let mut rows = vec![0usize; size];
    let mut total = 0usize;
    for (y, row) in rows.iter_mut().enumerate() {
        for (x, col) in cols.iter_mut().enumerate() {
            if is_foreground(image.pixel(y, x)) {
                *col += 1;
                *row += 1;
                total += 1;
            }
        }
    }
    if total < size * size / 20 {
        return Err(Error::PlacementFailure(format!("only {total} foreground pixels")));
    }
    let min_count = (size / 16).max(2);
    let (x0, x1) = extent(&cols, min_count).ok_or_else(|| Error::PlacementFailure("no face columns".into()))?;
    let (y0, y1) = extent(&rows, min_count).ok_or_else(|| Error::PlacementFailure("no face rows".into()))?;
    let a = (x1 - x0 + 1) as f64 / (2.0 * s);
    let b = (y1 - y0 + 1) as f64 / (2.0 * s);
    let aspect = a / b;
    if !(0.5..=1.3).contains(&aspect) {
        return Err(Error::PlacementFailure(format!("implausible face aspect {aspect:.2}")));
    }
    let cx = (x0 + x1 + 1) as f64 / (2.0 * s);

    let mut spec = FaceSpec {
        face_scale: FaceGeometry::scale_from_extent(a, b).clamp(0.7, 1.0),
        pose_shift: (cx - 0.5).clamp(-0.1, 0.1),
        ..FaceSpec::default()
    };
    let geom = FaceGeometry::from_spec(&spec);

    let lum: Vec<f64> = (0..size * size).map(|i| luminance(image.pixel(i / size, i % size))).collect();
    let reference = forehead_luminance(&lum, size, &geom);
    let left = dark_centroid(&lum, size, &geom, -1.0, reference);
    let right = dark_centroid(&lum, size, &geom, 1.0, reference);
    if let (Some(l), Some(r)) = (left, right) {
        let offset = ((r - l) / 2.0) / s;
        spec.eye_spacing = FaceGeometry::eye_spacing_from_offset(offset, geom.a).clamp(0.2, 0.4);
    }

    fit_skin(image, &geom, &mut spec);
    Ok(spec)
}

fn in_forehead(geom: &FaceGeometry, x: usize, y: usize, size: usize) -> bool {
    let s = size as f64;
    let u = ((x as f64 + 0.5) / s - geom.cx) / geom.a;
    let v = ((y as f64 + 0.5) / s - geom.cy) / geom.b;
    (-0.85..=-0.55).contains(&v) && u.abs() <= 0.45
}

fn forehead_luminance(lum: &[f64], size: usize, geom: &FaceGeometry) -> f64 {
    let vals: Vec<f64> =
        (0..size * size).filter(|&i| in_forehead(geom, i % size, i / size, size)).map(|i| lum[i]).collect();
    if vals.is_empty() {
        return 0.5;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Fits hue and brightness on the forehead, which no accessory covers.
fn fit_skin(image: &ImageTensor, geom: &FaceGeometry, spec: &mut FaceSpec) {
    let size = image.size();
    let (probe, probe_maps) = super::render::render_base_face(&FaceSpec { brightness: 1.0, ..spec.clone() }, size);
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..size {
        for x in 0..size {
            if !in_forehead(geom, x, y, size) {
                continue;
            }
            // shading of the probe face = probe diffuse / probe albedo
            let d = probe.pixel(y, x);
            let alb = probe_maps.albedo.pixel(y, x);
            let obs = image.pixel(y, x);
            for c in 0..3 {
                if alb[c] > 1e-3 {
                    let shade = f64::from(d[c]) / f64::from(alb[c]);
                    sum[c] += f64::from(obs[c]) / shade.max(1e-3);
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return;
    }
    let target = sum.map(|v| v / n as f64);
    let mut best = (f64::INFINITY, spec.face_hue, spec.brightness);
    for i in 0..=200 {
        let hue = i as f64 / 200.0;
        let p = skin_color(hue);
        let pp: f64 = p.iter().map(|v| v * v).sum();
        let pt: f64 = p.iter().zip(&target).map(|(a, b)| a * b).sum();
        let k = (pt / pp).clamp(0.5, 1.0);
        let err: f64 = p.iter().zip(&target).map(|(a, b)| (k * a - b).powi(2)).sum();
        if err < best.0 {
            best = (err, hue, k);
        }
    }
    spec.face_hue = best.1;
    spec.brightness = best.2;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use crate::sprite::render::{render_base_face, render_sprite};
    use crate::sprite::spec::Attribute;

    #[test]
    fn recovers_geometry_of_rendered_faces() {
        let mut rng = seeded_rng(11, 0);
        let mut worst = [0.0f64; 4];
        for _ in 0..40 {
            let spec = FaceSpec::random(&mut rng);
            let (img, _) = render_base_face(&spec, 32);
            let est = estimate_face_spec(&img).unwrap();
            let errs = [
                (est.face_scale - spec.face_scale).abs(),
                (est.pose_shift - spec.pose_shift).abs(),
                (est.eye_spacing - spec.eye_spacing).abs(),
                (est.face_hue - spec.face_hue).abs(),
            ];
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
            }
        }
        assert!(worst[0] < 0.08, "scale err {}", worst[0]);
        assert!(worst[1] < 0.03, "pose err {}", worst[1]);
        assert!(worst[2] < 0.08, "eye err {}", worst[2]);
        assert!(worst[3] < 0.15, "hue err {}", worst[3]);
    }

    #[test]
    fn works_with_accessories_present() {
        let mut rng = seeded_rng(12, 0);
        for i in 0..30 {
            let mut spec = FaceSpec::random(&mut rng);
            for (bit, a) in Attribute::ALL.into_iter().enumerate() {
                if (i + 1) & (1 << bit) != 0 {
                    spec.attribute_flags.insert(a);
                }
            }
            let (img, _) = render_sprite(&spec, 32);
            let est = estimate_face_spec(&img).unwrap();
            assert!((est.pose_shift - spec.pose_shift).abs() < 0.03, "{spec:?} -> {est:?}");
            assert!((est.face_scale - spec.face_scale).abs() < 0.08, "{spec:?} -> {est:?}");
            assert!((est.eye_spacing - spec.eye_spacing).abs() < 0.08, "{spec:?} -> {est:?}");
        }
    }

    #[test]
    fn blank_image_fails_placement() {
        let img = ImageTensor::filled(32, BACKGROUND);
        assert!(matches!(estimate_face_spec(&img), Err(Error::PlacementFailure(_))));
    }
}
