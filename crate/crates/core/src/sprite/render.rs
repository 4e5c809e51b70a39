//! Analytic sprite faces, their shape maps, and accessory compositing.
//!
//! Coordinates are normalized to `[0, 1]` on both axes with pixel centers at
//! `(i + 0.5) / size`; every pixel is the mean of a 2x2 grid of sub-samples.

use serde::{Deserialize, Serialize};

use super::spec::{Attribute, FaceSpec};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, RegionMask};

pub const BACKGROUND: [f32; 3] = [0.15, 0.30, 0.45];
pub const ACCESSORY_BACKDROP: [f32; 3] = [0.5, 0.5, 0.5];

const FACE_CENTER_Y: f64 = 0.53;
const FACE_HALF_WIDTH: f64 = 0.34;
const FACE_HALF_HEIGHT: f64 = 0.42;
const EYE_ROW: f64 = -0.25;
const EYE_BASE_OFFSET: f64 = 0.25;
const EYE_RADIUS: f64 = 0.12;
const LENS_RADIUS: f64 = 0.30;
const MASK_TOP: f64 = 0.08;
const AMBIENT: f64 = 0.35;
const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

const SKIN_STOPS: [[f64; 3]; 3] = [[0.96, 0.82, 0.78], [0.90, 0.72, 0.45], [0.62, 0.42, 0.32]];
const EYE_COLOR: [f64; 3] = [0.08, 0.06, 0.05];
const MOUTH_COLOR: [f64; 3] = [0.65, 0.20, 0.20];
const MASK_COLOR: [f64; 3] = [0.55, 0.78, 0.95];
const SUN_LENS_COLOR: [f64; 3] = [0.05, 0.05, 0.08];
const FRAME_COLOR: [f64; 3] = [0.75, 0.15, 0.10];

/// Normal, diffuse and albedo images aligned with the face image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMaps {
    pub normal_map: ImageTensor,
    pub diffuse_map: ImageTensor,
    pub albedo: ImageTensor,
}

impl ShapeMaps {
    pub fn size(&self) -> usize {
        self.normal_map.size()
    }

    /// Nine channels per pixel: normal, diffuse, albedo.
    pub fn stacked(&self) -> Vec<f32> {
        let n = self.normal_map.pixels();
        let d = self.diffuse_map.pixels();
        let a = self.albedo.pixels();
        (0..n.len() / 3)
            .flat_map(|i| {
                let s = 3 * i..3 * i + 3;
                n[s.clone()].iter().chain(&d[s.clone()]).chain(&a[s]).copied().collect::<Vec<_>>()
            })
            .collect()
    }
}

pub fn skin_color(hue: f64) -> [f64; 3] {
    let t = hue.clamp(0.0, 1.0) * 2.0;
    let (lo, hi, f) = if t <= 1.0 { (0, 1, t) } else { (1, 2, t - 1.0) };
    std::array::from_fn(|c| SKIN_STOPS[lo][c] * (1.0 - f) + SKIN_STOPS[hi][c] * f)
}

fn light_direction() -> [f64; 3] {
    let l: [f64; 3] = [0.0, -0.4, 1.0];
    let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    [l[0] / n, l[1] / n, l[2] / n]
}

/// Face layout in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FaceGeometry {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
}

impl FaceGeometry {
    pub fn from_spec(spec: &FaceSpec) -> Self {
        let a = FACE_HALF_WIDTH * spec.face_scale;
        let b = FACE_HALF_HEIGHT * spec.face_scale;
        let cy = FACE_CENTER_Y;
        Self {
            cx: 0.5 + spec.pose_shift,
            cy,
            a,
            b,
            eye_dx: (EYE_BASE_OFFSET + spec.eye_spacing) * a,
            eye_y: cy + EYE_ROW * b,
        }
    }

    /// Inverse of `from_spec` for the geometric fields.
    pub fn scale_from_extent(a: f64, b: f64) -> f64 {
        0.5 * (a / FACE_HALF_WIDTH + b / FACE_HALF_HEIGHT)
    }

    pub fn eye_spacing_from_offset(eye_dx: f64, a: f64) -> f64 {
        eye_dx / a - EYE_BASE_OFFSET
    }

    pub fn eye_radius(&self) -> f64 {
        EYE_RADIUS * self.a
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.cx) / self.a, (y - self.cy) / self.b)
    }

    pub fn inside_face(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        u * u + v * v <= 1.0
    }

    /// Unit surface normal of the ellipsoidal head at `(x, y)`.
    fn normal(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = self.local(x, y);
        let r2 = u * u + v * v;
        if r2 >= 1.0 {
            return [0.0, 0.0, 1.0];
        }
        let depth = 0.8 * 0.5 * (self.a + self.b);
        let s = (1.0 - r2).sqrt();
        let n = [u / self.a, v / self.b, s / depth];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        [n[0] / len, n[1] / len, n[2] / len]
    }

    fn shading(&self, x: f64, y: f64) -> f64 {
        let n = self.normal(x, y);
        let l = light_direction();
        let lambert = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
        AMBIENT + (1.0 - AMBIENT) * lambert
    }

    fn eye_distance(&self, x: f64, y: f64) -> f64 {
        let dy = y - self.eye_y;
        let dl = ((x - (self.cx - self.eye_dx)).powi(2) + dy * dy).sqrt();
        let dr = ((x - (self.cx + self.eye_dx)).powi(2) + dy * dy).sqrt();
        dl.min(dr)
    }

    fn in_mouth(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / (0.3 * self.a);
        let v = (y - (self.cy + 0.5 * self.b)) / (0.07 * self.b);
        u * u + v * v <= 1.0
    }

    fn face_albedo(&self, spec: &FaceSpec, x: f64, y: f64) -> [f64; 3] {
        if self.eye_distance(x, y) <= self.eye_radius() {
            EYE_COLOR
        } else if self.in_mouth(x, y) {
            MOUTH_COLOR
        } else {
            skin_color(spec.face_hue)
        }
    }

    fn in_bridge(&self, x: f64, y: f64, size: usize) -> bool {
        let half_thickness = 0.65 / size as f64;
        (x - self.cx).abs() <= self.eye_dx - LENS_RADIUS * self.a * 0.9 && (y - self.eye_y).abs() <= half_thickness
    }

    /// Accessory color at a sub-sample position, if the accessory covers it.
    fn accessory(&self, attr: Attribute, brightness: f64, x: f64, y: f64, size: usize) -> Option<[f64; 3]> {
        match attr {
            Attribute::FaceMask => {
                let (u, v) = self.local(x, y);
                let inside = u * u + v * v <= 1.04 * 1.04 && v >= MASK_TOP;
                inside.then(|| {
                    let shade = brightness * self.shading(x, y).max(AMBIENT);
                    MASK_COLOR.map(|c| c * shade)
                })
            }
            Attribute::SunGlasses => {
                let lens = self.eye_distance(x, y) <= LENS_RADIUS * self.a;
                (lens || self.in_bridge(x, y, size)).then_some(SUN_LENS_COLOR)
            }
            Attribute::FrameGlasses => {
                let outer = LENS_RADIUS * self.a;
                let inner = outer - 1.3 / size as f64;
                let d = self.eye_distance(x, y);
                let rim = d <= outer && d >= inner;
                (rim || self.in_bridge(x, y, size)).then_some(FRAME_COLOR)
            }
        }
    }
}

fn sample_points(size: usize, y: usize, x: usize) -> impl Iterator<Item = (f64, f64)> {
    let s = size as f64;
    SUBSAMPLES.iter().flat_map(move |&oy| SUBSAMPLES.iter().map(move |&ox| ((x as f64 + ox) / s, (y as f64 + oy) / s)))
}

fn to_f32(c: [f64; 3]) -> [f32; 3] {
    c.map(|v| v as f32)
}

/// Renders the accessory-free face and its shape maps.
pub fn render_base_face(spec: &FaceSpec, size: usize) -> (ImageTensor, ShapeMaps) {
    let geom = FaceGeometry::from_spec(spec);
    let bg = BACKGROUND.map(f64::from);
    let mut image = ImageTensor::filled(size, BACKGROUND);
    let mut normal_map = ImageTensor::filled(size, [0.5, 0.5, 1.0]);
    let mut diffuse_map = ImageTensor::filled(size, BACKGROUND);
    let mut albedo_map = ImageTensor::filled(size, BACKGROUND);
    let n_sub = (SUBSAMPLES.len() * SUBSAMPLES.len()) as f64;
    for y in 0..size {
        for x in 0..size {
            let mut diffuse = [0.0; 3];
            let mut albedo = [0.0; 3];
            let mut normal = [0.0; 3];
            for (px, py) in sample_points(size, y, x) {
                let (a, d, n) = if geom.inside_face(px, py) {
                    let a = geom.face_albedo(spec, px, py);
                    let shade = spec.brightness * geom.shading(px, py);
                    (a, a.map(|c| c * shade), geom.normal(px, py))
                } else {
                    (bg, bg, [0.0, 0.0, 1.0])
                };
                for c in 0..3 {
                    albedo[c] += a[c] / n_sub;
                    diffuse[c] += d[c] / n_sub;
                    normal[c] += n[c] / n_sub;
                }
            }
            image.set_pixel(y, x, to_f32(diffuse));
            diffuse_map.set_pixel(y, x, to_f32(diffuse));
            albedo_map.set_pixel(y, x, to_f32(albedo));
            normal_map.set_pixel(y, x, to_f32(normal.map(|v| 0.5 * (v + 1.0))));
        }
    }
    (image, ShapeMaps { normal_map, diffuse_map, albedo: albedo_map })
}

/// Pixels whose center area is mostly covered by the face ellipse.
pub fn face_region(spec: &FaceSpec, size: usize) -> RegionMask {
    let geom = FaceGeometry::from_spec(spec);
    let mut mask = RegionMask::empty(size);
    for y in 0..size {
        for x in 0..size {
            let hits = sample_points(size, y, x).filter(|&(px, py)| geom.inside_face(px, py)).count();
            mask.set(y, x, hits * 2 >= SUBSAMPLES.len() * SUBSAMPLES.len());
        }
    }
    mask
}

/// Per-pixel accessory coverage in `[0, 1]` and mean covered color.
fn accessory_layer(spec: &FaceSpec, attr: Attribute, size: usize) -> Vec<(f64, [f64; 3])> {
    let geom = FaceGeometry::from_spec(spec);
    let mut layer = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            let mut color = [0.0; 3];
            let mut total = 0usize;
            for (px, py) in sample_points(size, y, x) {
                total += 1;
                if let Some(c) = geom.accessory(attr, spec.brightness, px, py, size) {
                    hits += 1;
                    for i in 0..3 {
                        color[i] += c[i];
                    }
                }
            }
            let alpha = hits as f64 / total as f64;
            if hits > 0 {
                color = color.map(|c| c / hits as f64);
            }
            layer.push((alpha, color));
        }
    }
    layer
}

/// Exact footprint of an accessory placed according to `spec`.
pub fn attribute_footprint(spec: &FaceSpec, attr: Attribute, size: usize) -> RegionMask {
    let cells = accessory_layer(spec, attr, size).into_iter().map(|(alpha, _)| alpha > 0.0).collect();
    RegionMask::new(size, cells).expect("footprint has size*size cells")
}

/// Composites one accessory onto `base`; pixels outside the returned footprint
/// are copied unchanged.
pub fn apply_discrete_attribute(
    base: &ImageTensor,
    spec: &FaceSpec,
    attribute_id: &str,
) -> Result<(ImageTensor, RegionMask)> {
    let attr: Attribute = attribute_id.parse()?;
    let size = base.size();
    let mut out = base.clone();
    let mut mask = RegionMask::empty(size);
    for (i, (alpha, color)) in accessory_layer(spec, attr, size).into_iter().enumerate() {
        if alpha <= 0.0 {
            continue;
        }
        let (y, x) = (i / size, i % size);
        let b = base.pixel(y, x);
        let mixed: [f32; 3] = std::array::from_fn(|c| (f64::from(b[c]) * (1.0 - alpha) + color[c] * alpha) as f32);
        out.set_pixel(y, x, mixed);
        mask.set(y, x, true);
    }
    Ok((out, mask))
}

/// Face with every flagged accessory composited, in [`Attribute::ALL`] order.
pub fn render_sprite(spec: &FaceSpec, size: usize) -> (ImageTensor, ShapeMaps) {
    let (mut image, maps) = render_base_face(spec, size);
    for attr in Attribute::ALL.into_iter().filter(|a| spec.attribute_flags.contains(a)) {
        image = apply_discrete_attribute(&image, spec, attr.id()).expect("known attribute").0;
    }
    (image, maps)
}

/// The standalone accessory image `I_m` on a neutral backdrop.
pub fn attribute_image(attribute_id: &str, size: usize) -> Result<ImageTensor> {
    let attr: Attribute = attribute_id.parse()?;
    let spec = FaceSpec { brightness: 1.0, ..FaceSpec::default() };
    let backdrop = ImageTensor::filled(size, ACCESSORY_BACKDROP);
    let (img, mask) = apply_discrete_attribute(&backdrop, &spec, attr.id())?;
    if mask.is_empty() {
        return Err(Error::PlacementFailure(format!("{attr} has an empty footprint at size {size}")));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_pure() {
        let spec = FaceSpec { face_hue: 0.3, pose_shift: 0.04, ..FaceSpec::default() };
        let a = render_base_face(&spec, 32);
        let b = render_base_face(&spec, 32);
        assert_eq!(a, b);
    }

    #[test]
    fn centered_face_is_mirror_symmetric() {
        let spec = FaceSpec { face_hue: 0.8, eye_spacing: 0.37, ..FaceSpec::default() };
        let (img, _) = render_base_face(&spec, 32);
        for y in 0..32 {
            for x in 0..16 {
                let l = img.pixel(y, x);
                let r = img.pixel(y, 31 - x);
                for c in 0..3 {
                    assert!((l[c] - r[c]).abs() <= 1e-6, "({y},{x}) {l:?} vs {r:?}");
                }
            }
        }
    }

    #[test]
    fn diffuse_scales_with_brightness() {
        let dim = FaceSpec { brightness: 0.5, ..FaceSpec::default() };
        let bright = FaceSpec { brightness: 1.0, ..FaceSpec::default() };
        let (_, m_dim) = render_base_face(&dim, 32);
        let (_, m_bright) = render_base_face(&bright, 32);
        let face = face_region(&dim, 32);
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..32 {
                // fully covered face pixels only
                let fully_inside =
                    sample_points(32, y, x).all(|(px, py)| FaceGeometry::from_spec(&dim).inside_face(px, py));
                if !face.get(y, x) || !fully_inside {
                    continue;
                }
                let a = m_dim.diffuse_map.pixel(y, x);
                let b = m_bright.diffuse_map.pixel(y, x);
                for c in 0..3 {
                    if b[c] > 0.05 {
                        assert!((a[c] / b[c] - 0.5).abs() < 1e-4, "ratio {}", a[c] / b[c]);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn face_mask_footprint_covers_lower_face() {
        let spec = FaceSpec::default();
        let (base, _) = render_base_face(&spec, 32);
        let (gt, mask) = apply_discrete_attribute(&base, &spec, "face_mask").unwrap();
        let frac = mask.area_fraction();
        assert!((0.10..=0.35).contains(&frac), "area fraction {frac}");
        // footprint sits below the face center row
        let rows: Vec<usize> = (0..32).filter(|&y| (0..32).any(|x| mask.get(y, x))).collect();
        assert!(*rows.first().unwrap() as f64 >= 0.53 * 32.0);
        for y in 0..32 {
            for x in 0..32 {
                if !mask.get(y, x) {
                    assert_eq!(gt.pixel(y, x), base.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn glasses_sit_on_the_eyes() {
        let spec = FaceSpec::default();
        let geom = FaceGeometry::from_spec(&spec);
        for attr in ["sun_glasses", "frame_glasses"] {
            let (img, mask) = apply_discrete_attribute(&render_base_face(&spec, 32).0, &spec, attr).unwrap();
            assert!(!mask.is_empty());
            let row = (geom.eye_y * 32.0) as usize;
            assert!((0..32).any(|x| mask.get(row, x)), "{attr}");
            assert!(img.is_finite());
        }
    }

    #[test]
    fn unknown_attribute_is_rejected() {
        let (base, _) = render_base_face(&FaceSpec::default(), 16);
        assert!(matches!(
            apply_discrete_attribute(&base, &FaceSpec::default(), "hat"),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn accessory_images_are_distinct() {
        let a = attribute_image("face_mask", 32).unwrap();
        let b = attribute_image("sun_glasses", 32).unwrap();
        let c = attribute_image("frame_glasses", 32).unwrap();
        assert!(a.squared_distance(&b) > 1.0);
        assert!(b.squared_distance(&c) > 1.0);
    }

    #[test]
    fn shape_maps_match_image_resolution() {
        let (img, maps) = render_base_face(&FaceSpec::default(), 24);
        assert_eq!(maps.size(), img.size());
        assert_eq!(maps.stacked().len(), 24 * 24 * 9);
    }
}
