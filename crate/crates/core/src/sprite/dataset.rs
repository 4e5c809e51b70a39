//! Paired sprite datasets and their on-disk layout.
//!
//! A dataset directory holds `images/` (accessory-free faces), `gt/`
//! (accessories composited), `masks/` (accessory footprint, 0/255), `maps/`
//! (normal, diffuse and albedo per sample) and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::planting::LatentPlanting;
use super::render::{apply_discrete_attribute, attribute_footprint, render_base_face, ShapeMaps};
use super::spec::{Attribute, FaceSpec, Label};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, RegionMask};
use crate::nn::seeded_rng;

pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteSample {
    /// `attribute_flags` lists the accessories composited into `image_gt`.
    pub spec: FaceSpec,
    /// A Z code whose planted rendering is `spec`.
    pub latent: Vec<f32>,
    pub image_base: ImageTensor,
    pub image_gt: ImageTensor,
    /// Union of the composited accessories' footprints.
    pub region_mask: RegionMask,
    pub shape_maps: ShapeMaps,
}

impl SpriteSample {
    /// Renders `spec`, compositing its flagged accessories in canonical order.
    pub fn render(spec: FaceSpec, latent: Vec<f32>, size: usize) -> Self {
        let (image_base, shape_maps) = render_base_face(&spec, size);
        let mut image_gt = image_base.clone();
        let mut region_mask = RegionMask::empty(size);
        for attr in Attribute::ALL.into_iter().filter(|a| spec.attribute_flags.contains(a)) {
            let (img, mask) = apply_discrete_attribute(&image_gt, &spec, attr.id()).expect("known attribute");
            image_gt = img;
            for (i, &on) in mask.cells().iter().enumerate() {
                if on {
                    region_mask.set(i / size, i % size, true);
                }
            }
        }
        Self { spec, latent, image_base, image_gt, region_mask, shape_maps }
    }

    pub fn attribute_ids(&self) -> Vec<&'static str> {
        self.spec.attribute_flags.iter().map(|a| a.id()).collect()
    }

    pub fn label(&self, label: Label) -> f64 {
        self.spec.label(label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteDataset {
    pub resolution: usize,
    pub samples: Vec<SpriteSample>,
}

/// Validates an attribute mix; the remainder `1 - sum` gets no accessory.
pub fn parse_mix(mix: &BTreeMap<String, f64>) -> Result<Vec<(Attribute, f64)>> {
    let mut out = Vec::new();
    for (id, &f) in mix {
        let attr: Attribute = id.parse().map_err(|_| Error::InvalidMix(format!("unknown attribute `{id}`")))?;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidMix(format!("fraction {f} for `{id}` outside [0, 1]")));
        }
        out.push((attr, f));
    }
    let total: f64 = out.iter().map(|(_, f)| f).sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::InvalidMix(format!("fractions sum to {total}")));
    }
    Ok(out)
}

/// `n` paired samples, each with at most one accessory, in exact proportions.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    mix: &BTreeMap<String, f64>,
    resolution: usize,
    planting: &LatentPlanting,
) -> Result<SpriteDataset> {
    let mix = parse_mix(mix)?;
    let mut assignment: Vec<Option<Attribute>> = Vec::with_capacity(n);
    for &(attr, f) in &mix {
        let count = ((n as f64) * f).round() as usize;
        let count = count.min(n - assignment.len());
        assignment.extend(std::iter::repeat_n(Some(attr), count));
    }
    assignment.resize(n, None);
    assignment.shuffle(&mut seeded_rng(seed, u64::MAX));

    let samples = assignment
        .into_iter()
        .enumerate()
        .map(|(i, attr)| {
            let mut rng = seeded_rng(seed, i as u64);
            let mut spec = FaceSpec::random(&mut rng);
            spec.attribute_flags.extend(attr);
            let latent = planting.latent_for_spec(&spec, &mut rng)?;
            Ok(SpriteSample::render(spec, latent, resolution))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpriteDataset { resolution, samples })
}

/// `n` samples drawn from `z ~ N(0, I)` through the planting, so accessories
/// occur independently at their planted prevalence.
pub fn generate_planted(n: usize, seed: u64, resolution: usize, planting: &LatentPlanting) -> Result<SpriteDataset> {
    let samples = (0..n)
        .map(|i| {
            let mut rng = seeded_rng(seed, i as u64);
            let z: Vec<f32> = (0..planting.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            let spec = planting.spec_from_latent(&z)?;
            Ok(SpriteSample::render(spec, z, resolution))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpriteDataset { resolution, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub gt: String,
    pub mask: String,
    pub maps: [String; 3],
    pub spec: FaceSpec,
    pub attributes: Vec<String>,
    pub latent: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub entries: Vec<ManifestEntry>,
}

impl SpriteDataset {
    pub fn manifest(&self) -> DatasetManifest {
        let entries = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestEntry {
                index: i,
                image: format!("images/{i:06}.png"),
                gt: format!("gt/{i:06}.png"),
                mask: format!("masks/{i:06}.png"),
                maps: [
                    format!("maps/{i:06}_normal.png"),
                    format!("maps/{i:06}_diffuse.png"),
                    format!("maps/{i:06}_albedo.png"),
                ],
                spec: s.spec.clone(),
                attributes: s.attribute_ids().into_iter().map(String::from).collect(),
                latent: s.latent.clone(),
            })
            .collect();
        DatasetManifest { resolution: self.resolution, entries }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        for sub in ["images", "gt", "masks", "maps"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = self.manifest();
        for (s, e) in self.samples.iter().zip(&manifest.entries) {
            s.image_base.save_png(dir.join(&e.image))?;
            s.image_gt.save_png(dir.join(&e.gt))?;
            write_bytes(&dir.join(&e.mask), &s.region_mask.to_png()?)?;
            s.shape_maps.normal_map.save_png(dir.join(&e.maps[0]))?;
            s.shape_maps.diffuse_map.save_png(dir.join(&e.maps[1]))?;
            s.shape_maps.albedo.save_png(dir.join(&e.maps[2]))?;
        }
        write_bytes(&dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }

    /// Loads a saved dataset. Images come back 8-bit quantized.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(DATASET_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let mask_path = dir.join(&e.mask);
                let mask_bytes = fs::read(&mask_path).map_err(|err| Error::io(&mask_path, err))?;
                Ok(SpriteSample {
                    spec: e.spec.clone(),
                    latent: e.latent.clone(),
                    image_base: ImageTensor::load_png(dir.join(&e.image))?,
                    image_gt: ImageTensor::load_png(dir.join(&e.gt))?,
                    region_mask: RegionMask::from_png(&mask_bytes)?,
                    shape_maps: ShapeMaps {
                        normal_map: ImageTensor::load_png(dir.join(&e.maps[0]))?,
                        diffuse_map: ImageTensor::load_png(dir.join(&e.maps[1]))?,
                        albedo: ImageTensor::load_png(dir.join(&e.maps[2]))?,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { resolution: manifest.resolution, samples })
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Accessory footprint for `spec`, or the whole face in whole-face mode.
pub fn region_for(spec: &FaceSpec, attr: Attribute, size: usize, whole_face: bool) -> RegionMask {
    if whole_face {
        super::render::face_region(spec, size)
    } else {
        attribute_footprint(spec, attr, size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEntry {
    pub path: PathBuf,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub images: usize,
    pub skipped_non_images: usize,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalManifest {
    pub root: PathBuf,
    pub entries: Vec<ExternalEntry>,
    pub stats: IngestStats,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    Ok(paths)
}

/// Indexes a folder of class-labeled subdirectories (`<root>/<label>/<image>`).
/// No alignment or resizing is performed.
pub fn ingest_external(root: impl AsRef<Path>) -> Result<ExternalManifest> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    let mut stats = IngestStats::default();
    for class_dir in sorted_dir(root)? {
        if !class_dir.is_dir() {
            log::warn!("skipping unlabeled file {}", class_dir.display());
            stats.skipped_non_images += 1;
            continue;
        }
        let label = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for path in sorted_dir(&class_dir)? {
            let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
            if !path.is_file() || !ext.as_deref().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e)) {
                log::warn!("skipping non-image {}", path.display());
                stats.skipped_non_images += 1;
                continue;
            }
            image::open(&path).map_err(|e| Error::UnreadableImage { path: path.clone(), reason: e.to_string() })?;
            *stats.labels.entry(label.clone()).or_default() += 1;
            stats.images += 1;
            entries.push(ExternalEntry { path, label: label.clone() });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDirectory(root.to_path_buf()));
    }
    Ok(ExternalManifest { root: root.to_path_buf(), entries, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mix(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let p = LatentPlanting::default();
        let a = generate_dataset(100, 7, &mix(&[("face_mask", 0.5)]), 16, &p).unwrap();
        let b = generate_dataset(100, 7, &mix(&[("face_mask", 0.5)]), 16, &p).unwrap();
        assert_eq!(serde_json::to_string(&a.manifest()).unwrap(), serde_json::to_string(&b.manifest()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn counts_follow_the_mix() {
        let p = LatentPlanting::default();
        let d = generate_dataset(10, 3, &mix(&[("face_mask", 0.5)]), 16, &p).unwrap();
        assert_eq!(d.samples.len(), 10);
        let masked = d.samples.iter().filter(|s| s.spec.attribute_flags.contains(&Attribute::FaceMask)).count();
        assert!((3..=7).contains(&masked), "{masked}");
        let d = generate_dataset(
            200,
            3,
            &mix(&[("face_mask", 0.25), ("sun_glasses", 0.25), ("frame_glasses", 0.3)]),
            8,
            &p,
        )
        .unwrap();
        for (attr, f) in [(Attribute::FaceMask, 0.25), (Attribute::SunGlasses, 0.25), (Attribute::FrameGlasses, 0.3)] {
            let c = d.samples.iter().filter(|s| s.spec.attribute_flags.contains(&attr)).count();
            assert!((c as f64 - 200.0 * f).abs() <= 2.0);
        }
    }

    #[test]
    fn invalid_mix_is_rejected() {
        let p = LatentPlanting::default();
        let bad = mix(&[("face_mask", 0.7), ("sun_glasses", 0.5)]);
        assert!(matches!(generate_dataset(10, 0, &bad, 8, &p), Err(Error::InvalidMix(_))));
        assert!(matches!(generate_dataset(10, 0, &mix(&[("hat", 0.1)]), 8, &p), Err(Error::InvalidMix(_))));
    }

    #[test]
    fn latents_are_consistent_with_specs() {
        let p = LatentPlanting::default();
        let d = generate_dataset(30, 1, &mix(&[("sun_glasses", 0.4)]), 8, &p).unwrap();
        for s in &d.samples {
            let spec = p.spec_from_latent(&s.latent).unwrap();
            assert_eq!(spec.attribute_flags, s.spec.attribute_flags);
        }
    }

    #[test]
    fn paired_invariant_holds_over_many_samples() {
        let p = LatentPlanting::default();
        let d = generate_planted(1000, 21, 32, &p).unwrap();
        let mut with_attr = 0;
        for s in &d.samples {
            for y in 0..32 {
                for x in 0..32 {
                    if !s.region_mask.get(y, x) {
                        assert_eq!(s.image_gt.pixel(y, x), s.image_base.pixel(y, x));
                    }
                }
            }
            if !s.spec.attribute_flags.is_empty() {
                with_attr += 1;
                assert!(!s.region_mask.is_empty());
            }
            assert_eq!(s.shape_maps.size(), s.image_gt.size());
        }
        assert!(with_attr > 400);
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = LatentPlanting::default();
        let d = generate_dataset(4, 2, &mix(&[("face_mask", 0.5)]), 16, &p).unwrap();
        let m = d.save(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert!(dir.path().join("masks/000000.png").exists());
        let back = SpriteDataset::load(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 4);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.region_mask, b.region_mask);
            assert_eq!(a.spec, b.spec);
            for (x, y) in a.image_gt.pixels().iter().zip(b.image_gt.pixels()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn ingest_counts_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::filled(8, [0.2, 0.4, 0.6]);
        for (label, name) in [("mask", "a.png"), ("mask", "b.png"), ("glasses", "c.png")] {
            let d = dir.path().join(label);
            fs::create_dir_all(&d).unwrap();
            img.save_png(d.join(name)).unwrap();
        }
        fs::write(dir.path().join("mask/notes.txt"), "hello").unwrap();
        let m = ingest_external(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.stats.skipped_non_images, 1);
        assert_eq!(m.stats.labels["mask"], 2);
    }

    #[test]
    fn ingest_empty_and_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_external(dir.path()), Err(Error::EmptyDirectory(_))));
        let d = dir.path().join("x");
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("broken.png"), b"not a png").unwrap();
        assert!(matches!(ingest_external(dir.path()), Err(Error::UnreadableImage { .. })));
    }
}
