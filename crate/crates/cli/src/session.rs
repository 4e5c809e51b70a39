//! In-memory editing session: sampled latents, edits, rendered images and
//! cached interpolation frames, with tar export and import.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sdgan_core::config::ServiceConfig;
use sdgan_core::evaluation::interpolate_edit;
use sdgan_core::fusion::forward_edit;
use sdgan_core::image::ImageTensor;
use sdgan_core::latent::{apply_edit_latent, compose_adjustment, ExtendedLatent, LatentCode, LatentSpace};
use sdgan_core::pipeline::{prepare_face, ModelSet};
use sdgan_core::prior::{attribute_region_mask, sample_z, search_optimal_length, ScoreBreakdown};
use sdgan_core::sprite::{attribute_image, Attribute};
use sdgan_core::tensor_file::TensorFile;
use serde::{Deserialize, Serialize};

pub const ARCHIVE_MANIFEST: &str = "manifest.json";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("no models are loaded")]
    ModelNotLoaded,
    #[error("unknown sample `{0}`")]
    UnknownSample(String),
    #[error("unknown or uneditable attribute `{0}`")]
    UnknownAttribute(String),
    #[error("eta {eta} outside [{min}, {max}]")]
    EtaOutOfRange { eta: f64, min: f64, max: f64 },
    #[error("unknown edit `{0}`")]
    UnknownEdit(String),
    #[error("invalid step count {0}")]
    InvalidSteps(usize),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad session archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Core(#[from] sdgan_core::Error),
}

impl ServiceError {
    /// Stable machine-readable name, used in JSON error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::ModelNotLoaded => "ModelNotLoaded",
            ServiceError::UnknownSample(_) => "UnknownSample",
            ServiceError::UnknownAttribute(_) => "UnknownAttribute",
            ServiceError::EtaOutOfRange { .. } => "EtaOutOfRange",
            ServiceError::UnknownEdit(_) => "UnknownEdit",
            ServiceError::InvalidSteps(_) => "InvalidSteps",
            ServiceError::UnknownImage(_) => "UnknownImage",
            ServiceError::Io { .. } => "IoError",
            ServiceError::Archive(_) => "ArchiveError",
            ServiceError::Core(_) => "CoreError",
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntry {
    pub z: Vec<f32>,
    pub w: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditEntry {
    pub sample_id: String,
    pub attribute: String,
    pub eta: f64,
    pub auto: bool,
    pub n_o: ExtendedLatent,
    pub n_a: ExtendedLatent,
}

/// Everything a session owns. Image ids double as sample and edit ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Store {
    pub samples: BTreeMap<String, SampleEntry>,
    pub edits: BTreeMap<String, EditEntry>,
    /// PNG bytes by image id.
    pub images: BTreeMap<String, Vec<u8>>,
    /// Frame refs by `(edit_id, steps)`.
    pub frames: BTreeMap<(String, usize), Vec<String>>,
    pub next_id: u64,
}

impl Store {
    fn fresh_id(&mut self, prefix: char) -> String {
        self.next_id += 1;
        format!("{prefix}{:06}", self.next_id)
    }
}

pub fn image_ref(id: &str) -> String {
    format!("/image/{id}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub sample_id: String,
    pub thumbnail_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub sample_id: String,
    pub attribute: String,
    /// Fixed length; the basis default is used when neither this nor
    /// `auto` is given.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub auto: bool,
    /// Debug switch that replaces the fusion offset by zeros.
    #[serde(default)]
    pub zero_offset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub edit_id: String,
    pub image_ref: String,
    pub eta_used: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_breakdowns: Option<Vec<ScoreBreakdown>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub id: String,
    pub eta_m: f64,
    pub lambda: f64,
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributesResponse {
    pub attributes: Vec<AttributeInfo>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub max_steps: usize,
}

pub struct Session {
    models: Option<Arc<ModelSet>>,
    config: ServiceConfig,
    store: RwLock<Store>,
}

impl Session {
    pub fn new(models: Option<Arc<ModelSet>>, config: ServiceConfig) -> Self {
        Self { models, config, store: RwLock::new(Store::default()) }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn models(&self) -> ServiceResult<&ModelSet> {
        self.models.as_deref().ok_or(ServiceError::ModelNotLoaded)
    }

    pub fn snapshot(&self) -> Store {
        self.store.read().expect("session lock").clone()
    }

    pub fn image(&self, id: &str) -> ServiceResult<Vec<u8>> {
        self.store
            .read()
            .expect("session lock")
            .images
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownImage(id.into()))
    }

    pub fn attributes(&self) -> ServiceResult<AttributesResponse> {
        let models = self.models()?;
        let grid = &self.config.search.grid;
        let attributes = models
            .editable_attributes()
            .into_iter()
            .map(|id| {
                let meta = &models.bases[&id].1;
                AttributeInfo { id, eta_m: meta.eta_m, lambda: meta.lambda, grid: meta.grid.clone() }
            })
            .collect();
        Ok(AttributesResponse {
            attributes,
            grid_min: grid.start,
            grid_max: grid.stop,
            grid_step: grid.step,
            max_steps: self.config.max_steps,
        })
    }

    /// Draws `count` latents. With a seed the codes are `sample_z(seed, i)`;
    /// without one, each call takes a fresh seed from the session counter.
    pub fn sample(&self, count: usize, seed: Option<u64>) -> ServiceResult<Vec<SampleInfo>> {
        let models = self.models()?;
        let g = &models.generator;
        let d = g.config().latent_dim;
        let seed = match seed {
            Some(s) => s,
            None => {
                let mut store = self.store.write().expect("session lock");
                store.next_id += 1;
                0x5eed_0000_0000 + store.next_id
            }
        };
        let mut rendered = Vec::with_capacity(count);
        for i in 0..count {
            let z = sample_z(seed, i, d);
            let w = g.map_latent(&LatentCode::new(z.clone(), LatentSpace::Z)?)?;
            let png = g.generate(&w)?.to_png()?;
            rendered.push((SampleEntry { z, w: w.into_values() }, png));
        }
        let mut store = self.store.write().expect("session lock");
        Ok(rendered
            .into_iter()
            .map(|(entry, png)| {
                let id = store.fresh_id('s');
                store.samples.insert(id.clone(), entry);
                store.images.insert(id.clone(), png);
                SampleInfo { thumbnail_ref: image_ref(&id), sample_id: id }
            })
            .collect())
    }

    pub fn edit(&self, req: &EditRequest) -> ServiceResult<EditResponse> {
        let models = self.models()?;
        let sample = self
            .store
            .read()
            .expect("session lock")
            .samples
            .get(&req.sample_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSample(req.sample_id.clone()))?;
        let unknown = || ServiceError::UnknownAttribute(req.attribute.clone());
        let attr: Attribute = req.attribute.parse().map_err(|_| unknown())?;
        if !models.editable_attributes().contains(&req.attribute) {
            return Err(unknown());
        }
        let (basis, meta) = &models.bases[&req.attribute];
        let g = &models.generator;
        let search = &self.config.search;
        let (eta, breakdowns) = if req.auto {
            let mask = attribute_region_mask(g, &sample.w, &req.attribute, search.whole_face)?;
            let det = &models.detectors[&req.attribute];
            let (eta, _, b) = search_optimal_length(g, det, &sample.w, basis, &mask, &search.grid, &search.score)?;
            (eta, Some(b))
        } else {
            let eta = req.eta.unwrap_or(meta.eta_m);
            if !(eta >= search.grid.start && eta <= search.grid.stop) {
                return Err(ServiceError::EtaOutOfRange { eta, min: search.grid.start, max: search.grid.stop });
            }
            (eta, None)
        };
        let basis = basis.with_length(eta as f32)?;
        let w = LatentCode::new(sample.w.clone(), LatentSpace::W)?;
        let (image, n_o, n_a) = if req.zero_offset {
            let n_o = ExtendedLatent::zeros(g.config().layers, g.config().latent_dim);
            let n_a = compose_adjustment(&n_o, &basis)?;
            (g.synthesize(&apply_edit_latent(&w, &n_a)?)?, n_o, n_a)
        } else {
            let face = prepare_face(g.generate(&w)?, attr, search.whole_face)?;
            let attr_img = attribute_image(attr.id(), g.config().resolution)?;
            let out = forward_edit(g, &models.fusion[&req.attribute], &basis, &w, &face.image, &attr_img, &face.maps)?;
            (out.image, out.n_o, out.n_a)
        };
        let png = image.to_png()?;
        let entry = EditEntry {
            sample_id: req.sample_id.clone(),
            attribute: req.attribute.clone(),
            eta,
            auto: req.auto,
            n_o,
            n_a,
        };
        let mut store = self.store.write().expect("session lock");
        let id = store.fresh_id('e');
        store.edits.insert(id.clone(), entry);
        store.images.insert(id.clone(), png);
        Ok(EditResponse { image_ref: image_ref(&id), edit_id: id, eta_used: eta, score_breakdowns: breakdowns })
    }

    /// Frame refs for `G_s(w + t·n_a)`. The endpoints reuse the sample and
    /// edit images; repeated calls return the cached refs.
    pub fn interpolate(&self, edit_id: &str, steps: usize) -> ServiceResult<Vec<String>> {
        let models = self.models()?;
        let (edit, sample) = {
            let store = self.store.read().expect("session lock");
            let edit = store.edits.get(edit_id).cloned().ok_or_else(|| ServiceError::UnknownEdit(edit_id.into()))?;
            if steps < 2 || steps > self.config.max_steps {
                return Err(ServiceError::InvalidSteps(steps));
            }
            if let Some(refs) = store.frames.get(&(edit_id.to_string(), steps)) {
                return Ok(refs.clone());
            }
            let sample = store
                .samples
                .get(&edit.sample_id)
                .cloned()
                .ok_or_else(|| ServiceError::UnknownSample(edit.sample_id.clone()))?;
            (edit, sample)
        };
        let w = LatentCode::new(sample.w, LatentSpace::W)?;
        let frames = interpolate_edit(&models.generator, &w, &edit.n_a, steps)?;
        let pngs = frames[1..steps - 1].iter().map(ImageTensor::to_png).collect::<sdgan_core::Result<Vec<_>>>()?;
        let mut store = self.store.write().expect("session lock");
        if let Some(refs) = store.frames.get(&(edit_id.to_string(), steps)) {
            return Ok(refs.clone());
        }
        let mut ids = vec![edit.sample_id.clone()];
        for (k, png) in pngs.into_iter().enumerate() {
            let id = format!("{edit_id}_k{steps}_{}", k + 1);
            store.images.insert(id.clone(), png);
            ids.push(id);
        }
        ids.push(edit_id.to_string());
        let refs: Vec<String> = ids.iter().map(|id| image_ref(id)).collect();
        store.frames.insert((edit_id.to_string(), steps), refs.clone());
        Ok(refs)
    }

    pub fn export_bytes(&self) -> ServiceResult<Vec<u8>> {
        archive_bytes(&self.snapshot())
    }

    pub fn export_to(&self, path: impl AsRef<Path>) -> ServiceResult<()> {
        let path = path.as_ref();
        let bytes = self.export_bytes()?;
        std::fs::write(path, bytes).map_err(|source| ServiceError::Io { path: path.to_path_buf(), source })
    }

    /// Replaces the session contents with an exported archive.
    pub fn import_bytes(&self, bytes: &[u8]) -> ServiceResult<()> {
        let store = store_from_archive(bytes)?;
        *self.store.write().expect("session lock") = store;
        Ok(())
    }

    pub fn import_from(&self, path: impl AsRef<Path>) -> ServiceResult<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ServiceError::Io { path: path.to_path_buf(), source })?;
        self.import_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchiveSample {
    id: String,
    z: String,
    w: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchiveEdit {
    id: String,
    sample_id: String,
    attribute: String,
    eta: f64,
    auto: bool,
    n_o: String,
    n_a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchiveFrames {
    edit_id: String,
    steps: usize,
    refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchiveManifest {
    format_version: u32,
    next_id: u64,
    samples: Vec<ArchiveSample>,
    edits: Vec<ArchiveEdit>,
    /// Image id to archive path.
    images: BTreeMap<String, String>,
    frames: Vec<ArchiveFrames>,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> ServiceResult<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder
        .append_data(&mut header, path, data)
        .map_err(|source| ServiceError::Io { path: PathBuf::from(path), source })
}

fn vector_bytes(v: &[f32]) -> ServiceResult<Vec<u8>> {
    Ok(TensorFile::new(vec![v.len()], v.to_vec())?.to_bytes())
}

fn latent_bytes(l: &ExtendedLatent) -> ServiceResult<Vec<u8>> {
    Ok(TensorFile::new(vec![l.layers(), l.dim()], l.as_slice().to_vec())?.to_bytes())
}

fn archive_bytes(store: &Store) -> ServiceResult<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    let mut manifest = ArchiveManifest {
        format_version: ARCHIVE_VERSION,
        next_id: store.next_id,
        samples: Vec::new(),
        edits: Vec::new(),
        images: BTreeMap::new(),
        frames: store
            .frames
            .iter()
            .map(|((edit_id, steps), refs)| ArchiveFrames {
                edit_id: edit_id.clone(),
                steps: *steps,
                refs: refs.clone(),
            })
            .collect(),
    };
    for (id, s) in &store.samples {
        let (z, w) = (format!("latents/{id}.z.sdgt"), format!("latents/{id}.w.sdgt"));
        append(&mut builder, &z, &vector_bytes(&s.z)?)?;
        append(&mut builder, &w, &vector_bytes(&s.w)?)?;
        manifest.samples.push(ArchiveSample { id: id.clone(), z, w });
    }
    for (id, e) in &store.edits {
        let (n_o, n_a) = (format!("latents/{id}.n_o.sdgt"), format!("latents/{id}.n_a.sdgt"));
        append(&mut builder, &n_o, &latent_bytes(&e.n_o)?)?;
        append(&mut builder, &n_a, &latent_bytes(&e.n_a)?)?;
        manifest.edits.push(ArchiveEdit {
            id: id.clone(),
            sample_id: e.sample_id.clone(),
            attribute: e.attribute.clone(),
            eta: e.eta,
            auto: e.auto,
            n_o,
            n_a,
        });
    }
    for (id, png) in &store.images {
        let path = format!("images/{id}.png");
        append(&mut builder, &path, png)?;
        manifest.images.insert(id.clone(), path);
    }
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| ServiceError::Archive(e.to_string()))?;
    append(&mut builder, ARCHIVE_MANIFEST, &text)?;
    builder.into_inner().map_err(|source| ServiceError::Io { path: PathBuf::from("<archive>"), source })
}

fn store_from_archive(bytes: &[u8]) -> ServiceResult<Store> {
    let bad = |m: String| ServiceError::Archive(m);
    let mut files = BTreeMap::new();
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    for entry in archive.entries().map_err(|e| bad(e.to_string()))? {
        let mut entry = entry.map_err(|e| bad(e.to_string()))?;
        let path = entry.path().map_err(|e| bad(e.to_string()))?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| bad(e.to_string()))?;
        files.insert(path, data);
    }
    let file = |p: &str| files.get(p).ok_or_else(|| bad(format!("missing `{p}`")));
    let manifest: ArchiveManifest =
        serde_json::from_slice(file(ARCHIVE_MANIFEST)?).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != ARCHIVE_VERSION {
        return Err(bad(format!("unsupported archive version {}", manifest.format_version)));
    }
    let vector = |p: &str| -> ServiceResult<Vec<f32>> { Ok(TensorFile::from_bytes(file(p)?)?.data) };
    let latent = |p: &str| -> ServiceResult<ExtendedLatent> {
        let t = TensorFile::from_bytes(file(p)?)?;
        match t.shape[..] {
            [l, d] => Ok(ExtendedLatent::from_vec(l, d, t.data)?),
            _ => Err(bad(format!("`{p}` is not a 2-D latent"))),
        }
    };
    let mut store = Store { next_id: manifest.next_id, ..Store::default() };
    for s in &manifest.samples {
        store.samples.insert(s.id.clone(), SampleEntry { z: vector(&s.z)?, w: vector(&s.w)? });
    }
    for e in &manifest.edits {
        if !store.samples.contains_key(&e.sample_id) {
            return Err(bad(format!("edit `{}` refers to missing sample `{}`", e.id, e.sample_id)));
        }
        store.edits.insert(
            e.id.clone(),
            EditEntry {
                sample_id: e.sample_id.clone(),
                attribute: e.attribute.clone(),
                eta: e.eta,
                auto: e.auto,
                n_o: latent(&e.n_o)?,
                n_a: latent(&e.n_a)?,
            },
        );
    }
    for (id, path) in &manifest.images {
        store.images.insert(id.clone(), file(path)?.clone());
    }
    for f in manifest.frames {
        store.frames.insert((f.edit_id, f.steps), f.refs);
    }
    Ok(store)
}
