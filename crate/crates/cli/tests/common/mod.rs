//! Shared model fixture: a briefly trained small generator plus untrained
//! detector and fusion net for `face_mask`, written once per test binary.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use sdgan_cli::session::Session;
use sdgan_core::attributes::{AttributePredictor, PredictorReport};
use sdgan_core::checkpoint::ModelKind;
use sdgan_core::config::{AppConfig, DimsConfig};
use sdgan_core::fusion::FusionModel;
use sdgan_core::generator::{train_generator, GeneratorTrainConfig};
use sdgan_core::latent::{normalize_direction, SemanticBasis};
use sdgan_core::pipeline::{ModelLayout, ModelSet};
use sdgan_core::prior::{sample_z, save_basis, GridSpec};
use sdgan_core::sprite::{generate_planted, Attribute, Label, LatentPlanting};

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub layout: ModelLayout,
    pub config: AppConfig,
    pub models: Arc<ModelSet>,
}

pub fn small_config() -> AppConfig {
    AppConfig {
        dims: DimsConfig { latent_dim: 16, layers: 8, resolution: 32, generator_channels: vec![32, 32, 16, 8] },
        ..AppConfig::default()
    }
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let layout = ModelLayout::new(dir.path().join("models"));
        let config = small_config();
        let data = generate_planted(1500, 1, 32, &LatentPlanting::with_dim(16)).unwrap();
        let cfg = GeneratorTrainConfig { steps: 400, batch_size: 16, lr: 3e-3, seed: 0, adversarial_weight: 0.0 };
        train_generator(&data, config.dims.generator(), &cfg, Some(&layout.generator())).unwrap();
        let attr = Attribute::FaceMask;
        let report = PredictorReport {
            label: attr.id().into(),
            train_size: 0,
            holdout_size: 0,
            holdout_metric: 0.0,
            final_loss: 0.0,
        };
        AttributePredictor::new(Label::Presence(attr), 32, 3)
            .unwrap()
            .save(layout.detector(attr.id()), ModelKind::Detector, &report)
            .unwrap();
        let dir_vec = normalize_direction(&sample_z(9, 0, 16)).unwrap();
        let basis = SemanticBasis::new(attr.id(), dir_vec, 1.0, 0.0).unwrap();
        save_basis(layout.basis(attr.id()), &basis, 10.0, &GridSpec::default()).unwrap();
        FusionModel::new(config.dims.fusion(), 4)
            .unwrap()
            .save(layout.fusion(attr.id()), serde_json::json!({}))
            .unwrap();
        let models = Arc::new(ModelSet::load(&layout).unwrap());
        Fixture { _dir: dir, layout, config, models }
    })
}

pub fn session() -> Arc<Session> {
    let f = fixture();
    Arc::new(Session::new(Some(f.models.clone()), f.config.service.clone()))
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_sdgan"))
}
