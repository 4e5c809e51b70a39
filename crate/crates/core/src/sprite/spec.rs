use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete accessories that can be composited onto a face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    FaceMask,
    SunGlasses,
    FrameGlasses,
}

impl Attribute {
    /// Compositing order when several accessories are present.
    pub const ALL: [Attribute; 3] = [Attribute::FaceMask, Attribute::SunGlasses, Attribute::FrameGlasses];

    pub fn id(self) -> &'static str {
        match self {
            Attribute::FaceMask => "face_mask",
            Attribute::SunGlasses => "sun_glasses",
            Attribute::FrameGlasses => "frame_glasses",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL.into_iter().find(|a| a.id() == s).ok_or_else(|| Error::UnknownAttribute(s.to_string()))
    }
}

/// Continuous face properties with labeled ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceProperty {
    Hue,
    FaceScale,
    EyeSpacing,
    PoseShift,
    Brightness,
}

impl FaceProperty {
    pub const ALL: [FaceProperty; 5] = [
        FaceProperty::Hue,
        FaceProperty::FaceScale,
        FaceProperty::EyeSpacing,
        FaceProperty::PoseShift,
        FaceProperty::Brightness,
    ];

    /// Properties that an accessory edit must leave unchanged.
    pub const RETAINED: [FaceProperty; 3] = [FaceProperty::Hue, FaceProperty::FaceScale, FaceProperty::PoseShift];

    pub fn id(self) -> &'static str {
        match self {
            FaceProperty::Hue => "hue",
            FaceProperty::FaceScale => "face_scale",
            FaceProperty::EyeSpacing => "eye_spacing",
            FaceProperty::PoseShift => "pose_shift",
            FaceProperty::Brightness => "brightness",
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            FaceProperty::Hue => (0.0, 1.0),
            FaceProperty::FaceScale => (0.7, 1.0),
            FaceProperty::EyeSpacing => (0.2, 0.4),
            FaceProperty::PoseShift => (-0.1, 0.1),
            FaceProperty::Brightness => (0.5, 1.0),
        }
    }
}

impl FromStr for FaceProperty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FaceProperty::ALL.into_iter().find(|p| p.id() == s).ok_or_else(|| Error::UnknownAttribute(s.to_string()))
    }
}

/// Anything a predictor can be trained on: accessory presence or a face property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Presence(Attribute),
    Property(FaceProperty),
}

impl Label {
    pub fn id(self) -> &'static str {
        match self {
            Label::Presence(a) => a.id(),
            Label::Property(p) => p.id(),
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<Attribute>().map(Label::Presence).or_else(|_| s.parse::<FaceProperty>().map(Label::Property))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub face_hue: f64,
    pub face_scale: f64,
    pub eye_spacing: f64,
    pub pose_shift: f64,
    pub brightness: f64,
    pub attribute_flags: BTreeSet<Attribute>,
}

impl Default for FaceSpec {
    fn default() -> Self {
        Self {
            face_hue: 0.5,
            face_scale: 0.85,
            eye_spacing: 0.3,
            pose_shift: 0.0,
            brightness: 0.8,
            attribute_flags: BTreeSet::new(),
        }
    }
}

impl FaceSpec {
    pub fn get(&self, p: FaceProperty) -> f64 {
        match p {
            FaceProperty::Hue => self.face_hue,
            FaceProperty::FaceScale => self.face_scale,
            FaceProperty::EyeSpacing => self.eye_spacing,
            FaceProperty::PoseShift => self.pose_shift,
            FaceProperty::Brightness => self.brightness,
        }
    }

    pub fn set(&mut self, p: FaceProperty, v: f64) {
        let (lo, hi) = p.range();
        let v = v.clamp(lo, hi);
        match p {
            FaceProperty::Hue => self.face_hue = v,
            FaceProperty::FaceScale => self.face_scale = v,
            FaceProperty::EyeSpacing => self.eye_spacing = v,
            FaceProperty::PoseShift => self.pose_shift = v,
            FaceProperty::Brightness => self.brightness = v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in FaceProperty::ALL {
            let (lo, hi) = p.range();
            let v = self.get(p);
            if !(lo..=hi).contains(&v) {
                return Err(Error::Format(format!("{} = {v} outside [{lo}, {hi}]", p.id())));
            }
        }
        Ok(())
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut spec = Self::default();
        for p in FaceProperty::ALL {
            let (lo, hi) = p.range();
            spec.set(p, rng.random_range(lo..=hi));
        }
        spec
    }

    /// Label normalized to `[0, 1]`: presence is 0/1, properties are rescaled.
    pub fn label(&self, label: Label) -> f64 {
        match label {
            Label::Presence(a) => f64::from(u8::from(self.attribute_flags.contains(&a))),
            Label::Property(p) => {
                let (lo, hi) = p.range();
                (self.get(p) - lo) / (hi - lo)
            }
        }
    }
}
