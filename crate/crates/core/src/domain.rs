//! Images, fixations, saliency maps and datasets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::grid::Grid;

/// Dimensions of one stimulus image. No pixel content is kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

impl ImageFrame {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        ImageFrame {
            image_id: image_id.into(),
            width,
            height,
        }
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Nearest pixel, rounding half up and clamping to the frame.
    pub fn snap(&self, x: f64, y: f64) -> (usize, usize) {
        (snap_axis(x, self.width), snap_axis(y, self.height))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }
}

#[inline]
fn snap_axis(v: f64, n: usize) -> usize {
    let r = (v + 0.5).floor();
    if r <= 0.0 {
        0
    } else {
        (r as usize).min(n - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl Fixation {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Fixation { x, y, t }
    }
}

/// One subject's ordered fixations on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationTrain {
    pub image_id: String,
    pub subject_id: String,
    pub fixations: Vec<Fixation>,
}

impl FixationTrain {
    pub fn new(
        image_id: impl Into<String>,
        subject_id: impl Into<String>,
        fixations: Vec<Fixation>,
    ) -> Self {
        FixationTrain {
            image_id: image_id.into(),
            subject_id: subject_id.into(),
            fixations,
        }
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }
}

/// Raw model output for one image, before any probabilistic conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub image_id: String,
    pub model_id: String,
    pub values: Grid,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub frames: Vec<ImageFrame>,
    pub trains: Vec<FixationTrain>,
    /// Keyed by `(model_id, image_id)`.
    pub maps: BTreeMap<(String, String), SaliencyMap>,
}

impl Dataset {
    pub fn new(frames: Vec<ImageFrame>, trains: Vec<FixationTrain>) -> Self {
        Dataset {
            frames,
            trains,
            maps: BTreeMap::new(),
        }
    }

    pub fn insert_map(&mut self, map: SaliencyMap) {
        self.maps
            .insert((map.model_id.clone(), map.image_id.clone()), map);
    }

    pub fn frame(&self, image_id: &str) -> Option<&ImageFrame> {
        self.frames.iter().find(|f| f.image_id == image_id)
    }

    pub fn trains_for<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a FixationTrain> {
        self.trains.iter().filter(move |t| t.image_id == image_id)
    }

    /// Subject ids in lexicographic order.
    pub fn subjects(&self) -> Vec<String> {
        self.trains
            .iter()
            .map(|t| t.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.maps
            .keys()
            .map(|(m, _)| m.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn map(&self, model_id: &str, image_id: &str) -> Option<&SaliencyMap> {
        self.maps.get(&(model_id.to_string(), image_id.to_string()))
    }

    pub fn fixation_count(&self) -> usize {
        self.trains.iter().map(FixationTrain::len).sum()
    }
}

/// One broken rule, naming the offending entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

fn violation(entity: String, rule: &str) -> Violation {
    Violation {
        entity,
        rule: rule.to_string(),
    }
}

/// Checks every dataset invariant and returns the violations found, in a
/// deterministic order. An empty list means the dataset is well formed.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut frames: HashMap<&str, &ImageFrame> = HashMap::new();
    for f in &d.frames {
        let entity = format!("frame {}", f.image_id);
        if frames.insert(f.image_id.as_str(), f).is_some() {
            out.push(violation(entity.clone(), "duplicate image id"));
        }
        if f.width < 1 || f.height < 1 {
            out.push(violation(entity.clone(), "width and height must be >= 1"));
        }
        if f.width * f.height < 4 {
            out.push(violation(entity, "frame must have at least 4 pixels"));
        }
    }

    let mut seen_trains = BTreeSet::new();
    for tr in &d.trains {
        let entity = format!("train ({}, {})", tr.image_id, tr.subject_id);
        if !seen_trains.insert((tr.image_id.as_str(), tr.subject_id.as_str())) {
            out.push(violation(entity.clone(), "duplicate (subject, image) train"));
        }
        let frame = frames.get(tr.image_id.as_str());
        if frame.is_none() {
            out.push(violation(entity.clone(), "unknown image"));
        }
        if tr.fixations.is_empty() {
            out.push(violation(entity.clone(), "empty train"));
        }
        if tr.fixations.windows(2).any(|w| !(w[1].t > w[0].t)) {
            out.push(violation(entity.clone(), "t not strictly increasing"));
        }
        if tr
            .fixations
            .iter()
            .any(|f| !(f.t >= 0.0) || !f.x.is_finite() || !f.y.is_finite())
        {
            out.push(violation(entity.clone(), "non-finite coordinate or negative time"));
        }
        if let Some(frame) = frame {
            if tr.fixations.iter().any(|f| !frame.contains(f.x, f.y)) {
                out.push(violation(entity, "fixation outside frame"));
            }
        }
    }

    for ((model_id, image_id), map) in &d.maps {
        let entity = format!("map ({model_id}, {image_id})");
        match frames.get(image_id.as_str()) {
            None => out.push(violation(entity.clone(), "unknown image")),
            Some(f) => {
                if map.values.width() != f.width || map.values.height() != f.height {
                    out.push(violation(entity.clone(), "dimension mismatch"));
                }
            }
        }
        if map.values.first_non_finite().is_some() {
            out.push(violation(entity, "non-finite value"));
        }
    }

    let subjects = d
        .trains
        .iter()
        .map(|t| t.subject_id.as_str())
        .collect::<BTreeSet<_>>();
    if subjects.len() < 2 {
        out.push(violation("dataset".into(), "at least 2 subjects required"));
    }
    if d.frames.len() < 2 {
        out.push(violation("dataset".into(), "at least 2 images required"));
    }
    out
}
