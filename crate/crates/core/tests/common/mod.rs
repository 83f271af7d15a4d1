#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saliency_pp::density::normalize_to_pmf;
use saliency_pp::io::{map_path, write_fixations_csv, write_frames_csv, write_map};
use saliency_pp::synth::sample_spatial;
use saliency_pp::{DensityGrid, FixationTrain, Grid, ImageFrame};

pub fn blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> Grid {
    Grid::from_fn(w, h, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

/// Small multi-image dataset drawn from `blob² + floor` with per-image
/// centres, plus the generating pmfs.
pub struct Synthetic {
    pub frames: Vec<ImageFrame>,
    pub trains: Vec<FixationTrain>,
    pub pmfs: BTreeMap<String, DensityGrid>,
    pub blobs: BTreeMap<String, Grid>,
}

pub fn synthetic(images: usize, size: usize, subjects: usize, per_subject: usize, seed: u64) -> Synthetic {
    let mut out = Synthetic {
        frames: Vec::new(),
        trains: Vec::new(),
        pmfs: BTreeMap::new(),
        blobs: BTreeMap::new(),
    };
    for i in 0..images {
        let id = format!("img{i:03}");
        let frame = ImageFrame::new(id.clone(), size, size);
        let s = size as f64;
        let cx = s * (0.25 + 0.5 * ((i * 7) % 5) as f64 / 4.0);
        let cy = s * (0.3 + 0.4 * ((i * 3) % 4) as f64 / 3.0);
        let b = blob(size, size, cx, cy, s / 8.0);
        let pmf = normalize_to_pmf(id.clone(), &b.map(|v| v * v + 0.002)).unwrap();
        out.trains
            .extend(sample_spatial(&frame, &pmf, subjects, per_subject, seed + i as u64).unwrap());
        out.pmfs.insert(id.clone(), pmf);
        out.blobs.insert(id, b);
        out.frames.push(frame);
    }
    out
}

/// Writes frames, fixations, model maps and a config; returns the config path.
pub fn write_fixture(
    dir: &Path,
    frames: &[ImageFrame],
    trains: &[FixationTrain],
    models: &[(&str, &BTreeMap<String, Grid>)],
    extra: serde_json::Value,
) -> PathBuf {
    write_frames_csv(&dir.join("frames.csv"), frames, None).unwrap();
    write_fixations_csv(&dir.join("fixations.csv"), trains, None).unwrap();
    let mut model_list = Vec::new();
    for (id, maps) in models {
        let map_dir = dir.join("maps").join(id);
        for (image_id, g) in maps.iter() {
            write_map(&map_path(&map_dir, image_id), g).unwrap();
        }
        model_list.push(serde_json::json!({ "id": id, "map_dir": format!("maps/{id}") }));
    }
    let mut cfg = serde_json::json!({
        "fixations": "fixations.csv",
        "frames": "frames.csv",
        "output_dir": "out",
        "seed": 5,
        "models": model_list,
        "gold": { "folds": 3, "sigma_grid": [1.0, 1.5, 2.0, 3.0, 4.0, 6.0] },
        "optimizer": { "max_iter": 200 },
    });
    if let (Some(base), Some(add)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in add {
            base.insert(k.clone(), v.clone());
        }
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saliency-pp"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Rows of a CSV file with `#` comment lines dropped, header included.
pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
