//! On-disk streams: a JSON manifest plus one CGRD pair (image, labels) per
//! distinct frame slot. Rounds reference the same slot files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{Grid, Image, LabelMap};
use crate::scenes::{DomainKind, DomainStream, Frame, SceneSpec, StreamSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotEntry {
    pub domain_index: usize,
    pub frame_in_domain: usize,
    pub domain: DomainKind,
    pub severity: f64,
    /// Paths relative to the manifest.
    pub image: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub round: usize,
    pub domain_index: usize,
    pub domain: DomainKind,
    pub frame_in_domain: usize,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub version: u32,
    pub classes: usize,
    pub scene: SceneSpec,
    pub stream: StreamSpec,
    pub slots: Vec<SlotEntry>,
    pub frames: Vec<FrameEntry>,
}

fn slot_of(spec: &StreamSpec, f: &Frame) -> usize {
    f.domain_index * spec.frames_per_domain + f.frame_in_domain
}

/// Writes `stream` under `dir` and returns the manifest path.
pub fn write_stream(dir: &Path, scene: &SceneSpec, stream: &DomainStream) -> Result<PathBuf> {
    let spec = &stream.spec;
    let slot_count = spec.schedule.len() * spec.frames_per_domain;
    std::fs::create_dir_all(dir.join("frames"))?;
    let mut slots: Vec<Option<SlotEntry>> = vec![None; slot_count];
    let mut frames = Vec::with_capacity(stream.len());
    for f in stream.iter() {
        let slot = slot_of(spec, f);
        if slot >= slot_count {
            return Err(Error::Shape(format!("frame {} lies outside the schedule", f.index)));
        }
        if slots[slot].is_none() {
            let image = format!("frames/d{:02}_f{:04}_image.cgrd", f.domain_index, f.frame_in_domain);
            let labels = format!("frames/d{:02}_f{:04}_labels.cgrd", f.domain_index, f.frame_in_domain);
            f.image.grid().write_cgrd(BufWriter::new(File::create(dir.join(&image))?))?;
            f.labels.to_grid().write_cgrd(BufWriter::new(File::create(dir.join(&labels))?))?;
            slots[slot] = Some(SlotEntry {
                domain_index: f.domain_index,
                frame_in_domain: f.frame_in_domain,
                domain: f.domain,
                severity: spec.schedule[f.domain_index].severity,
                image,
                labels,
            });
        }
        frames.push(FrameEntry {
            index: f.index,
            round: f.round,
            domain_index: f.domain_index,
            domain: f.domain,
            frame_in_domain: f.frame_in_domain,
            slot,
        });
    }
    let manifest = StreamManifest {
        version: MANIFEST_VERSION,
        classes: scene.classes,
        scene: scene.clone(),
        stream: spec.clone(),
        slots: slots
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Shape("stream does not cover every slot".into()))?,
        frames,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Loads a stream from a manifest file or a directory containing one.
pub fn read_stream(path: &Path) -> Result<(StreamManifest, DomainStream)> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let base = file.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(&file)?;
    let manifest: StreamManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let mut loaded = Vec::with_capacity(manifest.slots.len());
    for s in &manifest.slots {
        let grid = Grid::read_cgrd(BufReader::new(File::open(base.join(&s.image))?))?;
        let image = Image::from_grid(grid)?;
        let labels = LabelMap::from_grid(&Grid::read_cgrd(BufReader::new(File::open(base.join(&s.labels))?))?)?;
        labels.validate(manifest.classes)?;
        if (labels.height(), labels.width()) != (image.height(), image.width()) {
            return Err(Error::Shape(format!("{} and {} differ in size", s.image, s.labels)));
        }
        loaded.push((Arc::new(image), Arc::new(labels)));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, e) in manifest.frames.iter().enumerate() {
        let (image, labels) = loaded
            .get(e.slot)
            .ok_or_else(|| Error::Format(format!("frame {} references missing slot {}", e.index, e.slot)))?;
        if e.index != i {
            return Err(Error::Format(format!("frame entries out of order at {i}")));
        }
        frames.push(Frame {
            index: e.index,
            round: e.round,
            domain_index: e.domain_index,
            domain: e.domain,
            frame_in_domain: e.frame_in_domain,
            image: Arc::clone(image),
            labels: Arc::clone(labels),
        });
    }
    let stream = DomainStream {
        spec: manifest.stream.clone(),
        frames,
    };
    Ok((manifest, stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{build_stream, DomainSetting};

    #[test]
    fn stream_round_trips_through_disk() {
        let scene = SceneSpec {
            height: 16,
            width: 24,
            ..Default::default()
        };
        let spec = StreamSpec {
            schedule: vec![
                DomainSetting {
                    kind: DomainKind::Snow,
                    severity: 0.5,
                },
                DomainSetting {
                    kind: DomainKind::Night,
                    severity: 0.25,
                },
            ],
            rounds: 2,
            frames_per_domain: 3,
            seed: 9,
        };
        let stream = build_stream(&scene, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_stream(dir.path(), &scene, &stream).unwrap();
        let (manifest, back) = read_stream(dir.path()).unwrap();
        assert_eq!(back, stream);
        assert_eq!(manifest.slots.len(), 6);
        assert_eq!(manifest.frames.len(), 12);
        assert_eq!(read_stream(&path).unwrap().1, stream);
        assert_eq!(std::fs::read_dir(dir.path().join("frames")).unwrap().count(), 12);
    }

    #[test]
    fn missing_frame_files_fail() {
        let scene = SceneSpec {
            height: 8,
            width: 8,
            ..Default::default()
        };
        let spec = StreamSpec {
            rounds: 1,
            frames_per_domain: 1,
            ..Default::default()
        };
        let stream = build_stream(&scene, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_stream(dir.path(), &scene, &stream).unwrap();
        std::fs::remove_file(dir.path().join("frames/d00_f0000_image.cgrd")).unwrap();
        assert!(read_stream(dir.path()).is_err());
    }
}
