//! Per-run CSV files: one row per frame, plus one row per (frame, class)
//! for the threshold reports. Floats are written in shortest round-trip
//! form, so reading a file back reproduces the record exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::adapt::{FrameRecord, RunRecord};
use crate::error::{Error, Result};
use crate::icat::ThresholdReport;
use crate::scenes::DomainKind;

/// File stem used for a run: `method[@variant]_seed<k>`.
pub fn run_stem(method: &str, variant: &str, seed: u64) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '+' })
            .collect()
    };
    if variant.is_empty() {
        format!("{}_seed{seed}", clean(method))
    } else {
        format!("{}@{}_seed{seed}", clean(method), clean(variant))
    }
}

pub fn frames_path(dir: &Path, run: &RunRecord) -> PathBuf {
    dir.join(format!("{}.csv", run_stem(&run.method, &run.variant, run.seed)))
}

pub fn thresholds_path(dir: &Path, run: &RunRecord) -> PathBuf {
    dir.join(format!("{}_thresholds.csv", run_stem(&run.method, &run.variant, run.seed)))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn frame_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "method", "variant", "seed", "frame", "round", "domain_index", "domain", "pixels", "correct", "loss",
    ]
    .map(String::from)
    .to_vec();
    for prefix in ["inter", "union", "delta", "weight"] {
        h.extend((0..classes).map(|c| format!("{prefix}_{c}")));
    }
    h
}

const THRESHOLD_HEADER: [&str; 14] = [
    "method",
    "variant",
    "seed",
    "frame",
    "round",
    "domain_index",
    "domain",
    "class",
    "count",
    "phi",
    "tau",
    "mask_count",
    "accepted",
    "acceptance",
];

/// Writes the frame table of a run.
pub fn write_frames<W: Write>(run: &RunRecord, out: W) -> Result<()> {
    let classes = run.frames.first().map_or(0, FrameRecord::classes);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(frame_header(classes)).map_err(csv_err)?;
    for f in &run.frames {
        if f.classes() != classes || f.delta.len() != classes || f.weights.len() != classes {
            return Err(Error::Shape(format!("frame {} has inconsistent class vectors", f.index)));
        }
        let mut row = vec![
            run.method.clone(),
            run.variant.clone(),
            run.seed.to_string(),
            f.index.to_string(),
            f.round.to_string(),
            f.domain_index.to_string(),
            f.domain.to_string(),
            f.pixels.to_string(),
            f.correct.to_string(),
            f.loss.to_string(),
        ];
        row.extend(f.intersection.iter().map(u64::to_string));
        row.extend(f.union.iter().map(u64::to_string));
        row.extend(f.delta.iter().map(f64::to_string));
        row.extend(f.weights.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per class for every frame that carries a threshold report.
pub fn write_thresholds<W: Write>(run: &RunRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(THRESHOLD_HEADER).map_err(csv_err)?;
    for f in &run.frames {
        let Some(t) = &f.thresholds else { continue };
        for c in 0..t.classes() {
            w.write_record([
                run.method.clone(),
                run.variant.clone(),
                run.seed.to_string(),
                f.index.to_string(),
                f.round.to_string(),
                f.domain_index.to_string(),
                f.domain.to_string(),
                c.to_string(),
                t.counts[c].to_string(),
                t.phi[c].to_string(),
                t.tau[c].to_string(),
                t.mask_counts[c].to_string(),
                t.accepted[c].to_string(),
                t.acceptance(c).map(|a| a.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes both tables into `dir` and returns the frame table path.
pub fn write_run(dir: &Path, run: &RunRecord) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let frames = frames_path(dir, run);
    write_frames(run, BufWriter::new(File::create(&frames)?))?;
    write_thresholds(run, BufWriter::new(File::create(thresholds_path(dir, run))?))?;
    Ok(frames)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::Format(format!("missing column {what}")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad {what} value {raw:?}")))
}

/// Reads a frame table. Threshold reports are left empty.
pub fn read_frames<R: Read>(input: R) -> Result<RunRecord> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let fixed = 10;
    if header.len() < fixed || (header.len() - fixed) % 4 != 0 {
        return Err(Error::Format(format!("frame table has {} columns", header.len())));
    }
    let classes = (header.len() - fixed) / 4;
    let expect = frame_header(classes);
    if header.iter().ne(expect.iter().map(String::as_str)) {
        return Err(Error::Format("unexpected frame table header".into()));
    }
    let mut run = RunRecord {
        method: String::new(),
        variant: String::new(),
        seed: 0,
        frames: Vec::new(),
    };
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if n == 0 {
            run.method = rec[0].to_string();
            run.variant = rec[1].to_string();
            run.seed = field(&rec, 2, "seed")?;
        } else if rec[0] != run.method || rec[1] != run.variant || field::<u64>(&rec, 2, "seed")? != run.seed {
            return Err(Error::Format(format!("row {n} belongs to a different run")));
        }
        let vec_u64 = |k: usize| -> Result<Vec<u64>> {
            (0..classes).map(|c| field(&rec, fixed + k * classes + c, "count")).collect()
        };
        let vec_f64 = |k: usize| -> Result<Vec<f64>> {
            (0..classes).map(|c| field(&rec, fixed + k * classes + c, "value")).collect()
        };
        let domain: DomainKind = rec[6]
            .parse()
            .map_err(|_| Error::Format(format!("bad domain {:?}", &rec[6])))?;
        run.frames.push(FrameRecord {
            index: field(&rec, 3, "frame")?,
            round: field(&rec, 4, "round")?,
            domain_index: field(&rec, 5, "domain_index")?,
            domain,
            pixels: field(&rec, 7, "pixels")?,
            correct: field(&rec, 8, "correct")?,
            loss: field(&rec, 9, "loss")?,
            intersection: vec_u64(0)?,
            union: vec_u64(1)?,
            thresholds: None,
            delta: vec_f64(2)?,
            weights: vec_f64(3)?,
            wall_ms: 0.0,
            loss_map: None,
        });
    }
    if run.frames.is_empty() {
        return Err(Error::Format("frame table has no rows".into()));
    }
    Ok(run)
}

/// Attaches threshold rows to the frames of `run`.
pub fn read_thresholds_into<R: Read>(run: &mut RunRecord, input: R) -> Result<()> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(THRESHOLD_HEADER.iter().copied()) {
        return Err(Error::Format("unexpected threshold table header".into()));
    }
    let classes = run.frames.first().map_or(0, FrameRecord::classes);
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let index: usize = field(&rec, 3, "frame")?;
        let class: usize = field(&rec, 7, "class")?;
        let frame = run
            .frames
            .iter_mut()
            .find(|f| f.index == index)
            .ok_or_else(|| Error::Format(format!("threshold row for unknown frame {index}")))?;
        if class >= classes {
            return Err(Error::Format(format!("class {class} out of range")));
        }
        let t = frame.thresholds.get_or_insert_with(|| ThresholdReport {
            tau: vec![f64::NAN; classes],
            phi: vec![f64::NAN; classes],
            counts: vec![0; classes],
            mask_counts: vec![0; classes],
            accepted: vec![0; classes],
        });
        t.counts[class] = field(&rec, 8, "count")?;
        t.phi[class] = field(&rec, 9, "phi")?;
        t.tau[class] = field(&rec, 10, "tau")?;
        t.mask_counts[class] = field(&rec, 11, "mask_count")?;
        t.accepted[class] = field(&rec, 12, "accepted")?;
    }
    Ok(())
}

/// Reads a run back from its frame table and, when present, its
/// threshold table.
pub fn read_run(frames: &Path) -> Result<RunRecord> {
    let mut run = read_frames(BufReader::new(File::open(frames)?))?;
    let stem = frames
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("bad run file name {}", frames.display())))?;
    let t = frames.with_file_name(format!("{stem}_thresholds.csv"));
    if t.exists() {
        read_thresholds_into(&mut run, BufReader::new(File::open(t)?))?;
    }
    Ok(run)
}

/// Every run in a directory, ordered by file name.
pub fn read_run_dir(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv")
                && !p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.ends_with("_thresholds"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_run(p)).collect()
}
