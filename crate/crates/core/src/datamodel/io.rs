//! JSON Lines dataset files, one sample per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LengthCategory, Moment, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    video: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    moments: Vec<Moment>,
    saliency: Vec<f64>,
    length_label: LengthCategory,
}

impl SampleRecord {
    fn from_sample(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            video: s.video.to_rows(),
            text: s.text.to_rows(),
            moments: s.moments.clone(),
            saliency: s.saliency.clone(),
            length_label: s.length_label,
        }
    }

    fn into_sample(self) -> Result<Sample> {
        let id = self.id;
        let matrix = |rows: &[Vec<f64>], what: &str| {
            Tensor::from_rows(rows).map_err(|e| Error::Validation { id: id.clone(), message: format!("{what}: {e}") })
        };
        let video = matrix(&self.video, "video")?;
        let text = matrix(&self.text, "text")?;
        let sample = Sample {
            id: id.clone(),
            video,
            text,
            moments: self.moments,
            saliency: self.saliency,
            length_label: self.length_label,
        };
        sample.validate()?;
        Ok(sample)
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.samples {
        let line = serde_json::to_string(&SampleRecord::from_sample(s))
            .map_err(|e| Error::Validation { id: s.id.clone(), message: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset; blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(record.into_sample()?);
    }
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic, SyntheticConfig};

    fn tiny() -> Dataset {
        let cfg = SyntheticConfig { n_samples: 10, ..SyntheticConfig::default() };
        generate_synthetic(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = tiny();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn missing_moments_is_a_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = tiny();
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v.as_object_mut().unwrap().remove("moments");
        lines[2] = v.to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("moments"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn zero_length_moment_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut ds = tiny();
        ds.samples[4].moments[0].length = 0.0;
        let id = ds.samples[4].id.clone();
        // save does not validate, so the bad record reaches the file
        save_dataset(&ds, &path).unwrap();
        match load_dataset(&path) {
            Err(Error::Validation { id: got, .. }) => assert_eq!(got, id),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_dataset("/nonexistent/x.jsonl"), Err(Error::Io { .. })));
    }
}
