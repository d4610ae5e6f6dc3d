//! Dataset loading, synthetic shift benchmarks, model checkpointing, and
//! prediction-log persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::metrics::{argmax, predictive_entropy, PredictionRecord};
use crate::nn::{LayerSpec, Model};
use crate::rng::{stream_rng, STREAM_DATA};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A labelled dataset; inputs are `[n x ...]` with the sample axis first.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    /// `bounds`, when given, is a closed interval every input value must
    /// lie in (image data uses [0, 1]; synthetic point clouds are
    /// unbounded).
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        split: Split,
        num_classes: usize,
        bounds: Option<(f64, f64)>,
    ) -> Result<Self> {
        let n = *inputs.shape().first().unwrap_or(&0);
        if n == 0 {
            return Err(Error::Consistency("dataset must contain at least one sample".into()));
        }
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "{n} inputs but {} labels",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Consistency("datasets need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some((lo, hi)) = bounds {
            if inputs.data().iter().any(|&v| v < lo || v > hi) {
                return Err(Error::Consistency(format!(
                    "input values outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { inputs, labels, split, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input tensor (a copy of the sample's slice).
    pub fn sample_input(&self, i: usize) -> Tensor {
        let row_len: usize = self.inputs.shape()[1..].iter().product();
        let data = self.inputs.data()[i * row_len..(i + 1) * row_len].to_vec();
        Tensor::new(self.inputs.shape()[1..].to_vec(), data).expect("sample slice is valid")
    }

    /// Rows `rows` as a batch tensor plus their labels.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let inputs = self.inputs.gather_rows(rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (inputs, labels)
    }

    /// Split off the last `n_tail` samples (e.g. a validation reserve).
    pub fn split_tail(&self, n_tail: usize, tail_split: Split) -> Result<(Dataset, Dataset)> {
        if n_tail == 0 || n_tail >= self.len() {
            return Err(Error::Contract(format!(
                "cannot reserve {n_tail} of {} samples",
                self.len()
            )));
        }
        let head_rows: Vec<usize> = (0..self.len() - n_tail).collect();
        let tail_rows: Vec<usize> = (self.len() - n_tail..self.len()).collect();
        let (hi, hl) = self.batch(&head_rows);
        let (ti, tl) = self.batch(&tail_rows);
        Ok((
            Dataset::new(hi, hl, self.split, self.num_classes, None)?,
            Dataset::new(ti, tl, tail_split, self.num_classes, None)?,
        ))
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Load an IDX image/label file pair (big-endian, ubyte payload); pixels
/// are scaled to [0, 1] by division by 255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let mut r = BufReader::new(File::open(images_path)?);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let h = r.read_u32::<BigEndian>()? as usize;
    let w = r.read_u32::<BigEndian>()? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(format_err(images_path, "zero-sized image dimensions"));
    }
    let mut raw = vec![0u8; n * h * w];
    r.read_exact(&mut raw)?;
    let inputs = Tensor::new(
        vec![n, h, w],
        raw.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;

    let mut r = BufReader::new(File::open(labels_path)?);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = r.read_u32::<BigEndian>()? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "image file holds {n} items but label file holds {n_labels}"
        )));
    }
    let mut raw = vec![0u8; n_labels];
    r.read_exact(&mut raw)?;
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().unwrap() + 1;

    Dataset::new(inputs, labels, split, num_classes.max(2), Some((0.0, 1.0)))
}

/// Two-class 2-D Gaussian benchmark with a translated test set.
///
/// Training samples come from N((±1, 0), 0.5²I); the test set is drawn the
/// same way and then translated along the class-separating axis by
/// `shift_distance`, so large shifts push every point to one side of the
/// optimal boundary and drive accuracy to chance.
pub fn gen_synthetic_shift(seed: u64, n: usize, shift_distance: f64) -> Result<(Dataset, Dataset)> {
    if n < 10 {
        return Err(Error::Contract(format!("need n >= 10 samples, got {n}")));
    }
    let mut rng = stream_rng(seed, STREAM_DATA);
    let normal = Normal::new(0.0, 0.5).expect("valid sigma");
    let mut draw = |shift: f64, split: Split| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let mean_x = if label == 0 { -1.0 } else { 1.0 };
            data.push(mean_x + normal.sample(&mut rng) + shift);
            data.push(normal.sample(&mut rng));
            labels.push(label);
        }
        Dataset::new(Tensor::new(vec![n, 2], data)?, labels, split, 2, None)
    };
    let train = draw(0.0, Split::Train)?;
    let test = draw(shift_distance, Split::Test)?;
    Ok((train, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    arch: ArchDescriptor,
    config: serde_json::Value,
    param_count: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchDescriptor {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// One-file checkpoint: a JSON header line (architecture, config snapshot,
/// version, payload checksum) followed by the raw little-endian f64
/// parameter blob.
pub fn save_checkpoint(
    model: &Model,
    config: &serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let flat = model.flat_params();
    let mut blob = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        arch: ArchDescriptor {
            input_shape: model.input_shape().to_vec(),
            num_classes: model.num_classes(),
            layers: model.layers().to_vec(),
        },
        config: config.clone(),
        param_count: flat.len(),
        sha256: sha256_hex(&blob),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Schema(e.to_string()))?;
    w.write_all(b"\n")?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

/// Restore a model and its config snapshot; the checkpoint is
/// self-describing, so no out-of-band architecture info is needed.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, serde_json::Value)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, "missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| format_err(path, format!("unparsable header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.param_count * 8 {
        return Err(format_err(
            path,
            format!(
                "parameter blob holds {} bytes, expected {}",
                blob.len(),
                header.param_count * 8
            ),
        ));
    }
    let computed = sha256_hex(blob);
    if computed != header.sha256 {
        return Err(Error::CheckpointChecksum {
            stored: header.sha256,
            computed,
        });
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = Model::from_parts(
        header.arch.input_shape,
        header.arch.layers,
        header.arch.num_classes,
    )?;
    model.set_params(&flat)?;
    Ok((model, header.config))
}

/// Nine-significant-digit float formatting used by all CSV artifacts.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

/// Write prediction records as CSV. `sample_id` restarts at 0 within each
/// (perturbation, level) group, matching suite enumeration order.
pub fn write_prediction_log(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("refusing to write an empty prediction log".into()));
    }
    let c = records[0].probs.len();
    if records.iter().any(|r| r.probs.len() != c) {
        return Err(Error::Contract("records disagree on class count".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "sample_id,perturbation,level,label,predicted,confidence,entropy")?;
    for j in 0..c {
        write!(w, ",p_{j}")?;
    }
    writeln!(w)?;
    let mut group: Option<(&str, u32)> = None;
    let mut sample_id = 0usize;
    for r in records {
        let key = (r.perturbation.as_str(), r.level);
        if group != Some(key) {
            group = Some(key);
            sample_id = 0;
        }
        write!(
            w,
            "{},{},{},{},{},{},{}",
            sample_id,
            r.perturbation,
            r.level,
            r.label,
            r.predicted,
            fmt_float(r.confidence()),
            fmt_float(predictive_entropy(&r.probs))
        )?;
        for p in &r.probs {
            write!(w, ",{}", fmt_float(*p))?;
        }
        writeln!(w)?;
        sample_id += 1;
    }
    w.flush()?;
    Ok(())
}

/// Read a prediction log back into records (probabilities renormalized
/// against the serialized rounding only through validation tolerance).
pub fn read_prediction_log(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err(path, "empty prediction log"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 8 || cols[..7] != ["sample_id", "perturbation", "level", "label", "predicted", "confidence", "entropy"] {
        return Err(format_err(path, "unexpected header"));
    }
    let c = cols.len() - 7;
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 + c {
            return Err(format_err(path, format!("row {ln}: wrong field count")));
        }
        let level: u32 = fields[2]
            .parse()
            .map_err(|_| format_err(path, format!("row {ln}: bad level")))?;
        let label: usize = fields[3]
            .parse()
            .map_err(|_| format_err(path, format!("row {ln}: bad label")))?;
        let probs: Vec<f64> = fields[7..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err(path, format!("row {ln}: bad probability")))?;
        let predicted: usize = fields[4]
            .parse()
            .map_err(|_| format_err(path, format!("row {ln}: bad prediction")))?;
        if predicted != argmax(&probs) {
            return Err(Error::Consistency(format!(
                "row {ln}: predicted column disagrees with probabilities"
            )));
        }
        out.push(PredictionRecord::new(probs, label, fields[1], level)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shift_is_deterministic_and_shaped() {
        let (tr1, te1) = gen_synthetic_shift(42, 100, 3.0).unwrap();
        let (tr2, te2) = gen_synthetic_shift(42, 100, 3.0).unwrap();
        assert_eq!(tr1.inputs.data(), tr2.inputs.data());
        assert_eq!(te1.inputs.data(), te2.inputs.data());
        assert_eq!(tr1.len(), 100);
        assert_eq!(te1.inputs.shape(), &[100, 2]);
        assert_eq!(tr1.labels[0], 0);
        assert_eq!(tr1.labels[1], 1);
    }

    #[test]
    fn zero_shift_draws_fresh_but_same_distribution() {
        let (train, test) = gen_synthetic_shift(7, 200, 0.0).unwrap();
        assert_ne!(train.inputs.data(), test.inputs.data());
        // Same distribution: class means land near (±1, 0) in both splits.
        let mean_x = |d: &Dataset, label: usize| {
            let (mut s, mut k) = (0.0, 0);
            for i in 0..d.len() {
                if d.labels[i] == label {
                    s += d.inputs.data()[2 * i];
                    k += 1;
                }
            }
            s / k as f64
        };
        for d in [&train, &test] {
            assert!((mean_x(d, 0) + 1.0).abs() < 0.25);
            assert!((mean_x(d, 1) - 1.0).abs() < 0.25);
        }
    }

    #[test]
    fn bayes_optimal_boundary_hits_chance_at_large_shift() {
        // The train-optimal rule "class 1 iff x > 0" must fall to ~50%
        // accuracy once the shift pushes both classes past the boundary.
        let (_, test) = gen_synthetic_shift(3, 2000, 10.0).unwrap();
        let mut correct = 0;
        for i in 0..test.len() {
            let pred = (test.inputs.data()[2 * i] > 0.0) as usize;
            correct += (pred == test.labels[i]) as usize;
        }
        let acc = correct as f64 / test.len() as f64;
        assert!((acc - 0.5).abs() < 0.02, "shifted accuracy {acc}");
    }

    #[test]
    fn dataset_validation_catches_inconsistencies() {
        let t = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(Dataset::new(t.clone(), vec![0], Split::Train, 2, None).is_err());
        assert!(Dataset::new(t.clone(), vec![0, 5], Split::Train, 2, None).is_err());
        assert!(Dataset::new(t.clone(), vec![0, 1], Split::Train, 2, Some((0.2, 1.0))).is_err());
        assert!(Dataset::new(t, vec![0, 1], Split::Train, 2, Some((0.0, 1.0))).is_ok());
    }

    #[test]
    fn split_tail_reserves_the_last_samples() {
        let t = Tensor::new(vec![5, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = Dataset::new(t, vec![0, 1, 0, 1, 0], Split::Train, 2, None).unwrap();
        let (head, tail) = d.split_tail(2, Split::Val).unwrap();
        assert_eq!(head.len(), 3);
        assert_eq!(tail.len(), 2);
        assert_eq!(tail.inputs.data(), &[3.0, 4.0]);
        assert_eq!(tail.split, Split::Val);
        assert!(d.split_tail(5, Split::Val).is_err());
    }
}
