//! Datasets (synthetic blobs, IDX, CSV) and accuracy evaluation.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::network::{forward_batch, ParameterStore};
use crate::tensor::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled samples stored as one flat row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    class_count: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        class_count: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(Error::Validation("dataset is empty".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} labels of dimension {dim} need {} values, got {}",
                labels.len(),
                labels.len() * dim,
                inputs.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Validation(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            dim,
            class_count,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (
            &self.inputs[i * self.dim..(i + 1) * self.dim],
            self.labels[i],
        )
    }

    /// Copies the listed samples into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            let (xi, yi) = self.sample(i);
            x.extend_from_slice(xi);
            y.push(yi);
        }
        (x, y)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (x, y) = self.gather(idx);
        Dataset::new(
            x,
            y,
            self.dim,
            self.class_count,
            self.split,
            self.provenance.clone(),
        )
    }

    /// Per class, skips the first `skip` samples (in file order) and keeps the
    /// next `per_class`. Errors if any class runs short.
    pub fn stratified(&self, per_class: usize, skip: usize) -> Result<Dataset> {
        let mut seen = vec![0usize; self.class_count];
        let mut idx = Vec::with_capacity(per_class * self.class_count);
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] >= skip && seen[l] < skip + per_class {
                idx.push(i);
            }
            seen[l] += 1;
        }
        if let Some((c, &n)) = seen.iter().enumerate().find(|(_, &n)| n < skip + per_class) {
            return Err(Error::Validation(format!(
                "class {c} has {n} samples, need {}",
                skip + per_class
            )));
        }
        let mut out = self.subset(&idx)?;
        out.provenance = format!("{} [per_class={per_class}, skip={skip}]", self.provenance);
        Ok(out)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
            .iter()
            .map(|&c| c as f64 / self.len() as f64)
            .collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.inputs
            .chunks(self.dim)
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Gaussian clusters around random centres on a sphere of radius
/// `radius / 2`; every sample is projected into the ball of `radius`.
///
/// `seed` fixes the centres, `stream` the noise, so train and test splits of
/// one task share centres but not samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub class_count: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_radius() -> f64 {
    1.0
}

impl BlobsConfig {
    pub fn new(class_count: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Self {
        BlobsConfig {
            class_count,
            dim,
            per_class,
            spread,
            seed,
            stream: 0,
            radius: 1.0,
        }
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "blobs/centers"));
        (0..self.class_count)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter().map(|a| a / n * 0.5 * self.radius).collect()
            })
            .collect()
    }
}

pub fn gen_blobs(cfg: &BlobsConfig, split: Split) -> Result<Dataset> {
    if cfg.class_count < 2 {
        return Err(Error::Validation("blobs need at least two classes".into()));
    }
    if cfg.dim == 0 || cfg.per_class == 0 || !(cfg.spread >= 0.0) || !(cfg.radius > 0.0) {
        return Err(Error::Validation(format!(
            "invalid blobs configuration {cfg:?}"
        )));
    }
    let centers = cfg.centers();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("blobs/samples/{}", cfg.stream),
    ));
    let mut inputs = Vec::with_capacity(cfg.class_count * cfg.per_class * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.class_count * cfg.per_class);
    for (c, mu) in centers.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let mut x: Vec<f64> = mu
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + cfg.spread * z
                })
                .collect();
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > cfg.radius {
                x.iter_mut().for_each(|a| *a *= cfg.radius / n);
            }
            inputs.extend(x);
            labels.push(c);
        }
    }
    let provenance = format!(
        "blobs(k={}, dim={}, per_class={}, spread={}, seed={}, stream={})",
        cfg.class_count, cfg.dim, cfg.per_class, cfg.spread, cfg.seed, cfg.stream
    );
    Dataset::new(inputs, labels, cfg.dim, cfg.class_count, split, provenance)
}

/// An unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let need = |offset: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + n {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                message: format!(
                    "truncated {what}: missing {} byte(s)",
                    offset + n - bytes.len()
                ),
            });
        }
        Ok(())
    };
    need(0, 4, "magic")?;
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic: first two bytes must be zero".into(),
        });
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Parse {
            offset: 2,
            message: format!("unsupported element type 0x{:02x}", bytes[2]),
        });
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::Parse {
            offset: 3,
            message: "zero dimensions".into(),
        });
    }
    need(4, 4 * ndims, "dimension table")?;
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let start = 4 + 4 * ndims;
    let count: usize = dims.iter().product();
    need(start, count, "payload")?;
    if bytes.len() > start + count {
        return Err(Error::Parse {
            offset: (start + count) as u64,
            message: format!("{} trailing byte(s)", bytes.len() - start - count),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

pub fn write_idx(array: &IdxArray) -> Result<Vec<u8>> {
    if array.dims.iter().product::<usize>() != array.data.len() || array.dims.len() > 255 {
        return Err(Error::Dimension("IDX dims do not match payload".into()));
    }
    let mut out = vec![0, 0, IDX_UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Dimension("IDX dimension too large".into()))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

/// Reads a file, transparently inflating gzip.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Builds a dataset from an image IDX array and a label IDX array; pixels
/// are scaled to `[0, 1]`.
pub fn idx_dataset(
    images: &IdxArray,
    labels: &IdxArray,
    split: Split,
    provenance: impl Into<String>,
) -> Result<Dataset> {
    let n = *images.dims.first().unwrap_or(&0);
    if labels.dims != [n] {
        return Err(Error::Dimension(format!(
            "{n} images but label array has dims {:?}",
            labels.dims
        )));
    }
    let dim: usize = images.dims[1..].iter().product();
    let class_count = labels
        .data
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1)
        .max(2);
    let inputs = images.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = labels.data.iter().map(|&b| b as usize).collect();
    Dataset::new(inputs, labels, dim.max(1), class_count, split, provenance)
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let parse = |p: &Path| {
        parse_idx(&read_maybe_gz(p)?).map_err(|e| Error::Stage {
            stage: format!("reading {}", p.display()),
            source: Box::new(e),
        })
    };
    idx_dataset(
        &parse(images)?,
        &parse(labels)?,
        split,
        format!("idx:{},{}", images.display(), labels.display()),
    )
}

/// CSV with a header row, a `label` column and numeric feature columns.
pub fn load_csv(path: &Path, class_count: Option<usize>, split: Split) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Validation(format!("{}: no `label` column", path.display())))?;
    let dim = headers.len() - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            let field = field.trim();
            if c == label_col {
                labels.push(field.parse::<usize>().map_err(|e| {
                    Error::Validation(format!("row {}: label `{field}`: {e}", row + 1))
                })?);
            } else {
                inputs.push(field.parse::<f64>().map_err(|e| {
                    Error::Validation(format!("row {}: value `{field}`: {e}", row + 1))
                })?);
            }
        }
    }
    let k = class_count.unwrap_or_else(|| labels.iter().max().map_or(2, |m| m + 1));
    Dataset::new(
        inputs,
        labels,
        dim,
        k,
        split,
        format!("csv:{}", path.display()),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Error rate, `1 − accuracy`.
    pub metric_m: f64,
    pub loss: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub count: usize,
}

const EVAL_CHUNK: usize = 256;

/// Accuracy (argmax with lowest-index ties) and mean cross-entropy.
pub fn evaluate(store: &ParameterStore, data: &Dataset) -> Result<EvalReport> {
    let spec = store.spec();
    if spec.input_len() != data.dim() || spec.class_count != data.class_count() {
        return Err(Error::Dimension(format!(
            "model takes {} inputs / {} classes, dataset has {} / {}",
            spec.input_len(),
            spec.class_count,
            data.dim(),
            data.class_count()
        )));
    }
    let k = spec.class_count;
    let mut correct = vec![0usize; k];
    let mut seen = vec![0usize; k];
    let mut losses = Vec::with_capacity(data.len());
    let labels = data.labels();
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let x = &data.inputs()[start * data.dim()..end * data.dim()];
        let logits = forward_batch(store, x, end - start)?;
        for (r, row) in logits.chunks(k).enumerate() {
            let y = labels[start + r];
            seen[y] += 1;
            if argmax(row) == Some(y) {
                correct[y] += 1;
            }
            losses.push(crate::tensor::kernels::cross_entropy_row(row, y));
        }
    }
    let total: usize = correct.iter().sum();
    let accuracy = total as f64 / data.len() as f64;
    Ok(EvalReport {
        accuracy,
        metric_m: 1.0 - accuracy,
        loss: crate::stats::mean(&losses),
        per_class_accuracy: correct
            .iter()
            .zip(&seen)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        count: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelTag, NetworkSpec};

    fn small_blobs(spread: f64) -> BlobsConfig {
        BlobsConfig::new(4, 6, 30, spread, 3)
    }

    #[test]
    fn blobs_deterministic_and_bounded() {
        let cfg = small_blobs(0.3);
        let a = gen_blobs(&cfg, Split::Train).unwrap();
        assert_eq!(a, gen_blobs(&cfg, Split::Train).unwrap());
        assert!(a.max_norm() <= 1.0 + 1e-12);
        let other = BlobsConfig {
            stream: 1,
            ..cfg.clone()
        };
        assert_ne!(
            a.inputs(),
            gen_blobs(&other, Split::Train).unwrap().inputs()
        );
        assert!(gen_blobs(&BlobsConfig::new(1, 3, 3, 0.1, 0), Split::Train).is_err());
    }

    #[test]
    fn zero_spread_is_nearest_centroid_separable() {
        let cfg = small_blobs(0.0);
        let d = gen_blobs(&cfg, Split::Test).unwrap();
        let centers = cfg.centers();
        for i in 0..d.len() {
            let (x, y) = d.sample(i);
            let dists: Vec<f64> = centers
                .iter()
                .map(|c| -c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            assert_eq!(argmax(&dists), Some(y));
        }
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let arr = IdxArray {
            dims: vec![3, 2, 2],
            data: vec![0; 12],
        };
        let bytes = write_idx(&arr).unwrap();
        assert_eq!(parse_idx(&bytes).unwrap(), arr);
        let labels = IdxArray {
            dims: vec![3],
            data: vec![0, 1, 1],
        };
        let d = idx_dataset(&arr, &labels, Split::Test, "synthetic").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 4);
        assert!(d.inputs().iter().all(|&v| v == 0.0));

        let cut = &bytes[..bytes.len() - 5];
        match parse_idx(cut) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, cut.len() as u64);
                assert!(message.contains("missing 5 byte"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = 7;
        assert!(matches!(
            parse_idx(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn stratified_takes_per_class_windows() {
        let d = gen_blobs(&small_blobs(0.1), Split::Train).unwrap();
        let s = d.stratified(5, 10).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s.sample(0).0, d.sample(10).0);
        assert!(d.stratified(25, 10).is_err());
    }

    #[test]
    fn constant_model_accuracy_is_class_frequency() {
        let spec = NetworkSpec::mlp(&[6, 5, 4]).unwrap();
        let mut m = ParameterStore::zeros(spec, ModelTag::Reference).unwrap();
        let b = m.layout()[1].bias_range();
        m.values_mut()[b].copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        let d = gen_blobs(&small_blobs(0.1), Split::Test).unwrap();
        let r = evaluate(&m, &d).unwrap();
        assert_eq!(r.accuracy, d.class_frequencies()[2]);
        assert_eq!(r.metric_m, 1.0 - r.accuracy);

        // zero bias: ties resolve to class 0
        let z = ParameterStore::zeros(m.spec().clone(), ModelTag::Reference).unwrap();
        assert_eq!(evaluate(&z, &d).unwrap().accuracy, 0.25);
    }
}
