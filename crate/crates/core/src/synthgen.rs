//! Seeded synthetic visible/infrared feature populations.
//!
//! Each identity owns a shared latent and one specific latent per modality.
//! A sample of identity `y` seen by camera `c` of modality `m` is
//!
//! ```text
//! x = tanh(P_m · [u_y ; v_{y,m}]) + b_c + noise
//! ```
//!
//! where `P_m` is a fixed random projection per modality and `b_c` a fixed
//! per-camera offset. Every random draw comes from its own derived stream
//! (see [`crate::rng`]), so any identity or camera can be regenerated alone.
//!
//! Identities stay separable by nearest centroid while `noise_sigma` is well
//! below the per-dimension feature scale (about 0.6 for the tanh part); the
//! default of 0.1 sits far inside that range.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "V")]
    Visible,
    #[serde(rename = "I")]
    Infrared,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    /// Class index used by the modality classifier: V = 0, I = 1.
    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Modality::Visible => "V",
            Modality::Infrared => "I",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "V" | "v" => Ok(Modality::Visible),
            "I" | "i" => Ok(Modality::Infrared),
            other => Err(format!("invalid modality {other:?} (expected V or I)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub fn code(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub id: usize,
    pub modality: Modality,
    /// Global camera index; visible cameras come first.
    pub camera: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_ids: usize,
    pub latent_shared: usize,
    pub latent_specific: usize,
    pub input_dim: usize,
    pub cams_v: usize,
    pub cams_i: usize,
    pub samples_per_id_per_cam: usize,
    pub noise_sigma: f64,
    pub camera_bias_sigma: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_ids: 50,
            latent_shared: 8,
            latent_specific: 4,
            input_dim: 64,
            cams_v: 3,
            cams_i: 2,
            samples_per_id_per_cam: 20,
            noise_sigma: 0.1,
            camera_bias_sigma: 0.05,
            seed: 0,
            test_fraction: 0.5,
        }
    }
}

impl GenConfig {
    /// Noisier variant of the defaults with stronger camera effects; retrieval
    /// on it is far from saturated, so protocol and ablation differences show.
    pub fn benchmark(seed: u64) -> Self {
        GenConfig {
            noise_sigma: 0.5,
            camera_bias_sigma: 0.2,
            seed,
            ..GenConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: line {line}, field {field:?}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}: unknown column {column:?} at position {position}")]
    UnknownColumn {
        path: PathBuf,
        column: String,
        position: usize,
    },
    #[error("{path}: expected {expected} rows, found {found} (truncated or padded file)")]
    RowCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: &str| Err(DatasetError::Config(m.to_string()));
        if self.num_ids < 2 {
            return fail("num_ids must be >= 2");
        }
        if self.cams_v < 1 || self.cams_i < 1 {
            return fail("cams_v and cams_i must be >= 1");
        }
        if self.samples_per_id_per_cam < 1 {
            return fail("samples_per_id_per_cam must be >= 1");
        }
        if self.input_dim < 1 || self.latent_shared + self.latent_specific < 1 {
            return fail("input_dim and latent dimensions must be >= 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and >= 0");
        }
        if !(self.camera_bias_sigma >= 0.0 && self.camera_bias_sigma.is_finite()) {
            return fail("camera_bias_sigma must be finite and >= 0");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn num_cameras(&self) -> usize {
        self.cams_v + self.cams_i
    }

    pub fn camera_table(&self) -> Vec<Modality> {
        let mut t = vec![Modality::Visible; self.cams_v];
        t.extend(std::iter::repeat_n(Modality::Infrared, self.cams_i));
        t
    }

    /// Samples requested by the config: ids × cameras × samples per camera.
    pub fn planned_samples(&self) -> usize {
        self.num_ids * self.num_cameras() * self.samples_per_id_per_cam
    }

    /// Samples drawn per (identity, camera) stratum. A stratum needs two draws
    /// so that both splits receive one.
    pub fn samples_per_stratum(&self) -> usize {
        self.samples_per_id_per_cam.max(2)
    }

    pub fn total_samples(&self) -> usize {
        self.num_ids * self.num_cameras() * self.samples_per_stratum()
    }

    /// Test samples per stratum: `round(n · test_fraction)` clamped to `[1, n-1]`.
    pub fn test_per_stratum(&self) -> usize {
        let n = self.samples_per_stratum();
        ((n as f64 * self.test_fraction).round() as usize).clamp(1, n - 1)
    }
}

// stream tags
const TAG_PROJECTION: u64 = 1;
const TAG_SHARED: u64 = 2;
const TAG_SPECIFIC: u64 = 3;
const TAG_CAMERA: u64 = 4;
const TAG_NOISE: u64 = 5;
const TAG_SPLIT: u64 = 6;

fn normals(rng: &mut impl rand::Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub config: GenConfig,
    /// Modality of every global camera index.
    pub camera_table: Vec<Modality>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test)
    }
}

/// Draws a dataset from `config`. Identical configs give identical datasets.
pub fn generate(config: &GenConfig) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let latent = config.latent_shared + config.latent_specific;
    let proj_sigma = 1.0 / (latent as f64).sqrt();
    let projections: Vec<Vec<f64>> = Modality::ALL
        .iter()
        .map(|m| {
            let mut r = rng::stream(config.seed, &[TAG_PROJECTION, m.index() as u64]);
            normals(&mut r, config.input_dim * latent, proj_sigma)
        })
        .collect();
    let camera_table = config.camera_table();
    let biases: Vec<Vec<f64>> = (0..camera_table.len())
        .map(|c| {
            let mut r = rng::stream(config.seed, &[TAG_CAMERA, c as u64]);
            normals(&mut r, config.input_dim, config.camera_bias_sigma)
        })
        .collect();

    let per_stratum = config.samples_per_stratum();
    let n_test = config.test_per_stratum();
    let mut samples = Vec::with_capacity(config.total_samples());
    for id in 0..config.num_ids {
        let shared = normals(
            &mut rng::stream(config.seed, &[TAG_SHARED, id as u64]),
            config.latent_shared,
            1.0,
        );
        let clean: Vec<Vec<f64>> = Modality::ALL
            .iter()
            .map(|m| {
                let specific = normals(
                    &mut rng::stream(config.seed, &[TAG_SPECIFIC, id as u64, m.index() as u64]),
                    config.latent_specific,
                    1.0,
                );
                let z: Vec<f64> = shared.iter().chain(&specific).copied().collect();
                let p = &projections[m.index()];
                (0..config.input_dim)
                    .map(|d| {
                        let row = &p[d * latent..(d + 1) * latent];
                        row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().tanh()
                    })
                    .collect()
            })
            .collect();
        for (camera, &modality) in camera_table.iter().enumerate() {
            let mut order: Vec<usize> = (0..per_stratum).collect();
            order.shuffle(&mut rng::stream(
                config.seed,
                &[TAG_SPLIT, id as u64, camera as u64],
            ));
            let test_set = &order[..n_test];
            for s in 0..per_stratum {
                let noise = normals(
                    &mut rng::stream(config.seed, &[TAG_NOISE, id as u64, camera as u64, s as u64]),
                    config.input_dim,
                    config.noise_sigma,
                );
                let features = clean[modality.index()]
                    .iter()
                    .zip(&biases[camera])
                    .zip(&noise)
                    .map(|((x, b), e)| x + b + e)
                    .collect();
                samples.push(Sample {
                    features,
                    id,
                    modality,
                    camera,
                    split: if test_set.contains(&s) { Split::Test } else { Split::Train },
                });
            }
        }
    }
    Ok(Dataset {
        samples,
        config: config.clone(),
        camera_table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub accuracy: f64,
    pub accuracy_visible: f64,
    pub accuracy_infrared: f64,
    pub test_samples: usize,
}

/// Nearest-class-centroid accuracy on `test`, with centroids from `train`.
/// Samples whose class has no training centroid count as errors.
pub fn nearest_centroid_accuracy(train: &[(&[f64], usize)], test: &[(&[f64], usize)]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let dim = train.first().map_or(0, |t| t.0.len());
    let classes = train.iter().map(|t| t.1 + 1).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, y) in train {
        counts[*y] += 1;
        for (s, v) in sums[*y].iter_mut().zip(x.iter()) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(c, cen)| {
                    cen.as_ref().map(|cen| {
                        let d: f64 = cen.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                        (c, d)
                    })
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            best.map(|(c, _)| c) == Some(*y)
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Certifies learnability: per-modality nearest-centroid identity accuracy on
/// the test split.
pub fn oracle_check(ds: &Dataset) -> OracleReport {
    let mut per = [0.0; 2];
    let mut correct_total = 0.0;
    let mut n_total = 0;
    for m in Modality::ALL {
        let pick = |split: Split| -> Vec<(&[f64], usize)> {
            ds.samples
                .iter()
                .filter(|s| s.split == split && s.modality == m)
                .map(|s| (s.features.as_slice(), s.id))
                .collect()
        };
        let (train, test) = (pick(Split::Train), pick(Split::Test));
        let acc = nearest_centroid_accuracy(&train, &test);
        per[m.index()] = acc;
        correct_total += acc * test.len() as f64;
        n_total += test.len();
    }
    OracleReport {
        accuracy: if n_total == 0 { 0.0 } else { correct_total / n_total as f64 },
        accuracy_visible: per[0],
        accuracy_infrared: per[1],
        test_samples: n_total,
    }
}

/// Sidecar config path for a dataset CSV: same stem, `.json` extension.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the dataset CSV and its JSON sidecar.
pub fn save(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("id,modality,camera,split");
    for d in 0..ds.config.input_dim {
        header.push_str(&format!(",f{d}"));
    }
    writeln!(w, "{header}").map_err(io_err(path))?;
    for s in &ds.samples {
        let mut line = format!("{},{},{},{}", s.id, s.modality.code(), s.camera, s.split.code());
        for v in &s.features {
            line.push(',');
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&ds.config).expect("config serializes");
    fs::write(&side, json + "\n").map_err(io_err(&side))?;
    Ok(())
}

/// Reads a dataset written by [`save`]. Any malformed row rejects the whole file.
pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let config: GenConfig = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: side.clone(),
        source,
    })?;
    config.validate()?;
    let camera_table = config.camera_table();

    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let parse_err = |line: usize, field: &str, message: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        message,
    };

    let header = match lines.next() {
        Some(h) => h.map_err(io_err(path))?,
        None => return Err(parse_err(1, "header", "empty file".into())),
    };
    let mut expected: Vec<String> = ["id", "modality", "camera", "split"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    expected.extend((0..config.input_dim).map(|d| format!("f{d}")));
    let columns: Vec<&str> = header.split(',').collect();
    for (i, col) in columns.iter().enumerate() {
        if expected.get(i).map(String::as_str) != Some(*col) {
            return Err(DatasetError::UnknownColumn {
                path: path.to_path_buf(),
                column: col.to_string(),
                position: i,
            });
        }
    }
    if columns.len() != expected.len() {
        return Err(parse_err(
            1,
            &expected[columns.len()],
            format!("header has {} columns, expected {}", columns.len(), expected.len()),
        ));
    }

    let mut samples = Vec::with_capacity(config.total_samples());
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(io_err(path))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            let missing = expected.get(fields.len()).cloned().unwrap_or_else(|| "<extra>".into());
            return Err(parse_err(
                lineno,
                &missing,
                format!("row has {} fields, expected {}", fields.len(), expected.len()),
            ));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(lineno, "id", format!("{e}")))?;
        if id >= config.num_ids {
            return Err(parse_err(lineno, "id", format!("{id} >= num_ids {}", config.num_ids)));
        }
        let modality: Modality = fields[1].parse().map_err(|e| parse_err(lineno, "modality", e))?;
        let camera: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(lineno, "camera", format!("{e}")))?;
        match camera_table.get(camera) {
            Some(&m) if m == modality => {}
            Some(_) => {
                return Err(parse_err(
                    lineno,
                    "camera",
                    format!("camera {camera} does not belong to modality {modality}"),
                ))
            }
            None => return Err(parse_err(lineno, "camera", format!("unknown camera {camera}"))),
        }
        let split = match fields[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(parse_err(lineno, "split", format!("invalid split {other:?}"))),
        };
        let mut features = Vec::with_capacity(config.input_dim);
        for (d, f) in fields[4..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|e| parse_err(lineno, &expected[4 + d], format!("{e}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, &expected[4 + d], "non-finite value".into()));
            }
            features.push(v);
        }
        samples.push(Sample {
            features,
            id,
            modality,
            camera,
            split,
        });
    }
    if samples.len() != config.total_samples() {
        return Err(DatasetError::RowCount {
            path: path.to_path_buf(),
            expected: config.total_samples(),
            found: samples.len(),
        });
    }
    Ok(Dataset {
        samples,
        config,
        camera_table,
    })
}
