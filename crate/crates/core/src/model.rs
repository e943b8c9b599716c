//! The network: a shared tanh MLP backbone, one shared erased head, one
//! related head per modality, and three linear classifiers.
//!
//! Parameters live in [`MixerModel`]; every forward pass binds them onto a
//! fresh [`Tape`] through [`MixerModel::bind`]. Parameter order (used by the
//! optimizer and the checkpoint format) is: backbone layers, erased head,
//! visible related head, infrared related head, identity classifier,
//! doubled-label classifier, modality classifier; weight before bias.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var, NORM_EPS};
use crate::rng;
use crate::synthgen::{Modality, Sample};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Erased embedding width.
    pub d_e: usize,
    /// Related embedding width.
    pub d_r: usize,
    /// Number of identities.
    pub num_ids: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 64,
            hidden_dims: vec![128, 128],
            d_e: 32,
            d_r: 32,
            num_ids: 50,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_e == 0 || self.d_r == 0 || self.num_ids == 0 {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::Config("hidden dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the backbone output.
    pub fn shared_width(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }

    /// `(fan_in, fan_out)` of every linear layer in parameter order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            shapes.push((prev, h));
            prev = h;
        }
        let s = self.shared_width();
        shapes.push((s, self.d_e));
        shapes.push((s, self.d_r));
        shapes.push((s, self.d_r));
        shapes.push((self.d_e, self.num_ids));
        shapes.push((self.d_r, 2 * self.num_ids));
        shapes.push((self.d_e, 2));
        shapes
    }

    /// Closed form: sum over linear layers of `fan_in · fan_out + fan_out`.
    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::from_vec(fan_in, fan_out, data).expect("shape"),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        Ok(tape.add_row_bias(y, self.bias)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerModel {
    pub config: ModelConfig,
    pub backbone: Vec<Linear>,
    pub erased_head: Linear,
    /// Indexed by [`Modality::index`].
    pub related_heads: [Linear; 2],
    pub id_classifier: Linear,
    pub related_classifier: Linear,
    pub modality_classifier: Linear,
}

/// Model parameters bound as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub input_dim: usize,
    pub backbone: Vec<BoundLinear>,
    pub erased_head: BoundLinear,
    pub related_heads: [BoundLinear; 2],
    pub id_classifier: BoundLinear,
    pub related_classifier: BoundLinear,
    pub modality_classifier: BoundLinear,
    /// Every parameter leaf in parameter order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Backbone output, `B × shared`.
    pub z: Var,
    /// Erased embedding, `B × d_e`.
    pub z_e: Var,
    /// Related embedding, `B × d_r`, row `i` from the head of its modality.
    pub z_r: Var,
}

impl MixerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[0x6d6f64656c]);
        let shapes = config.layer_shapes();
        let mut layers = shapes.iter().map(|&(i, o)| Linear::init(i, o, &mut r));
        let backbone = layers.by_ref().take(config.hidden_dims.len()).collect();
        let mut next = || layers.next().expect("layer count");
        let erased_head = next();
        let related_heads = [next(), next()];
        let id_classifier = next();
        let related_classifier = next();
        let modality_classifier = next();
        Ok(MixerModel {
            config,
            backbone,
            erased_head,
            related_heads,
            id_classifier,
            related_classifier,
            modality_classifier,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone
            .iter()
            .chain([
                &self.erased_head,
                &self.related_heads[0],
                &self.related_heads[1],
                &self.id_classifier,
                &self.related_classifier,
                &self.modality_classifier,
            ])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        let [rv, ri] = &mut self.related_heads;
        self.backbone.iter_mut().chain([
            &mut self.erased_head,
            rv,
            ri,
            &mut self.id_classifier,
            &mut self.related_classifier,
            &mut self.modality_classifier,
        ])
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut params = Vec::new();
        let mut bind = |l: &Linear| {
            let weight = tape.leaf(l.weight.clone());
            let bias = tape.leaf(l.bias.clone());
            params.push(weight);
            params.push(bias);
            BoundLinear { weight, bias }
        };
        let backbone = self.backbone.iter().map(&mut bind).collect();
        let erased_head = bind(&self.erased_head);
        let related_heads = [bind(&self.related_heads[0]), bind(&self.related_heads[1])];
        let id_classifier = bind(&self.id_classifier);
        let related_classifier = bind(&self.related_classifier);
        let modality_classifier = bind(&self.modality_classifier);
        BoundModel {
            input_dim: self.config.input_dim,
            backbone,
            erased_head,
            related_heads,
            id_classifier,
            related_classifier,
            modality_classifier,
            params,
        }
    }

    /// Embeds samples in order, in fixed-size chunks on fresh tapes.
    pub fn embed_dataset<'a, I>(&self, samples: I) -> Result<Vec<EmbeddingRecord>>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        const CHUNK: usize = 256;
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let (x, modalities) = batch_inputs(&mut tape, chunk, self.config.input_dim)?;
            let fwd = bound.forward(&mut tape, x, &modalities)?;
            let (ze, zr) = (tape.value(fwd.z_e), tape.value(fwd.z_r));
            for (i, s) in chunk.iter().enumerate() {
                let z_e = ze.row(i).to_vec();
                let z_r = zr.row(i).to_vec();
                let z_f = fuse(&z_e, &z_r)?;
                out.push(EmbeddingRecord {
                    z_e,
                    z_r,
                    z_f,
                    id: s.id,
                    modality: s.modality,
                    camera: s.camera,
                });
            }
        }
        Ok(out)
    }
}

/// Stacks sample features into a leaf and collects their modalities.
pub fn batch_inputs(
    tape: &mut Tape,
    batch: &[&Sample],
    input_dim: usize,
) -> Result<(Var, Vec<Modality>)> {
    let mut data = Vec::with_capacity(batch.len() * input_dim);
    for (i, s) in batch.iter().enumerate() {
        if s.features.len() != input_dim {
            return Err(ModelError::Input(format!(
                "sample {i} has {} features, model expects {input_dim}",
                s.features.len()
            )));
        }
        data.extend_from_slice(&s.features);
    }
    let x = tape.leaf(Tensor::from_vec(batch.len(), input_dim, data)?);
    Ok((x, batch.iter().map(|s| s.modality).collect()))
}

impl BoundModel {
    /// Runs the backbone and heads. Rows of `z_r` are routed to the head of
    /// their modality; a head with no rows in the batch stays off the tape.
    pub fn forward(&self, tape: &mut Tape, x: Var, modalities: &[Modality]) -> Result<ForwardOutput> {
        let (rows, cols) = tape.value(x).shape();
        if cols != self.input_dim {
            return Err(ModelError::Input(format!(
                "input has {cols} features, model expects {}",
                self.input_dim
            )));
        }
        if rows != modalities.len() {
            return Err(ModelError::Input(format!(
                "{rows} input rows but {} modality labels",
                modalities.len()
            )));
        }
        let mut h = x;
        for layer in &self.backbone {
            let pre = layer.apply(tape, h)?;
            h = tape.tanh(pre);
        }
        let z = h;
        let z_e = self.erased_head.apply(tape, z)?;

        let split: [Vec<usize>; 2] = Modality::ALL.map(|m| {
            (0..rows).filter(|&i| modalities[i] == m).collect()
        });
        let z_r = match (&split[0].is_empty(), &split[1].is_empty()) {
            (false, true) => self.related_heads[0].apply(tape, z)?,
            (true, false) => self.related_heads[1].apply(tape, z)?,
            _ => {
                let zv = tape.gather_rows(z, &split[0])?;
                let zi = tape.gather_rows(z, &split[1])?;
                let rv = self.related_heads[0].apply(tape, zv)?;
                let ri = self.related_heads[1].apply(tape, zi)?;
                let stacked = tape.concat_rows(rv, ri)?;
                let mut position = vec![0; rows];
                for (k, &i) in split[0].iter().chain(&split[1]).enumerate() {
                    position[i] = k;
                }
                tape.gather_rows(stacked, &position)?
            }
        };
        Ok(ForwardOutput { z, z_e, z_r })
    }
}

/// Concatenation of the L2-normalized erased and related embeddings.
pub fn fuse(z_e: &[f64], z_r: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(z_e.len() + z_r.len());
    for part in [z_e, z_r] {
        let norm = part.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > NORM_EPS) {
            return Err(AutodiffError::DegenerateVector {
                op: "fuse",
                row: 0,
                norm,
            }
            .into());
        }
        out.extend(part.iter().map(|x| x / norm));
    }
    Ok(out)
}

/// Per-sample inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub z_e: Vec<f64>,
    pub z_r: Vec<f64>,
    pub z_f: Vec<f64>,
    pub id: usize,
    pub modality: Modality,
    pub camera: usize,
}

impl EmbeddingRecord {
    /// Builds a record, deriving the fused embedding.
    pub fn new(z_e: Vec<f64>, z_r: Vec<f64>, id: usize, modality: Modality, camera: usize) -> Result<Self> {
        let z_f = fuse(&z_e, &z_r)?;
        Ok(EmbeddingRecord {
            z_e,
            z_r,
            z_f,
            id,
            modality,
            camera,
        })
    }
}

const MAGIC: &[u8; 6] = b"MIXER1";

/// Checkpoint header, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Epochs of training already applied to the parameters.
    #[serde(default)]
    pub epochs_completed: usize,
    /// Optimizer step counter.
    #[serde(default)]
    pub step: u64,
    /// Whether Adam moments (first then second, parameter order) follow the
    /// parameters.
    #[serde(default)]
    pub optimizer_state: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MixerModel,
    pub epochs_completed: usize,
    pub step: u64,
    /// `(first moments, second moments)` in parameter order.
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn of(model: MixerModel) -> Self {
        Checkpoint {
            model,
            epochs_completed: 0,
            step: 0,
            moments: None,
        }
    }

    /// Serializes to the flat container:
    /// `"MIXER1" | u64 LE header length | header JSON | f64 LE payload`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            epochs_completed: self.epochs_completed,
            step: self.step,
            optimizer_state: self.moments.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.model.params().into_iter().for_each(&mut put);
        if let Some((m, v)) = &self.moments {
            m.iter().chain(v).for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |message: String| ModelError::Checkpoint {
            path: path.to_string(),
            message,
        };
        if bytes.len() < 14 || &bytes[..6] != MAGIC {
            return Err(bad("missing MIXER1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let body = &bytes[14..];
        if body.len() < len {
            return Err(bad("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..len])
            .map_err(|e| bad(format!("header: {e}")))?;
        let mut model = MixerModel::new(header.model.clone())?;
        let mut payload = body[len..].chunks_exact(8).map(|c| {
            f64::from_le_bytes(c.try_into().expect("8 bytes"))
        });
        let n_params = model.parameter_count();
        let expected = if header.optimizer_state { 3 * n_params } else { n_params };
        if body.len() - len != expected * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, expected {}",
                body.len() - len,
                expected * 8
            )));
        }
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v = payload.next().expect("length checked");
            }
        }
        let moments = header.optimizer_state.then(|| {
            let shapes: Vec<(usize, usize)> = model.params().iter().map(|t| t.shape()).collect();
            let mut read = || {
                shapes
                    .iter()
                    .map(|&(r, c)| {
                        let data = payload.by_ref().take(r * c).collect();
                        Tensor::from_vec(r, c, data).expect("length checked")
                    })
                    .collect::<Vec<_>>()
            };
            let m = read();
            let v = read();
            (m, v)
        });
        Ok(Checkpoint {
            model,
            epochs_completed: header.epochs_completed,
            step: header.step,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
