//! Forecast metrics, evaluation reports, checkpoints and plot output.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "IGPC" | version u32 | kind u32 | config-json len u64 | config json
//! | round u64 | tensor count u64 | tensors: name len u32, name, rank u32, dims u64…, f64 payload
//! | has-adam u8 [step u64, lr, β1, β2, ε f64, then m and v per tensor (payload only)]
//! | has-rng u8 [seed 32 bytes, stream u64, word position u128]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{seeded, AdamState, Rng, Tensor};
use crate::dynamics::{DriftKind, ObjectGraph};
use crate::error::{Error, Result};
use crate::inference::{predict_batch_with, Batch, Model, ModelConfig, Prediction, TrainState};
use crate::simdata::Dataset;

/// Floor applied to the empirical predictive variance in [`ell_metric`].
pub const VARIANCE_FLOOR: f64 = 1e-6;

fn check_metric_shapes(truth: &Tensor, samples: &Tensor) -> Result<(usize, usize)> {
    let (ts, ss) = (truth.shape(), samples.shape());
    if ss.len() != ts.len() + 1 || ss[1..] != *ts || ts.len() < 2 {
        return Err(Error::dim("metric", format!("truth {ts:?} vs samples {ss:?}")));
    }
    let obs = ts[ts.len() - 1];
    Ok((ss[0], obs))
}

/// `(1/(L·N·A)) Σ_{l,n,a} ‖y_n^a − ŷ_n^{a(l)}‖²` with `truth` shaped
/// `[N][A][O]` and `samples` shaped `[L][N][A][O]`.
pub fn mse_metric(truth: &Tensor, samples: &Tensor) -> Result<f64> {
    let (l, obs) = check_metric_shapes(truth, samples)?;
    if l == 0 {
        return Err(Error::Contract("mse needs at least one sample".into()));
    }
    let y = truth.data();
    let elements = y.len() / obs;
    let total: f64 = samples
        .data()
        .chunks(y.len())
        .map(|s| s.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / (l * elements) as f64)
}

/// Average log-density of the truth under per-element Gaussians fitted to
/// the samples (unbiased variance, floored at [`VARIANCE_FLOOR`]), summed
/// over observed dims and averaged over steps and objects.
pub fn ell_metric(truth: &Tensor, samples: &Tensor) -> Result<f64> {
    let (l, obs) = check_metric_shapes(truth, samples)?;
    if l < 2 {
        return Err(Error::Contract(format!("ell needs at least two samples, got {l}")));
    }
    let y = truth.data();
    let s = samples.data();
    let k = y.len();
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let mean = (0..l).map(|j| s[j * k + i]).sum::<f64>() / l as f64;
        let var = ((0..l).map(|j| (s[j * k + i] - mean).powi(2)).sum::<f64>() / (l - 1) as f64).max(VARIANCE_FLOOR);
        total += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (yi - mean).powi(2) / var;
    }
    Ok(total / (k / obs) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub mse: MeanStd,
    pub ell: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub index: usize,
    pub mse_full: f64,
    pub ell_full: f64,
    pub mse_post_prefix: f64,
    pub ell_post_prefix: f64,
}

/// Predictive summary of one sequence, `[N][A][O]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencePrediction {
    pub index: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub model: DriftKind,
    pub samples: usize,
    pub horizon: usize,
    pub prefix_len: usize,
    pub num_objects: usize,
    pub obs_dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub windows: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub header: ReportHeader,
    /// Steps `0..horizon`.
    pub full: WindowMetrics,
    /// Steps `prefix_len..horizon`.
    pub post_prefix: WindowMetrics,
    pub per_sequence: Vec<SequenceMetrics>,
    /// Per-step MSE and ELL averaged over sequences.
    pub horizon_mse: Vec<f64>,
    pub horizon_ell: Vec<f64>,
    pub predictions: Vec<SequencePrediction>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Slices `[L][N][rows][O]` predictions down to one sequence and a step window.
fn sequence_samples(pred: &Prediction, seq: usize, steps: std::ops::Range<usize>) -> Tensor {
    let (l, a, o) = (pred.num_samples(), pred.num_objects, pred.obs_dim());
    let mut data = Vec::with_capacity(l * steps.len() * a * o);
    for li in 0..l {
        for n in steps.clone() {
            for ai in 0..a {
                for oi in 0..o {
                    data.push(pred.at(li, n, seq * a + ai, oi));
                }
            }
        }
    }
    Tensor::new(vec![l, steps.len(), a, o], data).expect("consistent slice")
}

fn sequence_truth(ds: &Dataset, p: usize, steps: std::ops::Range<usize>) -> Tensor {
    let (a, o) = (ds.num_objects, ds.obs_dim);
    let fl = a * o;
    let base = p * ds.num_steps * fl;
    let t = ds.targets();
    let data = t[base + steps.start * fl..base + steps.end * fl].to_vec();
    Tensor::new(vec![steps.len(), a, o], data).expect("consistent slice")
}

/// Forecasts every sequence of `ds` from its prefix and scores the
/// predictions against the noise-free targets.
pub fn evaluate(model: &Model, ds: &Dataset, samples: usize, horizon: Option<usize>, seed: u64) -> Result<MetricReport> {
    if ds.num_sequences == 0 {
        return Err(Error::Input("evaluation needs at least one sequence".into()));
    }
    if ds.obs_dim != model.config.obs_dim {
        return Err(Error::Input(format!("dataset has {} observed dims, model expects {}", ds.obs_dim, model.config.obs_dim)));
    }
    let model = &model.with_num_objects(ds.num_objects)?;
    let horizon = horizon.unwrap_or(ds.num_steps).min(ds.num_steps);
    let prefix = model.config.prefix_len();
    if horizon <= prefix {
        return Err(Error::Input(format!("horizon {horizon} must exceed the {prefix}-frame prefix")));
    }
    let seqs: Vec<usize> = (0..ds.num_sequences).collect();
    let batch = Batch::from_dataset(ds, &model.config, &seqs, 0, prefix)?;
    let mut rng = seeded(seed);
    let pred = predict_batch_with(model, &batch, horizon, samples, false, &mut rng)?;
    let mut per_sequence = Vec::new();
    let mut predictions = Vec::new();
    let mut horizon_mse = vec![0.0; horizon];
    let mut horizon_ell = vec![0.0; horizon];
    for &p in &seqs {
        let full_s = sequence_samples(&pred, p, 0..horizon);
        let full_t = sequence_truth(ds, p, 0..horizon);
        let post_s = sequence_samples(&pred, p, prefix..horizon);
        let post_t = sequence_truth(ds, p, prefix..horizon);
        per_sequence.push(SequenceMetrics {
            index: p,
            mse_full: mse_metric(&full_t, &full_s)?,
            ell_full: ell_metric(&full_t, &full_s)?,
            mse_post_prefix: mse_metric(&post_t, &post_s)?,
            ell_post_prefix: ell_metric(&post_t, &post_s)?,
        });
        for n in 0..horizon {
            let s = sequence_samples(&pred, p, n..n + 1);
            let t = sequence_truth(ds, p, n..n + 1);
            horizon_mse[n] += mse_metric(&t, &s)? / seqs.len() as f64;
            horizon_ell[n] += ell_metric(&t, &s)? / seqs.len() as f64;
        }
        let (l, k) = (samples as f64, full_t.len());
        let sd = full_s.data();
        let mean: Vec<f64> = (0..k).map(|i| (0..samples).map(|j| sd[j * k + i]).sum::<f64>() / l).collect();
        let std = (0..k)
            .map(|i| ((0..samples).map(|j| (sd[j * k + i] - mean[i]).powi(2)).sum::<f64>() / (l - 1.0).max(1.0)).sqrt())
            .collect();
        predictions.push(SequencePrediction { index: p, mean, std });
    }
    let pick = |f: fn(&SequenceMetrics) -> f64| MeanStd::of(&per_sequence.iter().map(f).collect::<Vec<_>>());
    Ok(MetricReport {
        header: ReportHeader {
            model: model.config.drift.kind,
            samples,
            horizon,
            prefix_len: prefix,
            num_objects: ds.num_objects,
            obs_dim: ds.obs_dim,
            dt: ds.dt,
            seed,
            windows: format!(
                "rollouts start at the first frame after encoding frames 0..{prefix}; `full` scores steps 0..{horizon}, `post_prefix` scores steps {prefix}..{horizon}; targets are noise-free"
            ),
        },
        full: WindowMetrics { mse: pick(|s| s.mse_full), ell: pick(|s| s.ell_full) },
        post_prefix: WindowMetrics { mse: pick(|s| s.mse_post_prefix), ell: pick(|s| s.ell_post_prefix) },
        per_sequence,
        horizon_mse,
        horizon_ell,
        predictions,
    })
}

/// Result of rolling out the independent kinematics alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicsProbe {
    pub steps: usize,
    pub mse: f64,
    pub max_abs_position: f64,
    pub samples: usize,
}

/// Rolls out `f_s` without interaction messages on single-object data
/// (or any object count) and scores the first `steps` frames.
pub fn kinematics_probe(model: &Model, ds: &Dataset, steps: usize, samples: usize, seed: u64) -> Result<KinematicsProbe> {
    if model.config.drift.kind == DriftKind::Gpode {
        return Err(Error::Config("the non-interacting baseline has no separate kinematics function".into()));
    }
    let probe_model = model.with_num_objects(ds.num_objects)?;
    let prefix = probe_model.config.prefix_len();
    let steps = steps.min(ds.num_steps);
    if steps <= prefix.min(steps.saturating_sub(1)) || ds.num_steps < prefix {
        return Err(Error::Input("probe sequences are shorter than the encoder prefix".into()));
    }
    let seqs: Vec<usize> = (0..ds.num_sequences).collect();
    let batch = Batch::from_dataset(ds, &probe_model.config, &seqs, 0, prefix)?;
    let pred = predict_batch_with(&probe_model, &batch, steps, samples, true, &mut seeded(seed))?;
    let mut mse = 0.0;
    let mut max_pos: f64 = 0.0;
    for &p in &seqs {
        let s = sequence_samples(&pred, p, 0..steps);
        mse += mse_metric(&sequence_truth(ds, p, 0..steps), &s)? / seqs.len() as f64;
    }
    for l in 0..pred.num_samples() {
        for n in 0..steps {
            for r in 0..seqs.len() * ds.num_objects {
                for o in 0..2.min(pred.obs_dim()) {
                    max_pos = max_pos.max(pred.at(l, n, r, o).abs());
                }
            }
        }
    }
    Ok(KinematicsProbe { steps, mse, max_abs_position: max_pos, samples })
}

impl Model {
    /// The same parameters applied to a fully connected graph of `a` objects.
    /// Interacting models are object-count agnostic; the flat baseline is not.
    pub fn with_num_objects(&self, a: usize) -> Result<Model> {
        if a == self.config.num_objects {
            return Ok(self.clone());
        }
        if self.config.drift.kind == DriftKind::Gpode {
            return Err(Error::Config("the non-interacting baseline is tied to its object count".into()));
        }
        let mut m = self.clone();
        m.config.num_objects = a;
        m.drift.graph = ObjectGraph::fully_connected(a);
        Ok(m)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"IGPC";
const CKPT_VERSION: u32 = 1;

/// Serializable snapshot of a model, optionally with optimizer and RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub round: usize,
    pub tensors: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
    /// `(seed, stream, word position)` of the training RNG.
    pub rng: Option<([u8; 32], u64, u128)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config.clone(),
            round: 0,
            tensors: model.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            adam: None,
            rng: None,
        }
    }

    pub fn from_state(state: &TrainState) -> Self {
        let mut c = Self::from_model(&state.model);
        c.round = state.round;
        c.adam = Some(state.adam.clone());
        c.rng = Some((state.rng.get_seed(), state.rng.get_stream(), state.rng.get_word_pos()));
        c
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::init(self.config.clone(), &mut seeded(0))?;
        if model.store.len() != self.tensors.len() {
            return Err(Error::Format { offset: 0, detail: format!("{} tensors for {} parameters", self.tensors.len(), model.store.len()) });
        }
        for (name, t) in &self.tensors {
            let id = model.store.id_of(name).ok_or_else(|| Error::Format { offset: 0, detail: format!("unknown tensor `{name}`") })?;
            if model.store.get(id).shape() != t.shape() {
                return Err(Error::Format { offset: 0, detail: format!("tensor `{name}` has shape {:?}", t.shape()) });
            }
            *model.store.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Restores a resumable training state; missing optimizer or RNG state
    /// starts fresh with `lr` and `seed`.
    pub fn to_state(&self, lr: f64, seed: u64) -> Result<TrainState> {
        let model = self.to_model()?;
        let adam = self.adam.clone().unwrap_or_else(|| AdamState::new(&model.store, lr));
        let rng = match self.rng {
            Some((s, stream, pos)) => {
                let mut r = Rng::from_seed(s);
                r.set_stream(stream);
                r.set_word_pos(pos);
                r
            }
            None => seeded(seed),
        };
        Ok(TrainState { model, adam, rng, round: self.round })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let kind = match self.config.drift.kind {
            DriftKind::Igpode => 0u32,
            DriftKind::Gpode => 1,
            DriftKind::Inode => 2,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.round as u64).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let put_payload = |out: &mut Vec<u8>, t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_payload(&mut out, t);
        }
        match &self.adam {
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for v in [a.lr, a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if a.m.len() != self.tensors.len() || a.v.len() != self.tensors.len() {
                    return Err(Error::Contract("optimizer moments do not match tensors".into()));
                }
                for t in a.m.iter().chain(&a.v) {
                    put_payload(&mut out, t);
                }
            }
            None => out.push(0),
        }
        match &self.rng {
            Some((seed, stream, pos)) => {
                out.push(1);
                out.extend_from_slice(seed);
                out.extend_from_slice(&stream.to_le_bytes());
                out.extend_from_slice(&pos.to_le_bytes());
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format { offset: 0, detail: "bad checkpoint magic".into() });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format { offset: 4, detail: format!("unsupported checkpoint version {version}") });
        }
        let kind_at = r.pos;
        let kind = r.u32()?;
        let len = r.u64()? as usize;
        let json_at = r.pos;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format { offset: json_at, detail: format!("config: {e}") })?;
        let expected_kind = match config.drift.kind {
            DriftKind::Igpode => 0,
            DriftKind::Gpode => 1,
            DriftKind::Inode => 2,
        };
        if kind != expected_kind {
            return Err(Error::Format { offset: kind_at, detail: format!("model kind {kind} disagrees with config") });
        }
        let round = r.u64()? as usize;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format { offset: name_at, detail: "tensor name is not UTF-8".into() })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let adam = if r.u8()? == 1 {
            let step = r.u64()?;
            let lr = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let read_moments = |r: &mut ByteReader<'_>| -> Result<Vec<Tensor>> {
                tensors.iter().map(|(_, t)| Tensor::new(t.shape().to_vec(), r.f64s(t.len())?)).collect()
            };
            let m = read_moments(&mut r)?;
            let v = read_moments(&mut r)?;
            Some(AdamState { step, lr, beta1, beta2, eps, m, v })
        } else {
            None
        };
        let rng = if r.u8()? == 1 {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            Some((seed, stream, pos))
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, detail: "trailing bytes after checkpoint".into() });
        }
        Ok(Checkpoint { config, round, tensors, adam, rng })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(Error::Format { offset: self.pos, detail: format!("truncated: need {n} more bytes") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::Format { offset: self.pos, detail: "length overflow".into() })?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Writes one CSV and one SVG per (sequence, object) of `report`.
/// Returns the written paths.
pub fn write_plots(report: &MetricReport, truth: &Dataset, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let h = &report.header;
    if truth.num_objects != h.num_objects || truth.obs_dim != h.obs_dim {
        return Err(Error::Input("truth dataset does not match the report".into()));
    }
    let (a_count, o_count, n_count) = (h.num_objects, h.obs_dim, h.horizon);
    let mut written = Vec::new();
    for pred in &report.predictions {
        if pred.index >= truth.num_sequences || truth.num_steps < n_count {
            return Err(Error::Input(format!("truth lacks sequence {} or steps", pred.index)));
        }
        let tgt = truth.targets();
        for a in 0..a_count {
            let idx = |n: usize, o: usize| (n * a_count + a) * o_count + o;
            let truth_at = |n: usize, o: usize| tgt[((pred.index * truth.num_steps + n) * a_count + a) * o_count + o];
            let mut csv = String::from("t");
            for o in 0..o_count {
                write!(csv, ",truth_{o},mean_{o},lo95_{o},hi95_{o}").unwrap();
            }
            csv.push('\n');
            for n in 0..n_count {
                write!(csv, "{}", n as f64 * h.dt).unwrap();
                for o in 0..o_count {
                    let (m, s) = (pred.mean[idx(n, o)], pred.std[idx(n, o)]);
                    write!(csv, ",{},{},{},{}", truth_at(n, o), m, m - 1.96 * s, m + 1.96 * s).unwrap();
                }
                csv.push('\n');
            }
            let stem = format!("seq{}_obj{}", pred.index, a);
            let csv_path = out_dir.join(format!("{stem}.csv"));
            fs::write(&csv_path, csv)?;
            let series: Vec<Series> = (0..o_count)
                .map(|o| Series {
                    truth: (0..n_count).map(|n| truth_at(n, o)).collect(),
                    mean: (0..n_count).map(|n| pred.mean[idx(n, o)]).collect(),
                    std: (0..n_count).map(|n| pred.std[idx(n, o)]).collect(),
                })
                .collect();
            let svg_path = out_dir.join(format!("{stem}.svg"));
            fs::write(&svg_path, render_svg(&stem, h.dt, &series))?;
            written.push(csv_path);
            written.push(svg_path);
        }
    }
    Ok(written)
}

struct Series {
    truth: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// One panel per observed dimension: truth (black), predictive mean (blue)
/// and a shaded 95% band.
fn render_svg(title: &str, dt: f64, series: &[Series]) -> String {
    let (w, ph, pad) = (640.0, 160.0, 30.0);
    let height = pad + series.len() as f64 * (ph + pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n<text x=\"{pad}\" y=\"18\">{title}</text>\n"
    );
    for (k, s) in series.iter().enumerate() {
        let n = s.mean.len();
        let top = pad + k as f64 * (ph + pad);
        let lo: Vec<f64> = s.mean.iter().zip(&s.std).map(|(m, d)| m - 1.96 * d).collect();
        let hi: Vec<f64> = s.mean.iter().zip(&s.std).map(|(m, d)| m + 1.96 * d).collect();
        let all = lo.iter().chain(&hi).chain(&s.truth).copied();
        let (mut ymin, mut ymax) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !(ymax > ymin) {
            ymin -= 1.0;
            ymax += 1.0;
        }
        let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n.max(2) - 1) as f64;
        let y = |v: f64| top + ph * (1.0 - (v - ymin) / (ymax - ymin));
        let line = |vals: &[f64]| vals.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v))).collect::<Vec<_>>().join(" ");
        let band: Vec<String> = (0..n)
            .map(|i| format!("{:.2},{:.2}", x(i), y(hi[i])))
            .chain((0..n).rev().map(|i| format!("{:.2},{:.2}", x(i), y(lo[i]))))
            .collect();
        writeln!(svg, "<rect x=\"{pad}\" y=\"{top}\" width=\"{}\" height=\"{ph}\" fill=\"none\" stroke=\"#ccc\"/>", w - 2.0 * pad).unwrap();
        writeln!(svg, "<polygon points=\"{}\" fill=\"#1f77b4\" fill-opacity=\"0.2\" stroke=\"none\"/>", band.join(" ")).unwrap();
        writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>", line(&s.mean)).unwrap();
        writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>", line(&s.truth)).unwrap();
        writeln!(svg, "<text x=\"{}\" y=\"{}\">dim {k}  (t = 0 … {:.2})</text>", pad + 4.0, top + 12.0, (n.max(1) - 1) as f64 * dt).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
