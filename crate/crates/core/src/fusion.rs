//! The chained two-stream pipeline: a CT-only network, an early-fusion
//! network on CT plus registered PET, and a late-fusion network that reads CT
//! together with both streams' probability maps. Whole volumes are segmented
//! with overlapping sliding windows whose probabilities are averaged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_json, write_json, Error, Result};
use crate::grid::Grid3;
use crate::psnn::{load_model, predict_prob, save_model, train_stream, ModelWeights, PSNNConfig, PatchProvider, Tensor, TrainConfig};
use crate::volio::{
    crop_padded, load_mask, load_volume, patch_at, sample_patch_centers, CaseManifest, Mask, Modality, Normalization,
    PatchKind, PatchSample, Volume,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "EF")]
    Ef,
    #[serde(rename = "LF")]
    Lf,
}

impl StreamKind {
    pub const ALL: [StreamKind; 3] = [StreamKind::Ct, StreamKind::Ef, StreamKind::Lf];

    /// CT → [CT]; EF → [CT, PET]; LF → [CT, P_CT, P_EF].
    pub fn channels(self) -> usize {
        match self {
            StreamKind::Ct => 1,
            StreamKind::Ef => 2,
            StreamKind::Lf => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Ct => "CT",
            StreamKind::Ef => "EF",
            StreamKind::Lf => "LF",
        }
    }

    /// Row label in result tables; the late-fusion output is the full chain.
    pub fn row_label(self) -> &'static str {
        match self {
            StreamKind::Ct => "CT",
            StreamKind::Ef => "EF",
            StreamKind::Lf => "EF+LF",
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            StreamKind::Ct => 0,
            StreamKind::Ef => 1,
            StreamKind::Lf => 2,
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Window origins along one axis: `0, s, 2s, …` plus a last origin clamped to
/// `dim - window` when the stride would leave the end uncovered.
pub fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= dim {
        return vec![0];
    }
    let mut out = vec![0];
    let mut o = 0;
    while o + window < dim {
        o = (o + stride.max(1)).min(dim - window);
        out.push(o);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingWindowPlan {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    /// Shape of the volume the plan was built for.
    pub shape: [usize; 3],
    /// Zero padding added before each axis when the window is larger than
    /// the volume; origins refer to the padded grid.
    pub pad_before: [usize; 3],
    pub positions: Vec<[usize; 3]>,
}

impl SlidingWindowPlan {
    /// True when some axis had to be padded to fit the window.
    pub fn padded(&self) -> bool {
        (0..3).any(|a| self.window[a] > self.shape[a])
    }
}

pub fn sliding_window_positions(shape: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<SlidingWindowPlan> {
    if window.iter().chain(&stride).chain(&shape).any(|&v| v == 0) {
        return Err(Error::InvalidConfig(format!(
            "window {window:?}, stride {stride:?} and shape {shape:?} must be positive"
        )));
    }
    let pad_before: [usize; 3] = std::array::from_fn(|a| window[a].saturating_sub(shape[a]) / 2);
    if (0..3).any(|a| window[a] > shape[a]) {
        log::warn!("window {window:?} exceeds volume {shape:?}; zero-padding symmetrically");
    }
    let axes: [Vec<usize>; 3] = std::array::from_fn(|a| axis_origins(shape[a].max(window[a]), window[a], stride[a]));
    let mut positions = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                positions.push([x, y, z]);
            }
        }
    }
    Ok(SlidingWindowPlan { window, stride, shape, pad_before, positions })
}

/// Mean of the sigmoid output over every window covering each voxel.
pub fn predict_volume(model: &ModelWeights<f32>, channels: &[Volume], plan: &SlidingWindowPlan) -> Result<Volume> {
    let Some(first) = channels.first() else {
        return Err(Error::ChannelMismatch { expected: model.config.in_channels, got: 0 });
    };
    if channels.len() != model.config.in_channels {
        return Err(Error::ChannelMismatch { expected: model.config.in_channels, got: channels.len() });
    }
    let shape = first.dims();
    if channels.iter().any(|c| c.dims() != shape) || plan.shape != shape {
        return Err(Error::ShapeMismatch(format!("channel stack does not match the plan shape {:?}", plan.shape)));
    }
    let win = plan.window;
    let out = aggregate_windows(plan, |start| {
        let mut data = Vec::with_capacity(win.iter().product::<usize>() * channels.len());
        for c in channels {
            data.extend_from_slice(crop_padded(&c.data, start, win, 0.0).data());
        }
        let input = Tensor { n: 1, c: channels.len(), dims: win, data };
        Ok(predict_prob(model, &input)?.data)
    })?;
    Ok(first.with_data(out, Modality::Prob))
}

/// Averages per-window outputs over the plan's grid. `window_out` receives
/// the window start on the unpadded grid (may be negative) and returns the
/// window's values in x-fastest order.
pub(crate) fn aggregate_windows(
    plan: &SlidingWindowPlan,
    mut window_out: impl FnMut([isize; 3]) -> Result<Vec<f32>>,
) -> Result<Grid3<f32>> {
    let (shape, win) = (plan.shape, plan.window);
    let mut sum = Grid3::filled(shape, 0.0f64);
    let mut count = Grid3::filled(shape, 0u32);
    for pos in &plan.positions {
        let start: [isize; 3] = std::array::from_fn(|a| pos[a] as isize - plan.pad_before[a] as isize);
        let vals = window_out(start)?;
        for z in 0..win[2] {
            let sz = start[2] + z as isize;
            if sz < 0 || sz >= shape[2] as isize {
                continue;
            }
            for y in 0..win[1] {
                let sy = start[1] + y as isize;
                if sy < 0 || sy >= shape[1] as isize {
                    continue;
                }
                for x in 0..win[0] {
                    let sx = start[0] + x as isize;
                    if sx < 0 || sx >= shape[0] as isize {
                        continue;
                    }
                    let i = sum.index(sx as usize, sy as usize, sz as usize);
                    sum.data_mut()[i] += vals[x + win[0] * (y + win[1] * z)] as f64;
                    count.data_mut()[i] += 1;
                }
            }
        }
    }
    Ok(Grid3::from_vec(shape, sum.data().iter().zip(count.data()).map(|(&s, &n)| (s / n.max(1) as f64) as f32).collect())
        .expect("shape preserved"))
}

/// In-memory volumes of one case, all on the RTCT grid.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub case_id: String,
    pub ct: Volume,
    pub registered_pet: Option<Volume>,
    pub gtv: Mask,
}

impl CaseData {
    pub fn load(case: &CaseManifest) -> Result<Self> {
        let ct = load_volume(&case.rtct)?;
        let gtv = load_mask(&case.gtv_mask)?;
        gtv.check_aligned(&ct)?;
        let registered_pet = match &case.registered_pet {
            Some(p) => {
                let v = load_volume(p)?;
                if !v.same_geometry(ct.spacing, ct.dims()) {
                    return Err(Error::ShapeMismatch(format!("case {}: registered PET is not on the RTCT grid", case.case_id)));
                }
                Some(v)
            }
            None => None,
        };
        Ok(Self { case_id: case.case_id.clone(), ct, registered_pet, gtv })
    }
}

/// Inference-time settings shared by every stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub threshold: f32,
    pub normalization: Normalization,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self { window: [80, 80, 64], stride: [48, 48, 32], threshold: 0.5, normalization: Normalization::default() }
    }
}

impl PipelineSettings {
    pub fn plan(&self, shape: [usize; 3]) -> Result<SlidingWindowPlan> {
        sliding_window_positions(shape, self.window, self.stride)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub net_configs: BTreeMap<StreamKind, PSNNConfig>,
    pub train_config: Option<TrainConfig>,
    pub seeds: BTreeMap<StreamKind, u64>,
    /// Hash of the manifest (or case list) the models were trained on.
    pub manifest_hash: String,
    pub train_cases: Vec<String>,
    pub model_hashes: BTreeMap<StreamKind, String>,
    pub steps: BTreeMap<StreamKind, usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineModels {
    pub ct: Option<ModelWeights<f32>>,
    pub ef: Option<ModelWeights<f32>>,
    pub lf: Option<ModelWeights<f32>>,
    pub settings: PipelineSettings,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct PipelineFile {
    settings: PipelineSettings,
    provenance: Provenance,
    streams: Vec<StreamKind>,
}

impl PipelineModels {
    pub fn model(&self, kind: StreamKind) -> Option<&ModelWeights<f32>> {
        match kind {
            StreamKind::Ct => self.ct.as_ref(),
            StreamKind::Ef => self.ef.as_ref(),
            StreamKind::Lf => self.lf.as_ref(),
        }
    }

    fn require(&self, kind: StreamKind) -> Result<&ModelWeights<f32>> {
        let m = self.model(kind).ok_or(Error::MissingUpstreamModel(kind.name()))?;
        if m.config.in_channels != kind.channels() {
            return Err(Error::ChannelMismatch { expected: kind.channels(), got: m.config.in_channels });
        }
        Ok(m)
    }

    /// Writes `pipeline.json` plus one weight pair per trained stream.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut streams = Vec::new();
        for kind in StreamKind::ALL {
            if let Some(m) = self.model(kind) {
                save_model(m, &dir.join(kind.name().to_lowercase()))?;
                streams.push(kind);
            }
        }
        write_json(
            &dir.join("pipeline.json"),
            &PipelineFile { settings: self.settings.clone(), provenance: self.provenance.clone(), streams },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: PipelineFile = read_json(&dir.join("pipeline.json"))?;
        let mut models = PipelineModels {
            ct: None,
            ef: None,
            lf: None,
            settings: file.settings,
            provenance: file.provenance,
        };
        for kind in file.streams {
            let expected = models.provenance.net_configs.get(&kind);
            let m = load_model(&dir.join(kind.name().to_lowercase()), expected)?;
            if let Some(h) = models.provenance.model_hashes.get(&kind) {
                if *h != model_hash(&m) {
                    return Err(Error::ManifestMismatch(format!("{kind} weights do not match the recorded hash")));
                }
            }
            match kind {
                StreamKind::Ct => models.ct = Some(m),
                StreamKind::Ef => models.ef = Some(m),
                StreamKind::Lf => models.lf = Some(m),
            }
        }
        Ok(models)
    }
}

/// SHA-256 over tensor names and little-endian values.
pub fn model_hash(w: &ModelWeights<f32>) -> String {
    let mut h = Sha256::new();
    for p in &w.params {
        h.update(p.name.as_bytes());
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash identifying a set of training cases by id and file paths.
pub fn cases_hash(cases: &[CaseManifest]) -> String {
    let mut h = Sha256::new();
    for c in cases {
        h.update(serde_json::to_vec(c).expect("manifest serializes"));
    }
    hex(&h.finalize())
}

fn normalized(vol: &Volume, norm: &Normalization) -> Volume {
    vol.with_data(norm.apply(vol), Modality::Other)
}

fn lf_stack(ct: Volume, p_ct: Volume, p_ef: Volume) -> Vec<Volume> {
    vec![ct, p_ct, p_ef]
}

/// Normalized input channels of `kind` for one case. LF runs the frozen CT
/// and EF models over the whole volume first.
pub fn prepare_channels(kind: StreamKind, case: &CaseData, models: Option<&PipelineModels>, settings: &PipelineSettings) -> Result<Vec<Volume>> {
    let ct = normalized(&case.ct, &settings.normalization);
    let pet = || {
        case.registered_pet
            .as_ref()
            .map(|p| normalized(p, &settings.normalization))
            .ok_or_else(|| Error::MissingRegisteredPet(case.case_id.clone()))
    };
    match kind {
        StreamKind::Ct => Ok(vec![ct]),
        StreamKind::Ef => Ok(vec![ct, pet()?]),
        StreamKind::Lf => {
            let pet = pet()?;
            let models = models.ok_or(Error::MissingUpstreamModel("CT"))?;
            let (ct_m, ef_m) = (models.require(StreamKind::Ct)?, models.require(StreamKind::Ef)?);
            let plan = settings.plan(ct.dims())?;
            let p_ct = predict_volume(ct_m, std::slice::from_ref(&ct), &plan)?;
            let p_ef = predict_volume(ef_m, &[ct.clone(), pet], &plan)?;
            Ok(lf_stack(ct, p_ct, p_ef))
        }
    }
}

/// Training patches cropped on demand from per-case channel stacks.
pub struct CasePatchProvider<'a> {
    stacks: Vec<(&'a [Volume], &'a Grid3<u8>)>,
    items: Vec<(usize, [usize; 3], PatchKind)>,
    size: [usize; 3],
}

impl<'a> CasePatchProvider<'a> {
    /// `centers[i]` lists patch centres for `stacks[i]`.
    pub fn new(stacks: Vec<(&'a [Volume], &'a Grid3<u8>)>, centers: &[Vec<([usize; 3], PatchKind)>], size: [usize; 3]) -> Self {
        let items = centers
            .iter()
            .enumerate()
            .flat_map(|(i, cs)| cs.iter().map(move |&(c, k)| (i, c, k)))
            .collect();
        Self { stacks, items, size }
    }
}

impl PatchProvider for CasePatchProvider<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn patch(&self, i: usize) -> Result<PatchSample> {
        let (case, center, kind) = self.items[i];
        let (stack, label) = self.stacks[case];
        let grids: Vec<&Grid3<f32>> = stack.iter().map(|v| &v.data).collect();
        Ok(patch_at(&grids, label, center, kind, self.size))
    }
}

/// Seed for a case's patch centres; depends only on the id so a case draws
/// the same patches whichever fold it trains in.
fn case_seed(base: u64, case_id: &str) -> u64 {
    let d = Sha256::digest(case_id.as_bytes());
    base ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Trains one stream on `cases`. LF needs the trained upstream CT and EF
/// models in `upstream`; they are only read.
pub fn train_single_stream(
    kind: StreamKind,
    cases: &[CaseData],
    upstream: Option<&PipelineModels>,
    net: &PSNNConfig,
    cfg: &TrainConfig,
    settings: &PipelineSettings,
) -> Result<(ModelWeights<f32>, usize)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::NoRecords);
    }
    let centers = cases
        .iter()
        .map(|c| sample_patch_centers(&c.gtv.data, cfg.patches_per_case, cfg.positive_fraction, case_seed(cfg.seed, &c.case_id)))
        .collect::<Result<Vec<_>>>()?;
    let stacks = cases.iter().map(|c| prepare_channels(kind, c, upstream, settings)).collect::<Result<Vec<_>>>()?;
    let pairs = stacks.iter().zip(cases).map(|(s, c)| (s.as_slice(), &c.gtv.data)).collect();
    let provider = CasePatchProvider::new(pairs, &centers, cfg.patch_size);
    let cfg = TrainConfig { seed: stream_seed(cfg.seed, kind), ..cfg.clone() };
    let t = std::time::Instant::now();
    let out = train_stream(&provider, None, &net.with_in_channels(kind.channels()), &cfg)?;
    log::info!(
        "{kind}: {} steps in {:.1}s, final loss {:.4}",
        out.steps,
        t.elapsed().as_secs_f64(),
        out.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok((out.weights, out.steps))
}

fn stream_seed(base: u64, kind: StreamKind) -> u64 {
    base.wrapping_add(kind.seed_offset())
}

/// Trains CT and EF independently, then LF on CT plus their frozen
/// whole-volume probability maps.
pub fn train_pipeline(
    cases: &[CaseData],
    manifest_hash: &str,
    net: &PSNNConfig,
    cfg: &TrainConfig,
    settings: &PipelineSettings,
) -> Result<PipelineModels> {
    let mut models = PipelineModels { ct: None, ef: None, lf: None, settings: settings.clone(), provenance: Provenance::default() };
    models.provenance.train_config = Some(cfg.clone());
    models.provenance.manifest_hash = manifest_hash.to_string();
    models.provenance.train_cases = cases.iter().map(|c| c.case_id.clone()).collect();
    for kind in StreamKind::ALL {
        let upstream = (kind == StreamKind::Lf).then_some(&models);
        let (w, steps) = train_single_stream(kind, cases, upstream, net, cfg, settings)?;
        let prov = &mut models.provenance;
        prov.net_configs.insert(kind, w.config.clone());
        prov.seeds.insert(kind, stream_seed(cfg.seed, kind));
        prov.model_hashes.insert(kind, model_hash(&w));
        prov.steps.insert(kind, steps);
        match kind {
            StreamKind::Ct => models.ct = Some(w),
            StreamKind::Ef => models.ef = Some(w),
            StreamKind::Lf => models.lf = Some(w),
        }
    }
    for kind in [StreamKind::Ct, StreamKind::Ef] {
        if model_hash(models.require(kind)?) != models.provenance.model_hashes[&kind] {
            return Err(Error::ManifestMismatch(format!("{kind} weights changed during late-fusion training")));
        }
    }
    Ok(models)
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub ct_prob: Volume,
    pub ef_prob: Volume,
    pub lf_prob: Volume,
    /// Binarized LF probability.
    pub mask: Mask,
}

impl Segmentation {
    pub fn prob(&self, kind: StreamKind) -> &Volume {
        match kind {
            StreamKind::Ct => &self.ct_prob,
            StreamKind::Ef => &self.ef_prob,
            StreamKind::Lf => &self.lf_prob,
        }
    }
}

/// Voxels with probability strictly above `threshold`.
pub fn binarize(prob: &Volume, threshold: f32) -> Mask {
    Mask { data: prob.data.map(|p| (p > threshold) as u8), spacing: prob.spacing, origin: prob.origin }
}

pub fn segment_case(models: &PipelineModels, case: &CaseData, threshold: f32) -> Result<Segmentation> {
    let (ct_m, ef_m, lf_m) = (models.require(StreamKind::Ct)?, models.require(StreamKind::Ef)?, models.require(StreamKind::Lf)?);
    let mut ef_in = prepare_channels(StreamKind::Ef, case, None, &models.settings)?;
    let plan = models.settings.plan(case.ct.dims())?;
    let ct_prob = predict_volume(ct_m, &ef_in[..1], &plan)?;
    let ef_prob = predict_volume(ef_m, &ef_in, &plan)?;
    ef_in.truncate(1);
    let ct_in = ef_in.pop().expect("one channel");
    let lf_prob = predict_volume(lf_m, &lf_stack(ct_in, ct_prob.clone(), ef_prob.clone()), &plan)?;
    let mask = binarize(&lf_prob, threshold);
    Ok(Segmentation { ct_prob, ef_prob, lf_prob, mask })
}

/// Per-stream network configs for display: the shared config with each
/// stream's input width.
pub fn stream_configs(net: &PSNNConfig) -> BTreeMap<StreamKind, PSNNConfig> {
    StreamKind::ALL.iter().map(|&k| (k, net.with_in_channels(k.channels()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psnn::DecoderDirection;

    /// A model whose output probability is `sigmoid(logit)` everywhere.
    pub(super) fn constant_model(in_channels: usize, logit: f32) -> ModelWeights<f32> {
        let cfg = PSNNConfig {
            in_channels,
            convs_per_block: vec![1, 1],
            channels_per_block: vec![2, 4],
            decoder_direction: DecoderDirection::HighToLow,
            ..Default::default()
        };
        let mut w = ModelWeights::<f32>::init(&cfg, 5).unwrap();
        let mut first_bias = true;
        for p in &mut w.params {
            if p.name.ends_with("collapse.weight") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            } else if p.name.ends_with("collapse.bias") {
                p.data[0] = if first_bias { logit } else { 0.0 };
                first_bias = false;
            }
        }
        w
    }

    fn vol(dims: [usize; 3], f: impl FnMut(usize, usize, usize) -> f32, m: Modality) -> Volume {
        Volume::new(Grid3::from_fn(dims, f), [1.0, 1.0, 2.5], [0.0; 3], m).unwrap()
    }

    fn toy_case(with_pet: bool) -> CaseData {
        let dims = [16, 16, 8];
        let ct = vol(dims, |x, y, z| (x * 97 + y * 13 + z * 211) as f32 % 1500.0 - 900.0, Modality::Ct);
        let pet = with_pet.then(|| vol(dims, |x, _, _| 1.0 + x as f32, Modality::Pet));
        let gtv = Mask::new(Grid3::from_fn(dims, |x, y, z| (x > 5 && x < 10 && y > 5 && y < 10 && z > 2 && z < 6) as u8), ct.spacing, ct.origin).unwrap();
        CaseData { case_id: "toy".into(), ct, registered_pet: pet, gtv }
    }

    fn settings() -> PipelineSettings {
        PipelineSettings { window: [8, 8, 4], stride: [4, 4, 2], ..Default::default() }
    }

    #[test]
    fn overlapping_windows_average() {
        let plan = sliding_window_positions([12, 1, 1], [8, 1, 1], [4, 1, 1]).unwrap();
        assert_eq!(plan.positions, vec![[0, 0, 0], [4, 0, 0]]);
        let out = aggregate_windows(&plan, |s| Ok(vec![if s[0] == 0 { 0.2 } else { 0.8 }; 8])).unwrap();
        let got: Vec<f32> = out.data().to_vec();
        for (x, v) in got.iter().enumerate() {
            let want = if x < 4 { 0.2 } else if x < 8 { 0.5 } else { 0.8 };
            assert!((v - want).abs() < 1e-6, "x={x}: {v}");
        }
    }

    #[test]
    fn constant_model_survives_overlap() {
        let logit = (0.7f32 / 0.3).ln();
        let m = constant_model(1, logit);
        let case = toy_case(false);
        let ch = prepare_channels(StreamKind::Ct, &case, None, &settings()).unwrap();
        let plan = settings().plan(case.ct.dims()).unwrap();
        assert!(plan.positions.len() > 1);
        let p = predict_volume(&m, &ch, &plan).unwrap();
        assert_eq!(p.modality, Modality::Prob);
        assert!(p.data.data().iter().all(|v| (v - 0.7).abs() < 1e-5));
    }

    #[test]
    fn single_window_matches_direct_forward() {
        let case = toy_case(false);
        let ch = prepare_channels(StreamKind::Ct, &case, None, &settings()).unwrap();
        let m = ModelWeights::<f32>::init(&constant_model(1, 0.0).config, 9).unwrap();
        let plan = sliding_window_positions(case.ct.dims(), case.ct.dims(), [4, 4, 2]).unwrap();
        assert_eq!(plan.positions.len(), 1);
        let p = predict_volume(&m, &ch, &plan).unwrap();
        let input = Tensor { n: 1, c: 1, dims: case.ct.dims(), data: ch[0].data.data().to_vec() };
        assert_eq!(p.data.data(), predict_prob(&m, &input).unwrap().data.as_slice());
    }

    #[test]
    fn channel_recipes_and_errors() {
        let s = settings();
        let case = toy_case(true);
        let ct = prepare_channels(StreamKind::Ct, &case, None, &s).unwrap();
        assert_eq!(ct.len(), 1);
        assert!(ct[0].data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(prepare_channels(StreamKind::Ef, &case, None, &s).unwrap().len(), 2);
        assert!(matches!(
            prepare_channels(StreamKind::Ef, &toy_case(false), None, &s),
            Err(Error::MissingRegisteredPet(_))
        ));
        assert!(matches!(prepare_channels(StreamKind::Lf, &case, None, &s), Err(Error::MissingUpstreamModel(_))));
        let mut models = PipelineModels {
            ct: Some(constant_model(1, 0.0)),
            ef: None,
            lf: None,
            settings: s.clone(),
            provenance: Provenance::default(),
        };
        assert!(matches!(prepare_channels(StreamKind::Lf, &case, Some(&models), &s), Err(Error::MissingUpstreamModel("EF"))));
        models.ef = Some(constant_model(2, 0.0));
        let lf = prepare_channels(StreamKind::Lf, &case, Some(&models), &s).unwrap();
        assert_eq!(lf.len(), 3);
        for c in &lf[1..] {
            assert!(c.data.data().iter().all(|&v| v == 0.5));
        }
        assert_eq!(lf, prepare_channels(StreamKind::Lf, &case, Some(&models), &s).unwrap());
        let wrong = constant_model(2, 0.0);
        assert!(matches!(
            predict_volume(&wrong, &lf[..1], &s.plan(case.ct.dims()).unwrap()),
            Err(Error::ChannelMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn origins_enumerate_and_clamp() {
        assert_eq!(axis_origins(128, 80, 48), vec![0, 48]);
        assert_eq!(axis_origins(100, 80, 48), vec![0, 20]);
        assert_eq!(axis_origins(80, 80, 48), vec![0]);
        assert_eq!(axis_origins(96, 48, 32), vec![0, 32, 48]);
        let plan = sliding_window_positions([80, 80, 64], [80, 80, 64], [48, 48, 32]).unwrap();
        assert_eq!(plan.positions, vec![[0, 0, 0]]);
        assert!(!plan.padded());
    }

    #[test]
    fn oversized_window_is_padded() {
        let plan = sliding_window_positions([40, 80, 64], [48, 48, 32], [32, 32, 16]).unwrap();
        assert!(plan.padded());
        assert_eq!(plan.pad_before, [4, 0, 0]);
        assert!(plan.positions.iter().all(|p| p[0] == 0));
    }

    #[test]
    fn binarize_is_monotone() {
        let v = Volume::new(Grid3::from_fn([4, 4, 4], |x, y, z| (x + y + z) as f32 / 9.0), [1.0; 3], [0.0; 3], Modality::Prob).unwrap();
        let mut last = usize::MAX;
        for t in [0.0, 0.2, 0.4, 0.5, 0.8, 1.0] {
            let n = binarize(&v, t).count();
            assert!(n <= last);
            last = n;
        }
        let flat = v.with_data(Grid3::filled([4, 4, 4], 0.4), Modality::Prob);
        assert!(binarize(&flat, 0.5).is_empty());
    }
}
