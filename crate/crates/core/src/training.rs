//! Losses, the RMSprop optimizer with step decay, and the two-stage
//! training scheme (separate pre-training of both subnetworks, then joint
//! fine-tuning end to end).

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::fsutil::atomic_write;
use crate::geometry::{augment, map_to_volume, AugmentRanges, BBox, CubeMapping, LandmarkSet};
use crate::imaging::ImageTensor;
use crate::network::{ModelState, Mode, Network, Subnet};
use crate::nn::{Graph, NodeId, NormStats, Pattern, Tensor};
use crate::volumetric::{build_pyramid, EncodeOptions, VolumePyramid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScale {
    /// Plain sums of squared errors.
    Sum,
    /// Each level (and the coordinate term) divided by its element count.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_coord: f64,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub seed: u64,
    pub loss_scale: LossScale,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub grad_clip: Option<f64>,
    pub abort_on_nan: bool,
    /// Count decay epochs across stages instead of restarting per stage.
    pub global_lr_decay: bool,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,
    pub truncate: bool,
    pub norm_momentum: f64,
    /// Depth scale relative to the x scale of the crop-to-volume mapping.
    pub depth_scale_factor: f64,
    pub checkpoint_every: usize,
    /// Skip the pre-trained check before fine-tuning.
    pub allow_unpretrained: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 1e-3,
            lr_initial: 2.5e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 10,
            epochs_pretrain: 15,
            epochs_finetune: 10,
            batch_size: 8,
            sigma: 1.0,
            seed: 0,
            loss_scale: LossScale::Sum,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            grad_clip: None,
            abort_on_nan: true,
            global_lr_decay: false,
            augment: true,
            augment_ranges: AugmentRanges::default(),
            truncate: true,
            norm_momentum: 0.1,
            depth_scale_factor: 1.0,
            checkpoint_every: 5,
            allow_unpretrained: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_coord >= 0.0) {
            return Err(invalid("lambda_coord must be non-negative"));
        }
        if !(self.lr_initial >= 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return Err(invalid("learning-rate schedule needs lr >= 0, decay > 0, period >= 1"));
        }
        if self.batch_size == 0 || !(self.sigma > 0.0) || !(self.depth_scale_factor > 0.0) {
            return Err(invalid("batch_size, sigma and depth_scale_factor must be positive"));
        }
        Ok(())
    }

    /// `lr_initial * decay^-floor(epoch / period)`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_decay_every) as i32;
        self.lr_initial * self.lr_decay_factor.powi(-k)
    }
}

/// Sum of squared voxel errors over every level and voxel.
pub fn voxel_loss(predicted: &[&[f64]], target: &VolumePyramid, scale: LossScale) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(shape(format!("{} predicted levels, {} target levels", predicted.len(), target.len())));
    }
    let mut total = 0.0;
    for (m, (p, t)) in predicted.iter().zip(target.grids()).enumerate() {
        if p.len() != t.values().len() {
            return Err(shape(format!("level {m}: {} voxels vs {}", p.len(), t.values().len())));
        }
        let sse: f64 = p.iter().zip(t.values()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += match scale {
            LossScale::Sum => sse,
            LossScale::Mean => sse / p.len() as f64,
        };
    }
    Ok(total)
}

/// Squared Euclidean distance between coordinate vectors.
pub fn coord_loss(predicted: &[f64], target: &[f64], scale: LossScale) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(shape(format!("coordinate vectors of length {} and {}", predicted.len(), target.len())));
    }
    let sse: f64 = predicted.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match scale {
        LossScale::Sum => sse,
        LossScale::Mean => sse / predicted.len().max(1) as f64,
    })
}

/// `L_vox + lambda * L_coord`, with the coordinate term evaluated on the
/// coordinates regressed from the finest predicted volume.
pub fn joint_loss(
    predicted_volumes: &[&[f64]],
    target: &VolumePyramid,
    predicted_coords: &[f64],
    target_coords: &[f64],
    lambda: f64,
    scale: LossScale,
) -> Result<f64> {
    let v = voxel_loss(predicted_volumes, target, scale)?;
    let c = coord_loss(predicted_coords, target_coords, scale)?;
    Ok(v + lambda * c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    PretrainVoxel,
    PretrainCoord,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PretrainVoxel, Stage::PretrainCoord, Stage::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainVoxel => "pretrain-voxel",
            Stage::PretrainCoord => "pretrain-coord",
            Stage::Finetune => "finetune",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::PretrainVoxel => 0x5678_0001,
            Stage::PretrainCoord => 0x5678_0002,
            Stage::Finetune => 0x5678_0003,
        }
    }

    fn subnets(self) -> &'static [Subnet] {
        match self {
            Stage::PretrainVoxel => &[Subnet::Voxel],
            Stage::PretrainCoord => &[Subnet::Coord],
            Stage::Finetune => &[Subnet::Voxel, Subnet::Coord],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub l_vox: f64,
    pub l_coord: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub wall_time_s: f64,
}

impl TrainLog {
    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// One line per record; floats use the shortest round-trip form so the
    /// text is bit-exact. Wall time goes in a trailing comment.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# step stage epoch l_vox l_coord l_total lr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{} {} {} {:e} {:e} {:e} {:e}",
                r.step, r.stage, r.epoch, r.l_vox, r.l_coord, r.l_total, r.lr
            );
        }
        let _ = writeln!(s, "# wall_time_s={}", self.wall_time_s);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# wall_time_s=") {
                log.wall_time_s = rest.trim().parse().map_err(|_| invalid("bad wall time"))?;
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(invalid(format!("train log line has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| invalid(format!("bad number `{s}`")));
            log.records.push(LogRecord {
                step: f[0].parse().map_err(|_| invalid("bad step"))?,
                stage: f[1].parse()?,
                epoch: f[2].parse().map_err(|_| invalid("bad epoch"))?,
                l_vox: num(f[3])?,
                l_coord: num(f[4])?,
                l_total: num(f[5])?,
                lr: num(f[6])?,
            });
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}

/// One training example in the network's input frame: the image is already
/// `input_size` and landmarks are in its pixel coordinates with zero-mean
/// depth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub image: ImageTensor,
    pub landmarks: LandmarkSet,
}

/// Input-frame to volume mapping used for every item.
pub fn volume_mapping(net: &Network, cfg: &TrainConfig) -> Result<CubeMapping> {
    let (h, w) = net.config().hourglass.input_size;
    let dims = net.config().volume_dims();
    let mut m = CubeMapping::centered(BBox::new(0.0, 0.0, w as f64, h as f64)?, dims)?;
    m.depth_scale *= cfg.depth_scale_factor;
    m.depth_offset /= cfg.depth_scale_factor;
    Ok(m)
}

/// A batch ready for the graph.
pub struct PreparedBatch {
    pub images: Tensor,
    /// One `(N, d_m, h, w)` target per stack.
    pub level_targets: Vec<Tensor>,
    pub coords: Tensor,
    pub volume_landmarks: Vec<LandmarkSet>,
}

impl PreparedBatch {
    pub fn finest_targets(&self) -> &Tensor {
        self.level_targets.last().expect("at least one level")
    }
}

pub fn prepare_batch(
    net: &Network,
    cfg: &TrainConfig,
    items: &[&TrainItem],
    augment_seeds: Option<&[u64]>,
) -> Result<PreparedBatch> {
    let mapping = volume_mapping(net, cfg)?;
    let [w, h, _] = net.config().volume_dims();
    let zres = &net.config().hourglass.z_resolutions;
    let opts = EncodeOptions { truncate: cfg.truncate };
    let mut images = Vec::with_capacity(items.len());
    let mut pyramids: Vec<VolumePyramid> = Vec::with_capacity(items.len());
    let mut vol_lms = Vec::with_capacity(items.len());
    for (n, item) in items.iter().enumerate() {
        let (img, lm) = match augment_seeds {
            Some(seeds) => augment(&item.image, &item.landmarks, &cfg.augment_ranges.sample(seeds[n]))?,
            None => (item.image.clone(), item.landmarks.clone()),
        };
        let vol = map_to_volume(&lm, &mapping)?.landmarks;
        pyramids.push(build_pyramid(&vol, w, h, zres, cfg.sigma, opts)?);
        images.push(img);
        vol_lms.push(vol);
    }
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let images = net.image_batch(&refs)?;
    let level_targets = zres
        .iter()
        .enumerate()
        .map(|(m, &d)| {
            let mut data = Vec::with_capacity(items.len() * d * h * w);
            for p in &pyramids {
                data.extend_from_slice(p.grids()[m].values());
            }
            Tensor::from_vec(&[items.len(), d, h, w], data)
        })
        .collect();
    let n_coords = net.config().coordnet.output_dim();
    let mut coords = Vec::with_capacity(items.len() * n_coords);
    for lm in &vol_lms {
        if lm.len() * 3 != n_coords {
            return Err(shape(format!("item has {} landmarks, model regresses {}", lm.len(), n_coords / 3)));
        }
        coords.extend(lm.to_flat());
    }
    Ok(PreparedBatch {
        images,
        level_targets,
        coords: Tensor::from_vec(&[items.len(), n_coords], coords),
        volume_landmarks: vol_lms,
    })
}

struct LossNodes {
    vox: Option<NodeId>,
    coord: Option<NodeId>,
    total: NodeId,
}

fn level_weight(scale: LossScale, t: &Tensor) -> f64 {
    match scale {
        LossScale::Sum => 1.0,
        LossScale::Mean => 1.0 / t.len() as f64,
    }
}

/// Adds the stage's forward pass and loss to `g`.
fn build_stage_loss(
    net: &Network,
    state: &ModelState,
    g: &mut Graph<'_>,
    batch: &PreparedBatch,
    stage: Stage,
    lambda: f64,
    scale: LossScale,
) -> LossNodes {
    match stage {
        Stage::PretrainVoxel | Stage::Finetune => {
            let input = g.input(batch.images.clone());
            let outs = net.build_hourglass(g, state, input, Mode::Train);
            let mut terms = Vec::new();
            for (o, t) in outs.iter().zip(&batch.level_targets) {
                let w = level_weight(scale, t);
                terms.push((g.sum_squared_error(*o, t.clone()), w));
            }
            let vox = g.weighted_sum(&terms);
            if stage == Stage::PretrainVoxel {
                return LossNodes {
                    vox: Some(vox),
                    coord: None,
                    total: vox,
                };
            }
            let coords = net.build_coordnet(g, state, *outs.last().unwrap(), Mode::Train);
            let coord = g.sum_squared_error(coords, batch.coords.clone());
            let cw = level_weight(scale, &batch.coords);
            let total = g.weighted_sum(&[(vox, 1.0), (coord, lambda * cw)]);
            LossNodes {
                vox: Some(vox),
                coord: Some(coord),
                total,
            }
        }
        Stage::PretrainCoord => {
            let input = g.input(batch.finest_targets().clone());
            let coords = net.build_coordnet(g, state, input, Mode::Train);
            let coord = g.sum_squared_error(coords, batch.coords.clone());
            let cw = level_weight(scale, &batch.coords);
            let total = g.weighted_sum(&[(coord, cw)]);
            LossNodes {
                vox: None,
                coord: Some(coord),
                total,
            }
        }
    }
}

/// RMSprop: `s = a s + (1 - a) g^2`, `p -= lr g / (sqrt(s) + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    alpha: f64,
    eps: f64,
    square_avg: Vec<Option<Vec<f64>>>,
}

impl RmsProp {
    pub fn new(n_params: usize, alpha: f64, eps: f64) -> Self {
        Self {
            alpha,
            eps,
            square_avg: vec![None; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) {
        for ((p, g), sq) in params.iter_mut().zip(grads).zip(&mut self.square_avg) {
            let Some(g) = g else { continue };
            let sq = sq.get_or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, &gv), s) in p.data_mut().iter_mut().zip(g.data()).zip(sq.iter_mut()) {
                *s = self.alpha * *s + (1.0 - self.alpha) * gv * gv;
                *pv -= lr * gv / (s.sqrt() + self.eps);
            }
        }
    }
}

fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
}

fn apply_norm_stats(state: &mut ModelState, stats: &[NormStats], momentum: f64) {
    for s in stats {
        let (m, v) = &mut state.norm_stats[s.slot];
        for (r, b) in m.iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in v.iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Called after every completed epoch with the state at that point.
pub type EpochHook<'a> = dyn FnMut(Stage, usize, &ModelState) -> Result<()> + 'a;

pub struct Trainer<'a> {
    pub net: &'a Network,
    pub cfg: &'a TrainConfig,
    step: usize,
    epochs_done: usize,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a Network, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            net,
            cfg,
            step: 0,
            epochs_done: 0,
            started: Instant::now(),
        })
    }

    fn epochs_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::PretrainVoxel | Stage::PretrainCoord => self.cfg.epochs_pretrain,
            Stage::Finetune => self.cfg.epochs_finetune,
        }
    }

    /// Runs one stage over `items`, appending to `log`.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        items: &[TrainItem],
        state: &mut ModelState,
        log: &mut TrainLog,
        mut hook: Option<&mut EpochHook<'_>>,
    ) -> Result<()> {
        if items.is_empty() {
            return Err(invalid("training set is empty"));
        }
        self.net.check_state(state)?;
        if stage == Stage::Finetune
            && !self.cfg.allow_unpretrained
            && !(state.voxel_pretrained && state.coord_pretrained)
        {
            return Err(invalid(
                "fine-tuning needs both subnetworks pre-trained (set allow_unpretrained to override)",
            ));
        }
        let mask = self.net.trainable_mask(stage.subnets());
        let mut opt = RmsProp::new(state.params.len(), self.cfg.rms_alpha, self.cfg.rms_eps);
        let base_epoch = if self.cfg.global_lr_decay { self.epochs_done } else { 0 };
        let epochs = self.epochs_for(stage);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ stage.salt());
        let mut order: Vec<usize> = (0..items.len()).collect();

        for epoch in 0..epochs {
            let lr = self.cfg.learning_rate(base_epoch + epoch);
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch_items: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
                let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
                let aug = (self.cfg.augment && stage != Stage::PretrainCoord).then_some(seeds.as_slice());
                let batch = prepare_batch(self.net, self.cfg, &batch_items, aug)?;

                let (mut grads, rec, stats) = {
                    let mut g = Graph::new(&state.params, &mask);
                    let nodes = build_stage_loss(
                        self.net,
                        state,
                        &mut g,
                        &batch,
                        stage,
                        self.cfg.lambda_coord,
                        self.cfg.loss_scale,
                    );
                    let l_vox = nodes.vox.map_or(0.0, |n| g.value(n).item());
                    let l_coord = nodes.coord.map_or(0.0, |n| g.value(n).item());
                    let l_total = g.value(nodes.total).item();
                    if self.cfg.abort_on_nan && !l_total.is_finite() {
                        return Err(Error::NonFinite {
                            stage: stage.to_string(),
                            step: self.step,
                        });
                    }
                    let grads = g.backward(nodes.total);
                    let stats = g.take_norm_stats();
                    let rec = LogRecord {
                        step: self.step,
                        stage,
                        epoch,
                        l_vox,
                        l_coord,
                        l_total,
                        lr,
                    };
                    (grads, rec, stats)
                };
                if let Some(c) = self.cfg.grad_clip {
                    clip_gradients(&mut grads, c);
                }
                opt.step(&mut state.params, &grads, lr);
                apply_norm_stats(state, &stats, self.cfg.norm_momentum);
                if self.cfg.abort_on_nan && !state.is_finite() {
                    return Err(Error::NonFinite {
                        stage: stage.to_string(),
                        step: self.step,
                    });
                }
                log.records.push(rec);
                self.step += 1;
            }
            if let Some(h) = hook.as_deref_mut() {
                h(stage, epoch, state)?;
            }
        }
        self.epochs_done += epochs;
        recalibrate_norms(self.net, self.cfg, items, state, stage)?;
        match stage {
            Stage::PretrainVoxel => state.voxel_pretrained = true,
            Stage::PretrainCoord => state.coord_pretrained = true,
            Stage::Finetune => {}
        }
        log.wall_time_s = self.started.elapsed().as_secs_f64();
        Ok(())
    }
}

pub fn pretrain_voxel(net: &Network, items: &[TrainItem], state: &mut ModelState, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    Trainer::new(net, cfg)?.run_stage(Stage::PretrainVoxel, items, state, &mut log, None)?;
    Ok(log)
}

pub fn pretrain_coord(net: &Network, items: &[TrainItem], state: &mut ModelState, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    Trainer::new(net, cfg)?.run_stage(Stage::PretrainCoord, items, state, &mut log, None)?;
    Ok(log)
}

pub fn finetune_joint(net: &Network, items: &[TrainItem], state: &mut ModelState, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    Trainer::new(net, cfg)?.run_stage(Stage::Finetune, items, state, &mut log, None)?;
    Ok(log)
}

/// All three stages in order, sharing one step counter and log.
pub fn train_all(net: &Network, items: &[TrainItem], state: &mut ModelState, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let mut t = Trainer::new(net, cfg)?;
    for stage in Stage::ALL {
        t.run_stage(stage, items, state, &mut log, None)?;
    }
    Ok(log)
}

/// Replaces running normalization statistics with batch statistics of the
/// un-augmented training set (averaged over batches), so inference matches
/// training-mode normalization.
pub fn recalibrate_norms(
    net: &Network,
    cfg: &TrainConfig,
    items: &[TrainItem],
    state: &mut ModelState,
    stage: Stage,
) -> Result<()> {
    let mask = vec![false; state.params.len()];
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; state.norm_stats.len()];
    let mut batches = 0usize;
    for chunk in items.chunks(cfg.batch_size) {
        let refs: Vec<&TrainItem> = chunk.iter().collect();
        let batch = prepare_batch(net, cfg, &refs, None)?;
        let mut g = Graph::new(&state.params, &mask);
        build_stage_loss(net, state, &mut g, &batch, stage, 0.0, LossScale::Sum);
        for s in g.take_norm_stats() {
            let acc = sums[s.slot].get_or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()]));
            acc.0.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
            acc.1.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b);
        }
        batches += 1;
    }
    for (slot, acc) in sums.into_iter().enumerate() {
        if let Some((m, v)) = acc {
            state.norm_stats[slot] = (
                m.into_iter().map(|x| x / batches as f64).collect(),
                v.into_iter().map(|x| x / batches as f64).collect(),
            );
        }
    }
    Ok(())
}

/// Predicted volume-frame landmarks for a set of images (inference mode).
pub fn predict_volume_landmarks(
    net: &Network,
    state: &ModelState,
    images: &[&ImageTensor],
    batch_size: usize,
) -> Result<Vec<LandmarkSet>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let (_, coords) = net.model_forward(state, chunk, Mode::Eval)?;
        let dim = net.config().coordnet.output_dim();
        for row in coords.data().chunks(dim) {
            out.push(LandmarkSet::from_flat(row, net.config().scheme.clone())?);
        }
    }
    Ok(out)
}

/// Mean 3D point-to-point distance over all landmarks of all samples.
pub fn mean_landmark_error(pred: &[LandmarkSet], gt: &[LandmarkSet]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.points().iter().zip(g.points()) {
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Finite-difference comparison for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the sampled
    /// entries, measured as vector norms.
    pub rel_error: f64,
    pub analytic_norm: f64,
    /// Entries whose plain probes crossed a rectifier or pooling boundary.
    /// Those are differenced with the piecewise choices held at the base
    /// point, since a difference across a kink estimates no derivative.
    pub kinked: usize,
}

/// Compares backpropagated gradients of the joint loss (training-mode
/// normalization) with central differences on up to `per_group` random
/// entries of every parameter tensor. Each entry is first differenced
/// plainly; if either probe lands on a different piece of the piecewise
/// smooth loss, it is differenced again with the base point's rectifier
/// signs and pooling choices held fixed.
pub fn gradient_check(
    net: &Network,
    state: &ModelState,
    items: &[TrainItem],
    cfg: &TrainConfig,
    h: f64,
    per_group: usize,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let refs: Vec<&TrainItem> = items.iter().collect();
    let batch = prepare_batch(net, cfg, &refs, None)?;
    let mask = vec![true; state.params.len()];
    let loss_at = |st: &ModelState, frozen: Option<&Pattern>| -> (f64, Pattern) {
        let mut g = match frozen {
            Some(p) => Graph::with_pattern(&st.params, &mask, p.clone()),
            None => Graph::new(&st.params, &mask),
        };
        let n = build_stage_loss(net, st, &mut g, &batch, Stage::Finetune, cfg.lambda_coord, cfg.loss_scale);
        (g.value(n.total).item(), g.pattern())
    };
    let (grads, base) = {
        let mut g = Graph::new(&state.params, &mask);
        let n = build_stage_loss(net, state, &mut g, &batch, Stage::Finetune, cfg.lambda_coord, cfg.loss_scale);
        (g.backward(n.total), g.pattern())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = state.clone();
    let mut out = Vec::with_capacity(state.params.len());
    for (pi, name) in state.names.iter().enumerate() {
        let n = state.params[pi].len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_group);
        let analytic = grads[pi].as_ref().map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut kinked = 0;
        let difference = |probe: &mut ModelState, k: usize, frozen: Option<&Pattern>| {
            let orig = probe.params[pi].data()[k];
            probe.params[pi].data_mut()[k] = orig + h;
            let (up, up_pattern) = loss_at(probe, frozen);
            probe.params[pi].data_mut()[k] = orig - h;
            let (down, down_pattern) = loss_at(probe, frozen);
            probe.params[pi].data_mut()[k] = orig;
            ((up - down) / (2.0 * h), up_pattern == base && down_pattern == base)
        };
        for &k in &idx {
            let (mut numeric, smooth) = difference(&mut probe, k, None);
            if !smooth {
                kinked += 1;
                numeric = difference(&mut probe, k, Some(&base)).0;
            }
            diff2 += (analytic[k] - numeric).powi(2);
            a2 += analytic[k].powi(2);
            n2 += numeric.powi(2);
        }
        let denom = a2.sqrt().max(n2.sqrt());
        out.push(GroupCheck {
            name: name.clone(),
            entries: idx.len(),
            rel_error: if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom },
            analytic_norm: a2.sqrt(),
            kinked,
        });
    }
    Ok(out)
}

/// Gradient of `lambda * L_coord` alone with respect to every parameter,
/// end to end through both subnetworks.
pub fn coord_term_gradients(
    net: &Network,
    state: &ModelState,
    items: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<Vec<Option<Tensor>>> {
    let refs: Vec<&TrainItem> = items.iter().collect();
    let batch = prepare_batch(net, cfg, &refs, None)?;
    let mask = vec![true; state.params.len()];
    let mut g = Graph::new(&state.params, &mask);
    let input = g.input(batch.images.clone());
    let outs = net.build_hourglass(&mut g, state, input, Mode::Train);
    let coords = net.build_coordnet(&mut g, state, *outs.last().unwrap(), Mode::Train);
    let coord = g.sum_squared_error(coords, batch.coords.clone());
    let total = g.weighted_sum(&[(coord, cfg.lambda_coord)]);
    Ok(g.backward(total))
}
