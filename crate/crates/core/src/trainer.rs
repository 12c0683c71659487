//! The multi-domain training loop.
//!
//! Every iteration draws one random patch per domain, runs a translation
//! step for every unordered domain pair, sums the generator and
//! discriminator losses over the pairs and applies one Adam update to each
//! side. The per-domain global AdaIN parameters follow an exponential
//! moving average of the patch-specific style codes.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Group, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{tape, LossBundle, LossComponents, LossWeights};
use crate::networks::{AdaINParams, ArchConfig, ModelWeights, Networks};
use crate::nn::Adam;
use crate::tensor::{Scalar, Tensor};

/// Weight of the running value in the global AdaIN average.
pub const EMA_DECAY: f64 = 0.95;

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_epochs: usize,
    pub decay_epoch: usize,
    pub init_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub patch_size: usize,
    pub overlap: usize,
    /// Base channel width of the networks.
    pub width: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_epochs: 20,
            decay_epoch: 10,
            init_lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            patch_size: 256,
            overlap: 32,
            width: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced setting that trains on a single CPU in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            num_epochs: 5,
            decay_epoch: 3,
            patch_size: 64,
            overlap: 8,
            width: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_epoch == 0 || self.decay_epoch >= self.num_epochs {
            return Err(Error::Config(format!(
                "need 0 < decay_epoch ({}) < num_epochs ({})",
                self.decay_epoch, self.num_epochs
            )));
        }
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return Err(Error::Config(format!(
                "init_lr must be positive, got {}",
                self.init_lr
            )));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "Adam betas must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 16",
                self.patch_size
            )));
        }
        if self.overlap >= self.patch_size {
            return Err(Error::Config(
                "overlap must be smaller than patch_size".into(),
            ));
        }
        self.weights.validate()
    }

    pub fn arch(&self, n_domains: usize) -> ArchConfig {
        ArchConfig::new(self.width, n_domains)
    }
}

/// Learning rate for a 1-based epoch number: constant up to `decay_epoch`,
/// then linear decay reaching zero at `num_epochs`.
pub fn lr_at(epoch_no: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch_no == 0 || epoch_no > cfg.num_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch_no} outside 1..={}",
            cfg.num_epochs
        )));
    }
    if epoch_no <= cfg.decay_epoch {
        return Ok(cfg.init_lr);
    }
    let left = (cfg.num_epochs - epoch_no) as f64;
    let span = (cfg.num_epochs - cfg.decay_epoch) as f64;
    Ok(cfg.init_lr * left / span)
}

/// Rate used while running epoch `epoch_no`: the schedule evaluated at the
/// number of completed epochs, so the last epoch still trains.
pub fn epoch_lr(epoch_no: usize, cfg: &TrainConfig) -> Result<f64> {
    match epoch_no {
        0 => Err(Error::Config("epochs are numbered from 1".into())),
        1 => Ok(cfg.init_lr),
        e => lr_at(e - 1, cfg),
    }
}

/// Per-domain global AdaIN parameters and their average over domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub gamma_avg: Vec<f64>,
    pub beta_avg: Vec<f64>,
}

impl EmaState {
    /// All-zero state for `n` domains with `k` channels.
    pub fn new(n: usize, k: usize) -> Self {
        EmaState {
            gamma: vec![vec![0.0; k]; n],
            beta: vec![vec![0.0; k]; n],
            gamma_avg: vec![0.0; k],
            beta_avg: vec![0.0; k],
        }
    }

    pub fn n_domains(&self) -> usize {
        self.gamma.len()
    }

    pub fn channels(&self) -> usize {
        self.gamma_avg.len()
    }

    pub fn domain_params(&self, domain: usize) -> Result<AdaINParams<f64>> {
        if domain >= self.n_domains() {
            return Err(Error::UnknownDomain {
                id: domain,
                count: self.n_domains(),
            });
        }
        AdaINParams::new(self.gamma[domain].clone(), self.beta[domain].clone())
    }

    /// In-place form of [`ema_update`].
    pub fn update(&mut self, domain: usize, current: &AdaINParams<f64>) -> Result<()> {
        if domain >= self.n_domains() {
            return Err(Error::UnknownDomain {
                id: domain,
                count: self.n_domains(),
            });
        }
        if current.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "EMA tracks {} channels, update has {}",
                self.channels(),
                current.channels()
            )));
        }
        let blend = |p: &mut Vec<f64>, c: &[f64]| {
            for (p, &c) in p.iter_mut().zip(c) {
                *p = EMA_DECAY * *p + (1.0 - EMA_DECAY) * c;
            }
        };
        blend(&mut self.gamma[domain], &current.gamma);
        blend(&mut self.beta[domain], &current.beta);
        self.recompute_average();
        Ok(())
    }

    pub fn recompute_average(&mut self) {
        let n = self.n_domains().max(1) as f64;
        let mean = |rows: &[Vec<f64>], k: usize| {
            (0..k)
                .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n)
                .collect()
        };
        let k = self.channels();
        self.gamma_avg = mean(&self.gamma, k);
        self.beta_avg = mean(&self.beta, k);
    }

    pub fn is_finite(&self) -> bool {
        self.gamma
            .iter()
            .chain(&self.beta)
            .chain([&self.gamma_avg, &self.beta_avg])
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `p <- 0.95 p + 0.05 p_current` for one domain, then the average is
/// recomputed.
pub fn ema_update(state: &EmaState, domain: usize, current: &AdaINParams<f64>) -> Result<EmaState> {
    let mut next = state.clone();
    next.update(domain, current)?;
    Ok(next)
}

/// All unordered pairs `i < j`, in loop order.
pub fn domain_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Tape handles of one pair step.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub adv_g: Var,
    pub adv_d: Var,
    pub cls_g: Var,
    pub cls_d: Var,
    pub cross: Var,
    pub self_recon: Var,
    pub total_g: Var,
    pub total_d: Var,
    pub style_i: (Var, Var),
    pub style_j: (Var, Var),
}

impl PairVars {
    pub fn bundle<T: Scalar>(&self, g: &Graph<'_, T>, w: &LossWeights) -> LossBundle {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBundle::from_components(
            LossComponents {
                adv_g: v(self.adv_g),
                adv_d: v(self.adv_d),
                cls_g: v(self.cls_g),
                cls_d: v(self.cls_d),
                cross: v(self.cross),
                self_recon: v(self.self_recon),
            },
            w,
        )
    }
}

/// Records the full translation step for domains `i` and `j` on `g`.
///
/// Both directions are built: each patch is rendered in the other domain's
/// style (the fakes), in its own style (self reconstruction), and the fakes
/// are translated back with the original style (cross reconstruction).
#[allow(clippy::too_many_arguments)]
pub fn record_pair<T: Scalar>(
    nets: &Networks,
    g: &mut Graph<'_, T>,
    i: usize,
    j: usize,
    x_i: Var,
    x_j: Var,
    w: &LossWeights,
) -> Result<PairVars> {
    if i == j {
        return Err(Error::DomainPair(i));
    }
    let c_i = nets.encode_content_g(g, x_i);
    let c_j = nets.encode_content_g(g, x_j);
    let (gi, bi) = nets.encode_style_g(g, x_i, i)?;
    let (gj, bj) = nets.encode_style_g(g, x_j, j)?;

    let fake_j = nets.translate_content_g(g, c_i, gj, bj);
    let fake_i = nets.translate_content_g(g, c_j, gi, bi);
    let self_i = nets.translate_content_g(g, c_i, gi, bi);
    let self_j = nets.translate_content_g(g, c_j, gj, bj);
    let back_i = nets.translate_g(g, fake_j, gi, bi);
    let back_j = nets.translate_g(g, fake_i, gj, bj);

    let (adv_ri, log_ri) = nets.discriminate_g(g, x_i);
    let (adv_rj, log_rj) = nets.discriminate_g(g, x_j);
    let (adv_fi, log_fi) = nets.discriminate_g(g, fake_i);
    let (adv_fj, log_fj) = nets.discriminate_g(g, fake_j);

    let d1 = tape::lsgan_d(g, adv_ri, adv_fi);
    let d2 = tape::lsgan_d(g, adv_rj, adv_fj);
    let adv_d = g.add(d1, d2);
    let g1 = tape::lsgan_g(g, adv_fi);
    let g2 = tape::lsgan_g(g, adv_fj);
    let adv_g = g.add(g1, g2);

    let c1 = tape::cls(g, log_ri, i);
    let c2 = tape::cls(g, log_rj, j);
    let cls_d = g.add(c1, c2);
    let c3 = tape::cls(g, log_fj, j);
    let c4 = tape::cls(g, log_fi, i);
    let cls_g = g.add(c3, c4);

    let r1 = tape::recon_l1(g, x_i, back_i);
    let r2 = tape::recon_l1(g, x_j, back_j);
    let cross = g.add(r1, r2);
    let s1 = tape::recon_l1(g, x_i, self_i);
    let s2 = tape::recon_l1(g, x_j, self_j);
    let self_recon = g.add(s1, s2);

    let total_g = tape::weighted(
        g,
        &[
            (w.lambda1, cross),
            (w.lambda2, self_recon),
            (w.lambda3, cls_g),
            (w.lambda4, adv_g),
        ],
    );
    let total_d = tape::weighted(g, &[(w.lambda3, cls_d), (w.lambda4, adv_d)]);
    Ok(PairVars {
        adv_g,
        adv_d,
        cls_g,
        cls_d,
        cross,
        self_recon,
        total_g,
        total_d,
        style_i: (gi, bi),
        style_j: (gj, bj),
    })
}

/// Losses, gradients and style codes of one pair step. Gradients are not
/// applied.
#[derive(Clone, Debug)]
pub struct PairStep<T> {
    pub bundle: LossBundle,
    pub grads_g: Gradients<T>,
    pub grads_d: Gradients<T>,
    pub style_i: AdaINParams<f64>,
    pub style_j: AdaINParams<f64>,
}

fn check_pair<T: Scalar>(
    model: &ModelWeights<T>,
    i: usize,
    j: usize,
    x_i: &Tensor<T>,
    x_j: &Tensor<T>,
) -> Result<()> {
    if i == j {
        return Err(Error::DomainPair(i));
    }
    let n = model.arch().n_domains;
    for d in [i, j] {
        if d >= n {
            return Err(Error::UnknownDomain { id: d, count: n });
        }
    }
    model.nets.check_patch(x_i)?;
    model.nets.check_patch(x_j)
}

pub fn pairwise_step<T: Scalar>(
    model: &ModelWeights<T>,
    i: usize,
    j: usize,
    x_i: &Tensor<T>,
    x_j: &Tensor<T>,
    w: &LossWeights,
) -> Result<PairStep<T>> {
    check_pair(model, i, j, x_i, x_j)?;
    let mut g = Graph::new(&model.params);
    let (vi, vj) = (g.input(x_i.clone()), g.input(x_j.clone()));
    let vars = record_pair(&model.nets, &mut g, i, j, vi, vj, w)?;
    let style = |g: &Graph<'_, T>, (gm, bt): (Var, Var)| {
        AdaINParams::new(g.value(gm).data().to_vec(), g.value(bt).data().to_vec())
            .map(|p| p.cast::<f64>())
    };
    Ok(PairStep {
        bundle: vars.bundle(&g, w),
        grads_g: g.backward(vars.total_g, Group::GENERATOR),
        grads_d: g.backward(vars.total_d, Group::DISCRIMINATOR),
        style_i: style(&g, vars.style_i)?,
        style_j: style(&g, vars.style_j)?,
    })
}

/// Forward-only losses of one pair step.
pub fn pair_losses<T: Scalar>(
    model: &ModelWeights<T>,
    i: usize,
    j: usize,
    x_i: &Tensor<T>,
    x_j: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossBundle> {
    check_pair(model, i, j, x_i, x_j)?;
    let mut g = Graph::new(&model.params);
    let (vi, vj) = (g.input(x_i.clone()), g.input(x_j.clone()));
    let vars = record_pair(&model.nets, &mut g, i, j, vi, vj, w)?;
    Ok(vars.bundle(&g, w))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub pair: usize,
    pub domains: (usize, usize),
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
}

/// Mutable training state: weights, optimizers, EMA, RNG and progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelWeights<f32>,
    pub ema: EmaState,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh weights drawn from the configured seed.
    pub fn new(cfg: TrainConfig, n_domains: usize) -> Result<Self> {
        cfg.validate()?;
        if n_domains < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 domains, got {n_domains}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let arch = cfg.arch(n_domains);
        let model = ModelWeights::new(arch, &mut rng)?;
        let opt_g = Adam::new(
            &model.params,
            model.params.ids_in(Group::GENERATOR),
            cfg.init_lr,
            cfg.beta1,
            cfg.beta2,
        );
        let opt_d = Adam::new(
            &model.params,
            model.params.ids_in(Group::DISCRIMINATOR),
            cfg.init_lr,
            cfg.beta1,
            cfg.beta2,
        );
        Ok(Trainer {
            ema: EmaState::new(n_domains, arch.embed_channels()),
            cfg,
            model,
            opt_g,
            opt_d,
            rng,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.cfg.validate()?;
        Ok(Trainer {
            cfg: ckpt.cfg,
            model: ckpt.model,
            ema: ckpt.ema,
            opt_g: ckpt.opt_g,
            opt_d: ckpt.opt_d,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cfg: self.cfg.clone(),
            model: self.model.clone(),
            ema: self.ema.clone(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
        }
    }

    pub fn n_domains(&self) -> usize {
        self.model.arch().n_domains
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.num_epochs
    }

    /// Number of iterations in one epoch: the largest domain's patch count.
    pub fn iterations_per_epoch(domains: &[Vec<Tensor<f32>>]) -> usize {
        domains.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn check_domains(&self, domains: &[Vec<Tensor<f32>>]) -> Result<()> {
        if domains.len() < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 domains, got {}",
                domains.len()
            )));
        }
        if domains.len() != self.n_domains() {
            return Err(Error::Config(format!(
                "model has {} domains but {} were supplied",
                self.n_domains(),
                domains.len()
            )));
        }
        for (d, patches) in domains.iter().enumerate() {
            if patches.is_empty() {
                return Err(Error::Data(format!("domain {d} has no patches")));
            }
            for p in patches {
                self.model.nets.check_patch(p)?;
            }
        }
        Ok(())
    }

    /// One iteration: sample, step every pair, update both sides and EMA.
    pub fn iteration(&mut self, domains: &[Vec<Tensor<f32>>]) -> Result<Vec<LossBundle>> {
        let picks: Vec<&Tensor<f32>> = domains
            .iter()
            .map(|ps| &ps[self.rng.random_range(0..ps.len())])
            .collect();
        let pairs = domain_pairs(domains.len());
        let w = self.cfg.weights;
        let model = &self.model;
        // rayon preserves the input order in `collect`, and the reduction
        // below is sequential, so the result is independent of threading
        let steps: Vec<PairStep<f32>> = pairs
            .par_iter()
            .map(|&(i, j)| pairwise_step(model, i, j, picks[i], picks[j], &w))
            .collect::<Result<_>>()?;

        let n_params = self.model.params.len();
        let mut grads_g = Gradients::empty(n_params);
        let mut grads_d = Gradients::empty(n_params);
        let mut styles: Vec<Option<&AdaINParams<f64>>> = vec![None; domains.len()];
        for (step, &(i, j)) in steps.iter().zip(&pairs) {
            grads_g.accumulate(&step.grads_g);
            grads_d.accumulate(&step.grads_d);
            styles[i].get_or_insert(&step.style_i);
            styles[j].get_or_insert(&step.style_j);
        }
        self.opt_g.update(&mut self.model.params, &grads_g);
        self.opt_d.update(&mut self.model.params, &grads_d);
        for (d, s) in styles.into_iter().enumerate() {
            if let Some(s) = s {
                self.ema.update(d, s)?;
            }
        }
        Ok(steps.into_iter().map(|s| s.bundle).collect())
    }

    /// Runs the next epoch, passing every log record to `sink`.
    pub fn run_epoch(
        &mut self,
        domains: &[Vec<Tensor<f32>>],
        sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        self.check_domains(domains)?;
        if self.is_finished() {
            return Err(Error::Config(format!(
                "all {} epochs already completed",
                self.cfg.num_epochs
            )));
        }
        let epoch = self.epoch + 1;
        let lr = epoch_lr(epoch, &self.cfg)?;
        self.opt_g.lr = lr;
        self.opt_d.lr = lr;
        let iters = Self::iterations_per_epoch(domains);
        let pairs = domain_pairs(domains.len());
        for it in 0..iters {
            let bundles = self.iteration(domains)?;
            for (p, (b, &dp)) in bundles.iter().zip(&pairs).enumerate() {
                if !b.is_finite() {
                    return Err(Error::Consistency(format!(
                        "non-finite loss at epoch {epoch}, iteration {it}"
                    )));
                }
                sink(&LogRecord {
                    epoch,
                    iteration: it,
                    pair: p,
                    domains: dp,
                    lr,
                    losses: *b,
                })?;
            }
        }
        if !self.ema.is_finite() {
            return Err(Error::Consistency(
                "global AdaIN parameters became non-finite".into(),
            ));
        }
        self.epoch = epoch;
        Ok(())
    }
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelWeights<f32>,
    pub ema: EmaState,
    pub log: Vec<LogRecord>,
}

/// Trains from scratch and keeps the log in memory.
pub fn train(domains: &[Vec<Tensor<f32>>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    let mut trainer = Trainer::new(cfg.clone(), domains.len())?;
    let mut log = Vec::new();
    while !trainer.is_finished() {
        trainer.run_epoch(domains, &mut |r| {
            log.push(r.clone());
            Ok(())
        })?;
        info!("epoch {}/{} done", trainer.epoch, cfg.num_epochs);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        ema: trainer.ema,
        log,
    })
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.bin")
}

/// Trains to completion inside `run_dir`, appending to the JSON-lines log
/// and writing a checkpoint after every epoch. Training resumes from the
/// directory's latest checkpoint when one exists.
pub fn train_in_dir(
    domains: &[Vec<Tensor<f32>>],
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<Trainer> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut trainer = match checkpoint::latest(run_dir)? {
        Some(path) => {
            let ckpt = checkpoint::load(&path)?;
            ckpt.check_domains(domains.len())?;
            info!(
                "resuming from {} after epoch {}",
                path.display(),
                ckpt.epoch
            );
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(cfg.clone(), domains.len())?,
    };
    let log_path = run_dir.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut out = BufWriter::new(file);
    while !trainer.is_finished() {
        trainer.run_epoch(domains, &mut |r| {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(&log_path, e))
        })?;
        out.flush().map_err(|e| Error::io(&log_path, e))?;
        let path: PathBuf = run_dir.join(checkpoint_name(trainer.epoch));
        checkpoint::save(&trainer.to_checkpoint(), &path)?;
        checkpoint::mark_latest(run_dir, &path)?;
        info!(
            "epoch {}/{} written to {}",
            trainer.epoch,
            trainer.cfg.num_epochs,
            path.display()
        );
    }
    Ok(trainer)
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
