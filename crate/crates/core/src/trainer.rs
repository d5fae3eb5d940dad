//! The per-task training loop, end-of-task consolidation and evaluation.
//!
//! Each mini-batch runs the prototype E-step (Sinkhorn targets), the M-step
//! cross-entropy, the alignment loss on the current-task centers and, from the
//! second task on, the replay and separation losses. All parameters take one
//! Adam step on the summed loss and are projected back onto the sphere.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{align_forward_backward, head_backward, head_forward, predict, ClassCenters, MlpGrads, Projector};
use crate::config::{CenterInit, MemoryStrategy, TrainConfig};
use crate::data::{BatchPlan, Labeled, Stream, TaskData};
use crate::error::{ensure, Divergence, Error, Result};
use crate::eval::{session_report, SessionReport};
use crate::memory::{
    consolidate_task, old_loss_from_logits, sep_loss_from_logits, ExemplarMemory, Memory, PrototypeMemory, ReplaySet,
};
use crate::optim::{adam_step, AdamState};
use crate::math::kmeans_pp_seeds;
use crate::ot::sinkhorn_balanced;
use crate::proto::{proto_grads, PrototypeSet};
use crate::rng::{rng_for, Stream as RngStream};

/// Loss terms of one batch. `reduct = λ_old·old + sep`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub proto: f64,
    pub align: f64,
    pub old: f64,
    pub sep: f64,
    pub reduct: f64,
    pub total: f64,
}

impl Losses {
    fn assemble(proto: f64, align: f64, old: f64, sep: f64, lambda_old: f64) -> Self {
        let reduct = crate::memory::reduct_loss(old, sep, lambda_old);
        Self {
            proto,
            align,
            old,
            sep,
            reduct,
            total: proto + align + reduct,
        }
    }

    fn is_finite(&self) -> bool {
        [self.proto, self.align, self.old, self.sep, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    fn add_scaled(&mut self, o: &Losses, w: f64) {
        self.proto += w * o.proto;
        self.align += w * o.align;
        self.old += w * o.old;
        self.sep += w * o.sep;
        self.reduct += w * o.reduct;
        self.total += w * o.total;
    }
}

/// Per-epoch means of the batch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: Losses,
    /// Replay draws that fell back to uniform prototype choice.
    pub replay_fallbacks: usize,
    /// Overall accuracy on the test splits seen so far, when periodic
    /// evaluation is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_overall: Option<f64>,
}

/// Gradients for every trainable group in one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub mu: Array2<f64>,
    pub log_sigma: Array1<f64>,
    pub projector: Option<MlpGrads>,
    pub centers: Vec<Array2<f64>>,
}

/// Inputs that stay fixed while the losses are differentiated.
pub struct BatchInputs<'a> {
    pub z: ArrayView2<'a, f64>,
    /// Sinkhorn targets, `n × r`.
    pub w: ArrayView2<'a, f64>,
    pub replay: Option<&'a ReplaySet>,
    pub current: Range<usize>,
}

/// All loss terms and their gradients for fixed targets and replay.
pub fn batch_losses_and_grads(
    protos: &PrototypeSet,
    projector: &Projector,
    centers: &ClassCenters,
    input: &BatchInputs<'_>,
    config: &TrainConfig,
) -> Result<(Losses, BatchGrads)> {
    let n = input.z.nrows();
    let (l_proto, pg) = proto_grads(input.z, protos, input.w)?;

    let replay = input.replay.filter(|r| !r.is_empty());
    let x = match replay {
        Some(r) => concatenate(Axis(0), &[input.z, r.z.view()]).map_err(|e| Error::Validation(e.to_string()))?,
        None => input.z.to_owned(),
    };
    let fwd = head_forward(x.view(), projector, centers)?;
    let cur_logits = fwd.logits.slice(s![..n, ..]);
    let (l_align, mut dcur) = align_forward_backward(cur_logits, input.w, input.current.clone(), config.lambda_ga)?;

    let has_old = input.current.start > 0;
    let mut l_sep = 0.0;
    if has_old && config.sep_loss {
        let (l, d) = sep_loss_from_logits(cur_logits, input.current.clone())?;
        l_sep = l;
        dcur += &d;
    }
    let mut dlogits = Array2::zeros(fwd.logits.raw_dim());
    dlogits.slice_mut(s![..n, ..]).assign(&dcur);
    let mut l_old = 0.0;
    if let Some(r) = replay {
        let (l, d) = old_loss_from_logits(fwd.logits.slice(s![n.., ..]), &r.labels)?;
        l_old = l;
        dlogits
            .slice_mut(s![n.., ..])
            .assign(&d.mapv(|g| g * config.lambda_old));
    }
    let losses = Losses::assemble(l_proto, l_align, l_old, l_sep, config.lambda_old);
    let hg = head_backward(x.view(), projector, centers, &fwd, dlogits.view());
    Ok((
        losses,
        BatchGrads {
            mu: pg.mu,
            log_sigma: pg.log_sigma,
            projector: hg.projector,
            centers: hg.centers,
        },
    ))
}

/// Everything that survives from one session to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub config: TrainConfig,
    pub dim: usize,
    pub projector: Projector,
    pub centers: ClassCenters,
    pub memory: Memory,
    /// Moments for `w1, b1, w2, b2`; empty without a projector.
    pub projector_moments: Vec<AdamState>,
    /// One per center block.
    pub center_moments: Vec<AdamState>,
    pub history: Vec<EpochRecord>,
    pub reports: Vec<SessionReport>,
}

impl EngineState {
    pub fn new(config: TrainConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        ensure!(dim >= 2, "feature dimension must be at least 2");
        let projector = if config.use_projector {
            Projector::new_mlp(dim, config.hidden_dim, config.proj_dim, config.seed)
        } else {
            Projector::Identity { dim }
        };
        let projector_moments = match &projector {
            Projector::Mlp(m) => vec![
                AdamState::new(m.w1.len()),
                AdamState::new(m.b1.len()),
                AdamState::new(m.w2.len()),
                AdamState::new(m.b2.len()),
            ],
            Projector::Identity { .. } => Vec::new(),
        };
        let memory = match config.memory {
            MemoryStrategy::Proto => Memory::Prototypes(PrototypeMemory::default()),
            MemoryStrategy::Exemplar(k) => Memory::Exemplars(ExemplarMemory::new(k)),
        };
        Ok(Self {
            centers: ClassCenters::new(config.tau),
            config,
            dim,
            projector,
            memory,
            projector_moments,
            center_moments: Vec::new(),
            history: Vec::new(),
            reports: Vec::new(),
        })
    }

    /// Completed sessions.
    pub fn sessions(&self) -> usize {
        self.centers.sessions()
    }

    fn learning_rate(&self, epoch: usize) -> f64 {
        if self.config.cosine_lr {
            let e = self.config.epochs as f64;
            0.5 * self.config.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / e).cos())
        } else {
            self.config.lr
        }
    }

    fn apply(
        &mut self,
        protos: &mut PrototypeSet,
        moments: &mut [AdamState; 2],
        grads: &BatchGrads,
        lr: f64,
    ) {
        let [mu_m, ls_m] = moments;
        adam_step(
            protos.mu.as_slice_mut().expect("standard layout"),
            grads.mu.as_slice().expect("standard layout"),
            mu_m,
            lr,
        );
        if self.config.trainable_sigma {
            adam_step(
                protos.log_sigma.as_slice_mut().expect("standard layout"),
                grads.log_sigma.as_slice().expect("standard layout"),
                ls_m,
                lr,
            );
        }
        if let (Projector::Mlp(m), Some(g)) = (&mut self.projector, &grads.projector) {
            let st = &mut self.projector_moments;
            adam_step(m.w1.as_slice_mut().unwrap(), g.w1.as_slice().unwrap(), &mut st[0], lr);
            adam_step(m.b1.as_slice_mut().unwrap(), g.b1.as_slice().unwrap(), &mut st[1], lr);
            adam_step(m.w2.as_slice_mut().unwrap(), g.w2.as_slice().unwrap(), &mut st[2], lr);
            adam_step(m.b2.as_slice_mut().unwrap(), g.b2.as_slice().unwrap(), &mut st[3], lr);
        }
        let current = self.centers.sessions() - 1;
        for (t, g) in grads.centers.iter().enumerate() {
            if t < current && self.config.freeze_old_centers {
                continue;
            }
            adam_step(
                self.centers.blocks[t].as_slice_mut().expect("standard layout"),
                g.as_slice().expect("standard layout"),
                &mut self.center_moments[t],
                lr,
            );
            crate::math::normalize_rows_inplace(&mut self.centers.blocks[t]);
        }
        protos.project();
    }

    /// Trains session `self.sessions()` on `task`, consolidates it into memory
    /// and evaluates on `tests` (the test splits of every task so far,
    /// including this one).
    pub fn train_task(&mut self, task: &TaskData, tests: &[&Labeled]) -> Result<SessionReport> {
        let cfg = self.config.clone();
        let t = self.sessions();
        ensure!(
            task.train.dim() == self.dim,
            "task {t} has dimension {}, engine expects {}",
            task.train.dim(),
            self.dim
        );
        ensure!(task.classes >= 1, "task {t} declares no classes");
        ensure!(tests.len() == t + 1, "expected {} test splits, got {}", t + 1, tests.len());

        let mut protos = PrototypeSet::init(cfg.pnum, self.dim, cfg.seed, t, Some(task.train.view()));
        let mut proto_moments = [AdamState::new(protos.mu.len()), AdamState::new(protos.len())];
        let m = self.projector.output_dim();
        let current = match cfg.center_init {
            CenterInit::KmeansPp if task.train.rows() >= task.classes => {
                let u = self.projector.forward(task.train.view())?.u;
                let mut rng = rng_for(cfg.seed, RngStream::CenterInit, &[t as u64, 1]);
                let seeds = kmeans_pp_seeds(&mut rng, u.view(), task.classes);
                self.centers.add_block(u.select(Axis(0), &seeds))
            }
            _ => self.centers.add_task(task.classes, m, cfg.seed, t),
        };
        self.center_moments.push(AdamState::new(task.classes * self.projector.output_dim()));

        let n = task.train.rows();
        for epoch in 0..cfg.epochs {
            let lr = self.learning_rate(epoch);
            let plan = BatchPlan::new(n, cfg.batch_size, cfg.seed, t, epoch);
            let mut sum = Losses::default();
            let mut fallbacks = 0;
            for (b, idx) in plan.indices().enumerate() {
                let z = task.train.gather(idx);
                let log_p = protos.log_posterior(z.view())?;
                let w = sinkhorn_balanced(log_p.view(), cfg.epsilon, cfg.sinkhorn_iters)?.to_per_sample_targets();
                let replay = if t > 0 && cfg.replay && !self.memory.is_empty() {
                    let mut rng = rng_for(cfg.seed, RngStream::Replay, &[t as u64, epoch as u64, b as u64]);
                    let s = cfg.replay_size(self.centers.total());
                    let r = self.memory.sample(s, self.dim, &mut rng)?;
                    fallbacks += r.fallback.len();
                    Some(r)
                } else {
                    None
                };
                let input = BatchInputs {
                    z: z.view(),
                    w: w.view(),
                    replay: replay.as_ref(),
                    current: current.clone(),
                };
                let (losses, grads) = batch_losses_and_grads(&protos, &self.projector, &self.centers, &input, &cfg)?;
                if !losses.is_finite() {
                    return Err(Error::NonFiniteLoss(Box::new(Divergence {
                        task: t,
                        epoch,
                        batch: b,
                        proto: losses.proto,
                        align: losses.align,
                        old: losses.old,
                        sep: losses.sep,
                    })));
                }
                sum.add_scaled(&losses, 1.0);
                self.apply(&mut protos, &mut proto_moments, &grads, lr);
            }
            let mut mean = Losses::default();
            mean.add_scaled(&sum, 1.0 / plan.len() as f64);
            let periodic = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < cfg.epochs;
            let acc_overall = if periodic {
                Some(self.evaluate(tests)?.acc_overall)
            } else {
                None
            };
            self.history.push(EpochRecord {
                task: t,
                epoch,
                lr,
                losses: mean,
                replay_fallbacks: fallbacks,
                acc_overall,
            });
        }

        match &mut self.memory {
            Memory::Prototypes(m) => m.extend(consolidate_task(
                &task.train,
                &protos,
                &self.projector,
                &self.centers,
                current,
                t,
                cfg.variance_mode,
            )?),
            Memory::Exemplars(m) => {
                let mut rng = rng_for(cfg.seed, RngStream::Exemplar, &[t as u64]);
                m.consolidate(&task.train, &self.projector, &self.centers, current, &mut rng)?
            }
        }
        let report = self.evaluate(tests)?;
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Task-id-free evaluation on the given test splits, one per session so
    /// far (fewer is allowed). Forgetting is measured against the stored
    /// first-session report.
    pub fn evaluate(&self, tests: &[&Labeled]) -> Result<SessionReport> {
        ensure!(!tests.is_empty(), "no test splits to evaluate");
        ensure!(self.centers.total() > 0, "nothing trained yet");
        let sizes: Vec<usize> = tests.iter().map(|l| l.labels.len()).collect();
        let views: Vec<_> = tests.iter().map(|l| l.features.view()).collect();
        let z = concatenate(Axis(0), &views).map_err(|e| Error::Validation(e.to_string()))?;
        ensure!(
            z.ncols() == self.dim,
            "test features have dimension {}, engine expects {}",
            z.ncols(),
            self.dim
        );
        let labels: Vec<u32> = tests.iter().flat_map(|l| l.labels.iter().copied()).collect();
        let pred = predict(z.view(), &self.projector, &self.centers)?;
        let session = self.sessions();
        let first = if session > 1 { self.reports.first() } else { None };
        session_report(
            session,
            self.config.pnum,
            &pred,
            &labels,
            self.centers.total(),
            &sizes,
            first,
        )
    }

    /// Trains every remaining task of `stream`, calling `on_session` after
    /// each one (for checkpointing or logging).
    pub fn run_stream<F>(&mut self, stream: &Stream, mut on_session: F) -> Result<()>
    where
        F: FnMut(&EngineState, &SessionReport) -> Result<()>,
    {
        stream.validate()?;
        ensure!(
            stream.dim == self.dim,
            "stream dimension {} does not match engine dimension {}",
            stream.dim,
            self.dim
        );
        ensure!(
            self.sessions() <= stream.tasks.len(),
            "state has {} sessions but the stream only {} tasks",
            self.sessions(),
            stream.tasks.len()
        );
        for (t, b) in self.centers.blocks.iter().enumerate() {
            ensure!(
                b.nrows() == stream.tasks[t].classes,
                "task {t} has {} classes in the stream but {} in the state",
                stream.tasks[t].classes,
                b.nrows()
            );
        }
        for t in self.sessions()..stream.tasks.len() {
            let tests: Vec<&Labeled> = stream.tasks[..=t].iter().map(|x| &x.test).collect();
            let report = self.train_task(&stream.tasks[t], &tests)?;
            on_session(self, &report)?;
        }
        Ok(())
    }
}

/// Trains a fresh engine over the whole stream.
pub fn run_stream(stream: &Stream, config: TrainConfig) -> Result<EngineState> {
    let mut state = EngineState::new(config, stream.dim)?;
    state.run_stream(stream, |_, _| Ok(()))?;
    Ok(state)
}

/// Sizes of a gradient-check instance.
#[derive(Debug, Clone, Copy)]
pub struct CheckSizes {
    pub n: usize,
    pub r: usize,
    /// Current-task classes.
    pub k: usize,
    /// Old classes (0 checks the first-task losses only).
    pub k_old: usize,
    pub d: usize,
    pub hidden: usize,
    pub proj: usize,
    /// Replay rows.
    pub replay: usize,
}

impl Default for CheckSizes {
    fn default() -> Self {
        Self {
            n: 8,
            r: 6,
            k: 3,
            k_old: 2,
            d: 12,
            hidden: 7,
            proj: 5,
            replay: 4,
        }
    }
}

/// Worst relative error per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<(&'static str, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, e)| *e <= self.tolerance)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.groups
            .iter()
            .filter(|(_, e)| *e > self.tolerance)
            .map(|(g, _)| *g)
            .collect()
    }
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares every analytic gradient of the batch loss with central finite
/// differences (step `1e-4`) on a seeded random instance. `corrupt` may alter
/// the analytic gradients first, for fault injection.
pub fn grad_check_with(
    config: &TrainConfig,
    sizes: CheckSizes,
    tolerance: f64,
    seed: u64,
    corrupt: impl FnOnce(&mut BatchGrads),
) -> Result<GradCheckReport> {
    use rand::Rng as _;
    use rand::SeedableRng;

    let CheckSizes {
        n,
        r,
        k,
        k_old,
        d,
        hidden,
        proj,
        replay,
    } = sizes;
    let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut protos = PrototypeSet::init(r, d, seed, 0, None);
    protos.log_sigma.mapv_inplace(|x| x + g.random_range(-0.3..0.3));
    // Features scattered around the prototypes, as in training.
    let mut z = crate::math::random_unit_rows(&mut g, n, d) * 0.4;
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        row += &protos.mu.row(i % r);
    }
    crate::math::normalize_rows_inplace(&mut z);
    let projector = if config.use_projector {
        Projector::new_mlp(d, hidden, proj, seed)
    } else {
        Projector::Identity { dim: d }
    };
    let m = projector.output_dim();
    let mut centers = ClassCenters::new(config.tau);
    if k_old > 0 {
        centers.add_task(k_old, m, seed, 0);
    }
    let current = centers.add_task(k, m, seed, 1);
    // Centers off the unit sphere exercise the normalization inside the head.
    for b in &mut centers.blocks {
        b.mapv_inplace(|x| x * g.random_range(0.5..1.5));
    }
    // Targets from an unrelated plan; the model's own plan nearly equals its
    // posterior here, which would leave the prototype gradients at zero.
    let other = Array2::from_shape_fn((r, n), |_| g.random_range(-0.2..0.0));
    let w = sinkhorn_balanced(other.view(), config.epsilon, config.sinkhorn_iters)?.to_per_sample_targets();
    let replay_set = (k_old > 0 && replay > 0).then(|| ReplaySet {
        z: crate::math::random_unit_rows(&mut g, replay, d),
        labels: (0..replay).map(|i| i % k_old).collect(),
        fallback: Vec::new(),
    });
    let input = BatchInputs {
        z: z.view(),
        w: w.view(),
        replay: replay_set.as_ref(),
        current,
    };
    let loss = |p: &PrototypeSet, pr: &Projector, c: &ClassCenters| -> f64 {
        batch_losses_and_grads(p, pr, c, &input, config).expect("valid instance").0.total
    };
    let (_, mut grads) = batch_losses_and_grads(&protos, &projector, &centers, &input, config)?;
    corrupt(&mut grads);

    const H: f64 = 1e-4;
    fn worst(analytic: &[f64], mut numeric: impl FnMut(usize) -> f64) -> f64 {
        (0..analytic.len())
            .map(|i| relative_error(analytic[i], numeric(i)))
            .fold(0.0, f64::max)
    }
    let mut groups = Vec::new();

    let e = worst(grads.mu.as_slice().unwrap(), |i| {
        let mut p = protos.clone();
        p.mu.as_slice_mut().unwrap()[i] += H;
        let up = loss(&p, &projector, &centers);
        p.mu.as_slice_mut().unwrap()[i] -= 2.0 * H;
        (up - loss(&p, &projector, &centers)) / (2.0 * H)
    });
    groups.push(("mu", e));
    let e = worst(grads.log_sigma.as_slice().unwrap(), |i| {
        let mut p = protos.clone();
        p.log_sigma[i] += H;
        let up = loss(&p, &projector, &centers);
        p.log_sigma[i] -= 2.0 * H;
        (up - loss(&p, &projector, &centers)) / (2.0 * H)
    });
    groups.push(("log_sigma", e));

    if let (Projector::Mlp(_), Some(pg)) = (&projector, &grads.projector) {
        let tensors: [(&'static str, &[f64]); 4] = [
            ("w1", pg.w1.as_slice().unwrap()),
            ("b1", pg.b1.as_slice().unwrap()),
            ("w2", pg.w2.as_slice().unwrap()),
            ("b2", pg.b2.as_slice().unwrap()),
        ];
        for (ti, (name, analytic)) in tensors.into_iter().enumerate() {
            let e = worst(analytic, |i| {
                let mut pr = projector.clone();
                let bump = |pr: &mut Projector, delta: f64| {
                    let Projector::Mlp(m) = pr else { unreachable!() };
                    let slot = match ti {
                        0 => &mut m.w1.as_slice_mut().unwrap()[i],
                        1 => &mut m.b1.as_slice_mut().unwrap()[i],
                        2 => &mut m.w2.as_slice_mut().unwrap()[i],
                        _ => &mut m.b2.as_slice_mut().unwrap()[i],
                    };
                    *slot += delta;
                };
                bump(&mut pr, H);
                let up = loss(&protos, &pr, &centers);
                bump(&mut pr, -2.0 * H);
                (up - loss(&protos, &pr, &centers)) / (2.0 * H)
            });
            groups.push((name, e));
        }
    }

    let mut e_centers: f64 = 0.0;
    for (t, block) in grads.centers.iter().enumerate() {
        let e = worst(block.as_slice().unwrap(), |i| {
            let mut c = centers.clone();
            c.blocks[t].as_slice_mut().unwrap()[i] += H;
            let up = loss(&protos, &projector, &c);
            c.blocks[t].as_slice_mut().unwrap()[i] -= 2.0 * H;
            (up - loss(&protos, &projector, &c)) / (2.0 * H)
        });
        e_centers = e_centers.max(e);
    }
    groups.push(("centers", e_centers));

    Ok(GradCheckReport { groups, tolerance })
}

pub fn grad_check(config: &TrainConfig, sizes: CheckSizes, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(config, sizes, tolerance, seed, |_| {})
}
