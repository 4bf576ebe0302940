//! Optimization: AdamW, the template/search pair sampler, and the teacher
//! and distillation training steps.

use crate::config::Config;
use crate::data::SequenceDataset;
use crate::distill::{md_loss, soften, TeacherEnsemble};
use crate::error::{Error, Result};
use crate::geom::CenterBox;
use crate::head::{crop_resize, make_gt_maps, pred_loss, BnStat, GtMaps, BN_MOMENTUM, SEARCH_CONTEXT, TEMPLATE_CONTEXT};
use crate::layout::Builder;
use crate::mi::{roi_token_interp, vir_loss, Critic};
use crate::model::TrackerModel;
use crate::rng::SplitMix64;
use crate::tensor::{Element, Exec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vit::{sparsity_loss, ForceGates, Mode};

/// Decoupled-weight-decay Adam. Decay applies to matrices and kernels
/// only, not to biases and normalization parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        for (id, g) in grads {
            let decay = store.get(*id).ndim() >= 2;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.is_empty() {
                m.resize(g.numel(), 0.0);
                v.resize(g.numel(), 0.0);
            }
            let p = store.get_mut(*id);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk.as_f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mut x = w.as_f64();
                if decay {
                    x -= lr * self.weight_decay * x;
                }
                x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                *w = T::lit(x);
            }
        }
    }
}

/// Learning rate with a x0.1 step after 80% of training.
pub fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    if total > 0 && step * 5 >= total * 4 {
        base * 0.1
    } else {
        base
    }
}

/// Template/search crops with the target box in normalized search
/// coordinates.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B, 3, Hz, Wz]`
    pub z: Tensor<T>,
    /// `[B, 3, Hx, Wx]`
    pub x: Tensor<T>,
    pub boxes: Vec<CenterBox>,
}

/// Draws training pairs from a set of sequences.
pub struct PairSampler<'a> {
    seqs: &'a [SequenceDataset],
    rng: SplitMix64,
    center_jitter: f64,
    scale_jitter: f64,
}

impl<'a> PairSampler<'a> {
    pub fn new(seqs: &'a [SequenceDataset], seed: u64, center_jitter: f64, scale_jitter: f64) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("training needs at least one non-empty sequence".into()));
        }
        Ok(Self {
            seqs,
            rng: SplitMix64::new(seed),
            center_jitter,
            scale_jitter,
        })
    }

    pub fn sample<T: Element>(&mut self, batch: usize, tsize: (usize, usize), xsize: (usize, usize)) -> Batch<T> {
        let mut z = Vec::with_capacity(batch * 3 * tsize.0 * tsize.1);
        let mut x = Vec::with_capacity(batch * 3 * xsize.0 * xsize.1);
        let mut boxes = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = &self.seqs[self.rng.below(self.seqs.len())];
            let i = self.rng.below(s.len());
            let j = self.rng.below(s.len());
            let bz = s.boxes[i];
            let (zcx, zcy) = bz.center();
            let zt = crop_resize::<T>(&s.frames[i], zcx, zcy, TEMPLATE_CONTEXT * (bz.w * bz.h).sqrt(), tsize);
            z.extend(zt.into_data());
            let bx = s.boxes[j];
            let side = SEARCH_CONTEXT * (bx.w * bx.h).sqrt() * self.rng.uniform(-self.scale_jitter, self.scale_jitter).exp();
            let (gx, gy) = bx.center();
            let cx = gx + self.rng.uniform(-self.center_jitter, self.center_jitter) * side;
            let cy = gy + self.rng.uniform(-self.center_jitter, self.center_jitter) * side;
            let xt = crop_resize::<T>(&s.frames[j], cx, cy, side, xsize);
            x.extend(xt.into_data());
            let x0 = cx - side / 2.0;
            let y0 = cy - side / 2.0;
            boxes.push(CenterBox::new(
                ((gx - x0) / side).clamp(0.0, 1.0),
                ((gy - y0) / side).clamp(0.0, 1.0),
                (bx.w / side).min(1.0),
                (bx.h / side).min(1.0),
            ));
        }
        Batch {
            z: Tensor::from_parts(vec![batch, 3, tsize.0, tsize.1], z),
            x: Tensor::from_parts(vec![batch, 3, xsize.0, xsize.1], x),
            boxes,
        }
    }
}

/// Scalar values of every objective in one step. Unused terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub pred: f64,
    pub spar: f64,
    pub vir: f64,
    pub md: f64,
    pub total: f64,
    /// Fraction of adaptive gates open over the batch.
    pub active: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,lr,total,cls,iou,l1,spar,vir,md,active";

    pub fn csv_line(&self, step: usize, lr: f64) -> String {
        format!(
            "{step},{lr:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
            self.total, self.cls, self.iou, self.l1, self.spar, self.vir, self.md, self.active
        )
    }
}

fn scalar(t: &Tape<impl Element>, v: Var) -> f64 {
    t.value(v).data()[0].as_f64()
}

/// Which optional objectives enter a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub spar: bool,
    pub vir: bool,
}

/// Result of [`task_objective`].
pub struct TaskObjective {
    pub total: Var,
    /// Final backbone tokens `[B, K, d]`.
    pub tokens: Var,
    pub record: LossBreakdown,
    pub bn_stats: Vec<BnStat>,
}

/// `L_pred` plus the selected optional terms for template `z` and search
/// `x` already on `tape`, with `boxes` in normalized search coordinates.
#[allow(clippy::too_many_arguments)]
pub fn task_objective<T: Element>(
    tape: &mut Tape<T>,
    model: &TrackerModel,
    store: &ParamStore<T>,
    cfg: &Config,
    z: &Var,
    x: &Var,
    boxes: &[CenterBox],
    terms: Terms,
    seed: u64,
) -> Result<TaskObjective> {
    let bcfg = &model.cfg.backbone;
    let out = model.forward(tape, store, z, x, Mode::Train, &ForceGates::None)?;
    let gts: Vec<GtMaps> = boxes.iter().map(|b| make_gt_maps(b, bcfg.search_grid())).collect();
    let pl = pred_loss(tape, &out.maps, &gts, &cfg.weights)?;
    let mut rec = LossBreakdown {
        cls: scalar(tape, pl.cls),
        iou: scalar(tape, pl.iou),
        l1: scalar(tape, pl.l1),
        pred: scalar(tape, pl.total),
        ..Default::default()
    };
    let gates = out.backbone.trace.gates.iter().flatten().filter(|&&g| g).count();
    rec.active = gates as f64 / (bcfg.adaptive_blocks() * boxes.len()).max(1) as f64;
    let mut parts: Vec<(&str, Var, f64)> = vec![("pred", pl.total, 1.0)];
    if terms.spar {
        let s = sparsity_loss(tape, &out.backbone.probs, bcfg.zeta)?;
        rec.spar = scalar(tape, s);
        parts.push(("spar", s, cfg.weights.gamma));
    }
    if terms.vir {
        let tok = &out.backbone.state.tokens;
        let tr = out.backbone.state.template_range.clone();
        let sr = out.backbone.state.search_range.clone();
        let tz = tape.slice(tok, 1, tr.start, tr.end)?;
        let tx = tape.slice(tok, 1, sr.start, sr.end)?;
        let tzp = roi_token_interp(tape, &tx, bcfg.search_grid(), boxes, bcfg.template_grid())?;
        let v = vir_loss(tape, store, &model.vir_critic, &tz, &tzp, seed)?;
        rec.vir = scalar(tape, v);
        parts.push(("vir", v, cfg.weights.kappa));
    }
    let refs: Vec<(&str, &Var, f64)> = parts.iter().map(|(n, v, w)| (*n, v, *w)).collect();
    let total = crate::head::combine_losses(tape, &refs)?;
    rec.total = scalar(tape, total);
    Ok(TaskObjective {
        total,
        tokens: out.backbone.state.tokens,
        record: rec,
        bn_stats: out.maps.bn_stats,
    })
}

fn task_forward<T: Element>(
    model: &TrackerModel,
    store: &ParamStore<T>,
    cfg: &Config,
    batch: &Batch<T>,
    terms: Terms,
    seed: u64,
) -> Result<(Tape<T>, TaskObjective)> {
    let mut tape = Tape::new();
    let z = tape.constant(batch.z.clone());
    let x = tape.constant(batch.x.clone());
    let obj = task_objective(&mut tape, model, store, cfg, &z, &x, &batch.boxes, terms, seed)?;
    Ok((tape, obj))
}

/// The full teacher objective `L_pred + gamma * L_spar + kappa * L_vir` on
/// a fresh tape.
pub fn overall_objective<T: Element>(
    model: &TrackerModel,
    store: &ParamStore<T>,
    cfg: &Config,
    batch: &Batch<T>,
    seed: u64,
) -> Result<(Tape<T>, Var, LossBreakdown)> {
    let (tape, o) = task_forward(model, store, cfg, batch, Terms { spar: true, vir: true }, seed)?;
    Ok((tape, o.total, o.record))
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains a tracker from scratch on the overall objective.
pub struct Trainer<'a, T> {
    pub model: TrackerModel,
    pub store: ParamStore<T>,
    pub cfg: Config,
    opt: AdamW,
    sampler: PairSampler<'a>,
    pub step: usize,
}

impl<'a, T: Element> Trainer<'a, T> {
    pub fn new(cfg: &Config, seqs: &'a [SequenceDataset]) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = TrackerModel::init(&cfg.model, cfg.seed)?;
        Self::resume(cfg, model, store, seqs)
    }

    pub fn resume(cfg: &Config, model: TrackerModel, store: ParamStore<T>, seqs: &'a [SequenceDataset]) -> Result<Self> {
        Ok(Self {
            model,
            store,
            cfg: cfg.clone(),
            opt: AdamW::new(cfg.weight_decay),
            sampler: PairSampler::new(seqs, cfg.seed ^ 0x5A5A_5A5A, cfg.center_jitter, cfg.scale_jitter)?,
            step: 0,
        })
    }

    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let b = &self.model.cfg.backbone;
        let batch = self.sampler.sample::<T>(self.cfg.batch_size, b.template_size, b.search_size);
        let terms = Terms { spar: true, vir: true };
        let (mut tape, o) = task_forward(&self.model, &self.store, &self.cfg, &batch, terms, step_seed(self.cfg.seed, self.step))?;
        let (rec, bn) = (o.record, o.bn_stats);
        tape.backward(o.total)?;
        let grads = tape.param_grads(&self.store);
        drop(tape);
        let lr = lr_at(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.step(&mut self.store, &grads, lr);
        for s in &bn {
            s.apply(&mut self.store, BN_MOMENTUM);
        }
        self.step += 1;
        Ok(rec)
    }

    /// Run the configured number of steps, calling `log` after each.
    pub fn run(&mut self, mut log: impl FnMut(usize, f64, &LossBreakdown)) -> Result<()> {
        while self.step < self.cfg.steps {
            let lr = lr_at(self.cfg.lr, self.step, self.cfg.steps);
            let rec = self.train_step()?;
            log(self.step, lr, &rec);
        }
        Ok(())
    }
}

/// Trains a student against a frozen teacher ensemble on
/// `L_pred + eta * L_md`, optionally with the student's own sparsity and
/// view-invariance terms.
pub struct Distiller<'a, T> {
    pub student: TrackerModel,
    pub store: ParamStore<T>,
    pub critic: Critic,
    pub critic_store: ParamStore<T>,
    pub ensemble: TeacherEnsemble<T>,
    pub cfg: Config,
    opt: AdamW,
    critic_opt: AdamW,
    sampler: PairSampler<'a>,
    pub step: usize,
}

impl<'a, T: Element> Distiller<'a, T> {
    /// `cfg.model` must already hold the student geometry.
    pub fn new(cfg: &Config, ensemble: TeacherEnsemble<T>, seqs: &'a [SequenceDataset]) -> Result<Self> {
        cfg.validate()?;
        let t = &ensemble.teachers[0].0.cfg.backbone;
        let s = &cfg.model.backbone;
        if (t.num_tokens(), t.dim) != (s.num_tokens(), s.dim) {
            return Err(Error::Invalid(format!(
                "student tokens {}x{} differ from teacher tokens {}x{}",
                s.num_tokens(),
                s.dim,
                t.num_tokens(),
                t.dim
            )));
        }
        let (student, store) = TrackerModel::init(&cfg.model, cfg.seed)?;
        let mut critic_store = ParamStore::new();
        let mut rng = SplitMix64::new(cfg.seed ^ 0xC1C1);
        let critic = Critic::build(
            &mut Builder::Fresh {
                store: &mut critic_store,
                rng: &mut rng,
            },
            "md_critic",
            s.dim,
            cfg.model.critic_hidden,
        )?;
        Ok(Self {
            student,
            store,
            critic,
            critic_store,
            ensemble,
            cfg: cfg.clone(),
            opt: AdamW::new(cfg.weight_decay),
            critic_opt: AdamW::new(cfg.weight_decay),
            sampler: PairSampler::new(seqs, cfg.seed ^ 0x5A5A_5A5A, cfg.center_jitter, cfg.scale_jitter)?,
            step: 0,
        })
    }

    /// Objective for one batch on a fresh tape.
    pub fn objective(&self, batch: &Batch<T>, seed: u64) -> Result<(Tape<T>, Var, LossBreakdown, Vec<BnStat>)> {
        let terms = Terms {
            spar: self.cfg.distill_spar,
            vir: self.cfg.distill_vir,
        };
        let teacher = self.ensemble.features(&batch.z, &batch.x)?;
        let (mut tape, o) = task_forward(&self.student, &self.store, &self.cfg, batch, terms, seed)?;
        let (partial, tokens, mut rec, bn) = (o.total, o.tokens, o.record, o.bn_stats);
        let tv = tape.constant(teacher);
        let ts = soften(&mut tape, &tv, self.cfg.weights.tau)?;
        let ss = soften(&mut tape, &tokens, self.cfg.weights.tau)?;
        let md = md_loss(&mut tape, &self.critic_store, &self.critic, &ts, &ss, seed ^ 0xD15, self.cfg.md_mode)?;
        rec.md = scalar(&tape, md);
        let total = crate::head::combine_losses(&mut tape, &[("partial", &partial, 1.0), ("md", &md, self.cfg.weights.eta)])?;
        rec.total = scalar(&tape, total);
        Ok((tape, total, rec, bn))
    }

    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let b = &self.student.cfg.backbone;
        let batch = self.sampler.sample::<T>(self.cfg.batch_size, b.template_size, b.search_size);
        let (mut tape, total, rec, bn) = self.objective(&batch, step_seed(self.cfg.seed, self.step))?;
        tape.backward(total)?;
        let grads = tape.param_grads(&self.store);
        let cgrads = tape.param_grads(&self.critic_store);
        drop(tape);
        let lr = lr_at(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.step(&mut self.store, &grads, lr);
        self.critic_opt.step(&mut self.critic_store, &cgrads, lr);
        for s in &bn {
            s.apply(&mut self.store, BN_MOMENTUM);
        }
        self.step += 1;
        Ok(rec)
    }

    pub fn run(&mut self, mut log: impl FnMut(usize, f64, &LossBreakdown)) -> Result<()> {
        while self.step < self.cfg.steps {
            let lr = lr_at(self.cfg.lr, self.step, self.cfg.steps);
            let rec = self.train_step()?;
            log(self.step, lr, &rec);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        let g = Tensor::from_f64(vec![2], &[0.5, -3.0]).unwrap();
        opt.step(&mut store, &[(id, g)], 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn schedule_drops_at_eighty_percent() {
        assert_eq!(lr_at(1.0, 79, 100), 1.0);
        assert_eq!(lr_at(1.0, 80, 100), 0.1);
        assert_eq!(lr_at(1.0, 0, 0), 1.0);
    }
}
