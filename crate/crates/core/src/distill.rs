//! Multi-teacher feature distillation.
//!
//! Frozen teachers see the same template/search pair as the student. Their
//! final token features are averaged, both sides are softened with a
//! temperature softmax over the embedding axis, and the student maximizes a
//! JSD mutual-information estimate between the two (or minimizes their mean
//! squared difference in the MSE variant).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::{jsd_mi_lower_bound, shuffle_negatives, Critic};
use crate::model::TrackerModel;
use crate::tensor::{Eager, Element, Exec, ParamStore, Tensor};
use crate::vit::{BackboneConfig, ForceGates, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdMode {
    #[default]
    Jsd,
    Mse,
}

impl FromStr for MdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsd" => Ok(MdMode::Jsd),
            "mse" => Ok(MdMode::Mse),
            other => Err(Error::Invalid(format!("md-mode must be jsd or mse, got `{other}`"))),
        }
    }
}

impl MdMode {
    pub fn name(self) -> &'static str {
        match self {
            MdMode::Jsd => "jsd",
            MdMode::Mse => "mse",
        }
    }
}

/// Elementwise mean of equally shaped features.
pub fn aggregate_features<T: Element>(features: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Invalid("no teacher features to aggregate".into()))?;
    let mut acc = first.clone();
    for (k, f) in features.iter().enumerate().skip(1) {
        if f.shape() != first.shape() {
            return Err(Error::shape("aggregate-features", &[first.shape(), f.shape()]));
        }
        let inv = T::lit(1.0 / (k + 1) as f64);
        for (m, &x) in acc.data_mut().iter_mut().zip(f.data()) {
            *m = *m + (x - *m) * inv;
        }
    }
    Ok(acc)
}

/// Temperature softmax over the last axis.
pub fn soften<T: Element, E: Exec<T>>(ctx: &mut E, f: &E::Val, tau: f64) -> Result<E::Val> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    ctx.softmax(f, -1, tau)
}

/// Distillation loss between softened teacher and student features, both
/// `[B, K, d]`.
pub fn md_loss<T: Element, E: Exec<T>>(
    ctx: &mut E,
    store: &ParamStore<T>,
    critic: &Critic,
    teacher: &E::Val,
    student: &E::Val,
    seed: u64,
    mode: MdMode,
) -> Result<E::Val> {
    let (st, ss) = (ctx.shape_of(teacher), ctx.shape_of(student));
    if st != ss || st.len() != 3 {
        return Err(Error::shape("md-loss", &[&st, &ss]));
    }
    match mode {
        MdMode::Mse => {
            let d = ctx.sub(student, teacher)?;
            let d2 = ctx.mul(&d, &d)?;
            ctx.mean(&d2)
        }
        MdMode::Jsd => {
            let perm = shuffle_negatives(st[0], seed)?;
            let a = ctx.mean_axis(student, 1)?;
            let b = ctx.mean_axis(teacher, 1)?;
            let j = jsd_mi_lower_bound(ctx, store, critic, &a, &b, &perm)?;
            ctx.scale(&j, -1.0)
        }
    }
}

/// Student geometry: half the teacher depth unless overridden, with the
/// fixed prefix rescaled proportionally.
pub fn build_student(teacher: &BackboneConfig, blocks: Option<usize>) -> Result<BackboneConfig> {
    let depth = match blocks {
        Some(n) if n == 0 || n > teacher.depth => {
            return Err(Error::Invalid(format!(
                "student blocks must lie in [1, {}], got {n}",
                teacher.depth
            )))
        }
        Some(n) => n,
        None => teacher.depth / 2,
    };
    if depth < 2 {
        return Err(Error::Invalid(format!(
            "a student of depth {depth} has no room for an adaptive block after the fixed prefix"
        )));
    }
    let cfg = BackboneConfig {
        depth,
        fixed_blocks: teacher.rescaled_fixed(depth),
        ..teacher.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Frozen teachers sharing token geometry.
pub struct TeacherEnsemble<T> {
    pub teachers: Vec<(TrackerModel, ParamStore<T>)>,
}

impl<T: Element> TeacherEnsemble<T> {
    pub fn new(mut teachers: Vec<(TrackerModel, ParamStore<T>)>) -> Result<Self> {
        let first = teachers
            .first()
            .ok_or_else(|| Error::Invalid("at least one teacher is required".into()))?;
        let geom = |m: &TrackerModel| {
            let b = &m.cfg.backbone;
            (b.num_tokens(), b.dim, b.template_size, b.search_size, b.patch)
        };
        let g0 = geom(&first.0);
        if let Some((m, _)) = teachers.iter().find(|(m, _)| geom(m) != g0) {
            return Err(Error::Invalid(format!(
                "teacher token geometry {:?} differs from {g0:?}",
                geom(m)
            )));
        }
        for (_, s) in &mut teachers {
            s.freeze();
        }
        Ok(Self { teachers })
    }

    /// Mean final-token features `[B, K, d]` over all teachers.
    pub fn features(&self, z: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let feats = self
            .teachers
            .iter()
            .map(|(m, s)| {
                let mut e = Eager;
                let zv = e.constant(z.clone());
                let xv = e.constant(x.clone());
                let out = m.backbone.forward(&mut e, s, &zv, &xv, Mode::Infer, &ForceGates::None)?;
                Ok(std::sync::Arc::unwrap_or_clone(out.state.tokens))
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate_features(&feats)
    }
}
