//! Jensen-Shannon mutual-information estimation and the view-invariance
//! objective.

use crate::error::{Error, Result};
use crate::geom::{sampling_grid, CenterBox};
use crate::layout::{Builder, Linear};
use crate::probe;
use crate::rng::SplitMix64;
use crate::tensor::{Element, Exec, ParamStore, Tensor};

pub const CRITIC_HIDDEN: usize = 64;

/// Two-layer scorer `T(a, b)` over concatenated `[a, b]`.
#[derive(Debug, Clone)]
pub struct Critic {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl Critic {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::build(b, &format!("{name}.fc1"), 2 * dim, hidden, (1.0 / (2 * dim) as f64).sqrt())?,
            fc2: Linear::build(b, &format!("{name}.fc2"), hidden, 1, (1.0 / hidden as f64).sqrt())?,
            dim,
        })
    }

    /// Scores `[B, 1]` for paired rows of `a, b: [B, d]`.
    pub fn score<T: Element, E: Exec<T>>(
        &self,
        ctx: &mut E,
        store: &ParamStore<T>,
        a: &E::Val,
        b: &E::Val,
    ) -> Result<E::Val> {
        let (sa, sb) = (ctx.shape_of(a), ctx.shape_of(b));
        if sa.len() != 2 || sa != sb || sa[1] != self.dim {
            return Err(Error::shape("critic", &[&sa, &sb]));
        }
        let ab = ctx.concat(&[a, b], 1)?;
        let h = self.fc1.forward(ctx, store, &ab)?;
        let h = ctx.gelu(&h)?;
        self.fc2.forward(ctx, store, &h)
    }
}

/// `mean(-softplus(-T_joint)) - mean(softplus(T_marginal))`.
pub fn jsd_from_scores<T: Element, E: Exec<T>>(
    ctx: &mut E,
    joint: &E::Val,
    marginal: &E::Val,
) -> Result<E::Val> {
    if ctx.value(joint).numel() == 0 || ctx.value(marginal).numel() == 0 {
        return Err(Error::Invalid("empty batch in mutual-information estimate".into()));
    }
    let nj = ctx.scale(joint, -1.0)?;
    let sp = ctx.softplus(&nj)?;
    let pos = ctx.mean(&sp)?;
    let sm = ctx.softplus(marginal)?;
    let neg = ctx.mean(&sm)?;
    let s = ctx.add(&pos, &neg)?;
    ctx.scale(&s, -1.0)
}

/// JSD lower bound with the critic applied to the matched batch `(a, b)` and
/// the mismatched batch `(a, b[perm])`.
pub fn jsd_mi_lower_bound<T: Element, E: Exec<T>>(
    ctx: &mut E,
    store: &ParamStore<T>,
    critic: &Critic,
    a: &E::Val,
    b: &E::Val,
    perm: &[usize],
) -> Result<E::Val> {
    probe::mi_called();
    let b_neg = permute_rows(ctx, b, perm)?;
    let joint = critic.score(ctx, store, a, b)?;
    let marginal = critic.score(ctx, store, a, &b_neg)?;
    jsd_from_scores(ctx, &joint, &marginal)
}

/// Seeded derangement of `0..n`.
pub fn shuffle_negatives(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "shuffled negatives need a batch of at least 2, got {n}"
        )));
    }
    Ok(SplitMix64::new(seed).cyclic_permutation(n))
}

/// `out[i] = x[perm[i]]` along the first axis of a 2-D value.
pub fn permute_rows<T: Element, E: Exec<T>>(ctx: &mut E, x: &E::Val, perm: &[usize]) -> Result<E::Val> {
    let n = ctx.shape_of(x)[0];
    if perm.len() != n || perm.iter().any(|&p| p >= n) {
        return Err(Error::Invalid(format!("permutation of length {} for {n} rows", perm.len())));
    }
    let mut m = vec![T::zero(); n * n];
    for (i, &p) in perm.iter().enumerate() {
        m[i * n + p] = T::one();
    }
    let m = ctx.constant(Tensor::new(vec![n, n], m)?);
    ctx.matmul(&m, x)
}

/// Resample the search-token field inside `boxes` (normalized search-crop
/// coordinates, one per sample) onto an `out` grid.
///
/// `tokens: [B, Hg*Wg, d]` laid out row-major over `grid`; returns
/// `[B, Ho*Wo, d]`.
pub fn roi_token_interp<T: Element, E: Exec<T>>(
    ctx: &mut E,
    tokens: &E::Val,
    grid: (usize, usize),
    boxes: &[CenterBox],
    out: (usize, usize),
) -> Result<E::Val> {
    let s = ctx.shape_of(tokens);
    if s.len() != 3 || s[1] != grid.0 * grid.1 || s[0] != boxes.len() {
        return Err(Error::Invalid(format!(
            "token field {s:?} does not match grid {grid:?} and {} boxes",
            boxes.len()
        )));
    }
    let (b, d) = (s[0], s[2]);
    let mut g = Vec::with_capacity(b * out.0 * out.1 * 2);
    for bx in boxes {
        bx.check()?;
        if bx.cx < 0.0 || bx.cx > 1.0 || bx.cy < 0.0 || bx.cy > 1.0 {
            return Err(Error::Invalid(format!("box center outside the search crop: {bx:?}")));
        }
        g.extend(sampling_grid(bx, out.0, out.1));
    }
    let gv = ctx.constant(Tensor::from_f64(vec![b, out.0, out.1, 2], &g)?);
    let f = ctx.transpose(tokens, 1, 2)?;
    let f = ctx.reshape(&f, &[b, d, grid.0, grid.1])?;
    let r = ctx.bilinear_resample(&f, &gv)?;
    let r = ctx.reshape(&r, &[b, d, out.0 * out.1])?;
    ctx.transpose(&r, 1, 2)
}

/// View-invariance loss: the negated JSD estimate between mean-pooled
/// template tokens and mean-pooled interpolated target tokens.
pub fn vir_loss<T: Element, E: Exec<T>>(
    ctx: &mut E,
    store: &ParamStore<T>,
    critic: &Critic,
    t_z: &E::Val,
    t_zp: &E::Val,
    seed: u64,
) -> Result<E::Val> {
    let (sa, sb) = (ctx.shape_of(t_z), ctx.shape_of(t_zp));
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(Error::shape("vir-loss", &[&sa, &sb]));
    }
    let perm = shuffle_negatives(sa[0], seed)?;
    let a = ctx.mean_axis(t_z, 1)?;
    let b = ctx.mean_axis(t_zp, 1)?;
    let j = jsd_mi_lower_bound(ctx, store, critic, &a, &b, &perm)?;
    ctx.scale(&j, -1.0)
}
