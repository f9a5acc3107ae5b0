//! Whole-network forward and backward passes, generic over the scalar type.

use super::layers::{
    axpy, encoder_backward, encoder_forward, extractor_backward, extractor_forward, linear,
    linear_backward, split2, EncCache, ExtractorCache,
};
use super::plan::{ExtractorPlan, Plan, HISTORY, N_ACTIONS};
use super::Scalar;
use crate::env::Observation;
use crate::spatial::Raster;

fn raster_input<T: Scalar>(r: &Raster) -> Vec<T> {
    r.data().iter().map(|&v| T::of(v as f64)).collect()
}

pub(crate) fn extract<T: Scalar>(
    plan: &Plan,
    e: &ExtractorPlan,
    p: &[T],
    r: &Raster,
) -> (Vec<T>, ExtractorCache<T>) {
    extractor_forward(e, p, raster_input(r), plan.d)
}

pub(crate) fn coord_token<T: Scalar>(plan: &Plan, p: &[T], coords: &[f32; 8]) -> (Vec<T>, [T; 8]) {
    let c: [T; 8] = coords.map(|v| T::of(v as f64));
    let mut out = vec![T::zero(); plan.d];
    linear(&c, 1, &p[plan.coord_w.range()], &p[plan.coord_b.range()], &mut out);
    (out, c)
}

pub(crate) struct ObsCache<T> {
    bg: ExtractorCache<T>,
    fg: ExtractorCache<T>,
    coords: [T; 8],
    enc: Vec<EncCache<T>>,
}

/// One observation -> fused `d`-vector read out at the coord token.
pub(crate) fn fuse_forward<T: Scalar>(plan: &Plan, p: &[T], o: &Observation) -> (Vec<T>, ObsCache<T>) {
    let d = plan.d;
    let (bg_tok, bg) = extract(plan, &plan.bg, p, &o.background);
    let (fg_tok, fg) = extract(plan, &plan.fg, p, &o.foreground);
    let (c_tok, coords) = coord_token(plan, p, &o.box_coords);
    let mut x = Vec::with_capacity(plan.n_tokens * d);
    x.extend_from_slice(&bg_tok);
    x.extend_from_slice(&fg_tok);
    x.extend_from_slice(&c_tok);
    axpy(T::one(), &p[plan.pos.range()], &mut x);
    let mut enc = Vec::with_capacity(plan.ffm.len());
    for (i, l) in plan.ffm.iter().enumerate() {
        // only the coord-token row of the last layer is needed
        let r0 = if i + 1 == plan.ffm.len() { plan.n_tokens - 1 } else { 0 };
        let (out, cache) = encoder_forward(l, p, d, plan.heads, plan.d_ff, x, r0);
        enc.push(cache);
        x = out;
    }
    (x, ObsCache { bg, fg, coords, enc })
}

pub(crate) fn fuse_backward<T: Scalar>(
    plan: &Plan,
    p: &[T],
    c: &ObsCache<T>,
    dfused: &[T],
    grad: &mut [T],
) {
    let d = plan.d;
    let mut dx = dfused.to_vec();
    for (l, cache) in plan.ffm.iter().zip(&c.enc).rev() {
        dx = encoder_backward(l, p, d, plan.heads, plan.d_ff, cache, &dx, grad);
    }
    axpy(T::one(), &dx, &mut grad[plan.pos.range()]);
    let nb = plan.bg.tokens * d;
    let nf = plan.fg.tokens * d;
    {
        let (dw, db) = split2(grad, plan.coord_w.range(), plan.coord_b.range());
        linear_backward(&c.coords, 1, &p[plan.coord_w.range()], &dx[nb + nf..], dw, db, None);
    }
    extractor_backward(&plan.bg, p, &c.bg, &dx[..nb], grad);
    extractor_backward(&plan.fg, p, &c.fg, &dx[nb..nb + nf], grad);
}

pub(crate) struct StateCache<T> {
    obs: Vec<ObsCache<T>>,
    slot_of: [usize; HISTORY],
    enc: Vec<EncCache<T>>,
    pooled: Vec<T>,
}

/// Four observations -> 16 action values. Repeated observations (same
/// reference) are fused once.
pub(crate) fn state_forward<T: Scalar>(
    plan: &Plan,
    p: &[T],
    hist: [&Observation; HISTORY],
) -> ([T; N_ACTIONS], StateCache<T>) {
    let d = plan.d;
    let mut uniq: Vec<&Observation> = Vec::with_capacity(HISTORY);
    let mut slot_of = [0usize; HISTORY];
    for (s, o) in hist.iter().enumerate() {
        slot_of[s] = match uniq.iter().position(|u| std::ptr::eq(*u, *o)) {
            Some(i) => i,
            None => {
                uniq.push(o);
                uniq.len() - 1
            }
        };
    }
    let mut fused = Vec::with_capacity(uniq.len());
    let mut obs = Vec::with_capacity(uniq.len());
    for o in uniq {
        let (f, c) = fuse_forward(plan, p, o);
        fused.push(f);
        obs.push(c);
    }
    let mut z = Vec::with_capacity(HISTORY * d);
    for &u in &slot_of {
        z.extend_from_slice(&fused[u]);
    }
    axpy(T::one(), &p[plan.step.range()], &mut z);
    let mut enc = Vec::with_capacity(plan.agent.len());
    for l in &plan.agent {
        let (out, cache) = encoder_forward(l, p, d, plan.heads, plan.d_ff, z, 0);
        enc.push(cache);
        z = out;
    }
    let inv = T::of(1.0 / HISTORY as f64);
    let mut pooled = vec![T::zero(); d];
    for row in z.chunks(d) {
        axpy(inv, row, &mut pooled);
    }
    let mut q = [T::zero(); N_ACTIONS];
    linear(&pooled, 1, &p[plan.head_w.range()], &p[plan.head_b.range()], &mut q);
    (
        q,
        StateCache {
            obs,
            slot_of,
            enc,
            pooled,
        },
    )
}

pub(crate) fn state_backward<T: Scalar>(
    plan: &Plan,
    p: &[T],
    c: &StateCache<T>,
    dq: &[T; N_ACTIONS],
    grad: &mut [T],
) {
    let d = plan.d;
    let mut dpooled = vec![T::zero(); d];
    {
        let (dw, db) = split2(grad, plan.head_w.range(), plan.head_b.range());
        linear_backward(&c.pooled, 1, &p[plan.head_w.range()], dq, dw, db, Some(&mut dpooled));
    }
    let inv = T::of(1.0 / HISTORY as f64);
    let mut dz = vec![T::zero(); HISTORY * d];
    for row in dz.chunks_mut(d) {
        axpy(inv, &dpooled, row);
    }
    for (l, cache) in plan.agent.iter().zip(&c.enc).rev() {
        dz = encoder_backward(l, p, d, plan.heads, plan.d_ff, cache, &dz, grad);
    }
    axpy(T::one(), &dz, &mut grad[plan.step.range()]);
    let mut dfused = vec![vec![T::zero(); d]; c.obs.len()];
    for (s, &u) in c.slot_of.iter().enumerate() {
        axpy(T::one(), &dz[s * d..(s + 1) * d], &mut dfused[u]);
    }
    for (oc, df) in c.obs.iter().zip(&dfused) {
        fuse_backward(plan, p, oc, df, grad);
    }
}

/// Mean squared TD error over a batch and its gradient.
pub(crate) fn batch_loss_grad<T: Scalar>(
    plan: &Plan,
    p: &[T],
    states: &[[&Observation; HISTORY]],
    actions: &[usize],
    targets: &[f64],
) -> (f64, Vec<T>) {
    use rayon::prelude::*;
    let b = states.len();
    let scale = 2.0 / b as f64;
    // per-sample grads in parallel, then summed in index order so the result
    // does not depend on the thread count
    let per: Vec<(f64, Vec<T>)> = (0..b)
        .into_par_iter()
        .map(|j| {
            let (q, cache) = state_forward(plan, p, states[j]);
            let qa = q[actions[j]].as_f64();
            let resid = qa - targets[j];
            let mut dq = [T::zero(); N_ACTIONS];
            dq[actions[j]] = T::of(scale * resid);
            let mut g = vec![T::zero(); plan.total];
            state_backward(plan, p, &cache, &dq, &mut g);
            (resid * resid, g)
        })
        .collect();
    let mut grad = vec![T::zero(); plan.total];
    let mut loss = 0.0;
    for (l, g) in per {
        loss += l;
        axpy(T::one(), &g, &mut grad);
    }
    (loss / b as f64, grad)
}
