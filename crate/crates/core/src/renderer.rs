//! Personalized ray transformer and volume compositing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamSet};
use crate::tensor::{Tape, Var};

pub const POS_OCTAVES: usize = 4;
pub const DIR_OCTAVES: usize = 2;

/// Width of `[x, sin(2^k pi x), cos(2^k pi x)]_k` for a 3-vector.
pub fn encoded_width(octaves: usize) -> usize {
    3 + 6 * octaves
}

pub fn embed_width(channels: usize) -> usize {
    encoded_width(POS_OCTAVES) + encoded_width(DIR_OCTAVES) + channels
}

pub fn positional_encoding(v: [f64; 3], octaves: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&v);
    for k in 0..octaves {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for x in v {
            out.push((f * x).sin());
        }
        for x in v {
            out.push((f * x).cos());
        }
    }
}

/// Shared layers: embedding, attention output, colour and density heads.
/// Per-view colour lookups: rgb plus an in-frame flag.
pub const COLOR_TAPS: usize = 4;

pub fn init_renderer<R: Rng>(params: &mut ParamSet, width: usize, channels: usize, views: usize, rng: &mut R) {
    Linear::init(params, "ren.embed", embed_width(channels) + COLOR_TAPS * views, width, true, rng);
    Linear::init(params, "ren.attn_out", width, width, true, rng);
    Linear::init(params, "ren.color", width, 3, true, rng);
    Linear::init(params, "ren.density", width, 1, true, rng);
}

/// `W_x = (1 - a) W_a + a Z` for every point; `adapt` is `[P, 1]`, result
/// `[P, C_in, C_out]`.
pub fn personalize_layer(tape: &mut Tape, w_a: Var, personal: Var, adapt: Var) -> Result<Var> {
    let s = tape.shape(w_a).to_vec();
    let p = tape.shape(adapt)[0];
    let n = s[0] * s[1];
    let keep = tape.rsub_scalar(1.0, adapt);
    let w_a = tape.reshape(w_a, &[1, n])?;
    let personal = tape.reshape(personal, &[1, n])?;
    let kept = tape.matmul(keep, w_a)?;
    let picked = tape.matmul(adapt, personal)?;
    let w = tape.add(kept, picked)?;
    tape.reshape(w, &[p, s[0], s[1]])
}

/// Row `p` of `h` times its own matrix `w[p]`; `h` is `[P, C_in]`.
pub fn apply_personalized(tape: &mut Tape, h: Var, w: Var) -> Result<Var> {
    let (sh, sw) = (tape.shape(h).to_vec(), tape.shape(w).to_vec());
    if sh.len() != 2 || sw.len() != 3 || sh[0] != sw[0] || sh[1] != sw[1] {
        return Err(Error::ShapeMismatch {
            op: "apply_personalized",
            lhs: sh,
            rhs: sw,
        });
    }
    let h3 = tape.reshape(h, &[sh[0], 1, sh[1]])?;
    let y = tape.bmm(h3, w)?;
    tape.reshape(y, &[sh[0], sw[2]])
}

/// Per-layer weights as seen by the transformer.
#[derive(Clone, Debug)]
pub enum LayerWeights {
    /// One matrix per layer shared by all points.
    Shared(Vec<Var>),
    /// Candidate and personalization matrices plus a `[P, L]` factor.
    PerPoint { candidates: Vec<Var>, personal: Vec<Var>, adapt: Var },
}

impl LayerWeights {
    fn project(&self, tape: &mut Tape, h: Var, l: usize) -> Result<Var> {
        match self {
            LayerWeights::Shared(w) => tape.matmul(h, w[l]),
            LayerWeights::PerPoint { candidates, personal, adapt } => {
                let a = tape.slice(*adapt, 1, l, l + 1)?;
                let w = personalize_layer(tape, candidates[l], personal[l], a)?;
                apply_personalized(tape, h, w)
            }
        }
    }
}

pub const QUERY: usize = 0;
pub const KEY: usize = 1;
pub const VALUE: usize = 2;
pub const FEED_FORWARD: usize = 3;

/// One attention block over the samples of each ray. `input` is the
/// `[R * N, embed]` matrix of encoded samples; returns colours `[R, N, 3]`
/// and densities `[R, N]`.
pub fn ray_transformer_forward(
    tape: &mut Tape,
    b: &Bound,
    input: Var,
    weights: &LayerWeights,
    rays: usize,
    samples: usize,
) -> Result<(Var, Var)> {
    if samples < 2 {
        return Err(Error::invalid("ray transformer needs at least 2 samples"));
    }
    let h = Linear::bind(b, "ren.embed")?.forward(tape, input)?;
    let h = tape.relu(h);
    let d = tape.shape(h)[1];
    let q = weights.project(tape, h, QUERY)?;
    let k = weights.project(tape, h, KEY)?;
    let v = weights.project(tape, h, VALUE)?;
    let q = tape.reshape(q, &[rays, samples, d])?;
    let k = tape.reshape(k, &[rays, samples, d])?;
    let v = tape.reshape(v, &[rays, samples, d])?;
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let att = tape.softmax(scores, 2)?;
    let mixed = tape.bmm(att, v)?;
    let mixed = tape.reshape(mixed, &[rays * samples, d])?;
    let o = Linear::bind(b, "ren.attn_out")?.forward(tape, mixed)?;
    let h = tape.add(h, o)?;
    let ff = weights.project(tape, h, FEED_FORWARD)?;
    let ff = tape.relu(ff);
    let h = tape.add(h, ff)?;
    let c = Linear::bind(b, "ren.color")?.forward(tape, h)?;
    let c = tape.sigmoid(c);
    let c = tape.reshape(c, &[rays, samples, 3])?;
    let sigma = Linear::bind(b, "ren.density")?.forward(tape, h)?;
    let sigma = tape.softplus(sigma);
    let sigma = tape.reshape(sigma, &[rays, samples])?;
    Ok((c, sigma))
}

/// Classical quadrature. `color` is `[R, N, 3]`, `sigma` and `delta` are
/// `[R, N]`; returns `[R, 3]`.
pub fn volume_render(tape: &mut Tape, color: Var, sigma: Var, delta: Var, background: [f64; 3]) -> Result<Var> {
    let s = tape.shape(sigma).to_vec();
    let (r, n) = (s[0], s[1]);
    let tau = tape.mul(sigma, delta)?;
    let before = tape.cumsum_exclusive(tau, 1)?;
    let neg = tape.scale(before, -1.0);
    let trans = tape.exp(neg);
    let neg_tau = tape.scale(tau, -1.0);
    let keep = tape.exp(neg_tau);
    let alpha = tape.rsub_scalar(1.0, keep);
    let w = tape.mul(trans, alpha)?;
    let w = tape.reshape(w, &[r, 1, n])?;
    let rgb = tape.bmm(w, color)?;
    let rgb = tape.reshape(rgb, &[r, 3])?;
    let total = tape.sum_axis(tau, 1)?;
    let neg_total = tape.scale(total, -1.0);
    let residual = tape.exp(neg_total);
    let residual = tape.reshape(residual, &[r, 1])?;
    let bg = tape.constant_from(vec![1, 3], background.to_vec())?;
    let bg = tape.matmul(residual, bg)?;
    tape.add(rgb, bg)
}

/// Plain compositing of one ray, also returning the weights and the
/// residual transmittance.
pub fn composite_reference(color: &[[f64; 3]], sigma: &[f64], delta: &[f64], background: [f64; 3]) -> ([f64; 3], Vec<f64>, f64) {
    let mut out = [0.0; 3];
    let mut trans = 1.0;
    let mut weights = Vec::with_capacity(sigma.len());
    for i in 0..sigma.len() {
        let a = 1.0 - (-sigma[i] * delta[i]).exp();
        let w = trans * a;
        for c in 0..3 {
            out[c] += w * color[i][c];
        }
        weights.push(w);
        trans *= 1.0 - a;
    }
    for c in 0..3 {
        out[c] += trans * background[c];
    }
    (out, weights, trans)
}
