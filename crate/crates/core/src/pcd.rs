//! Parameter candidate decoders: pooled scene code -> per-layer candidate
//! weights, built from a small core upscaled by two maps, a learned binary
//! mask, and a layer code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

pub const CODE_STD: f64 = 0.02;

/// How the binary selection mask is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Hard step against the learned threshold, surrogate gradient.
    #[default]
    Quantized,
    /// Mask fixed at zero, so candidates are the decoded weights.
    AllZeros,
    /// `sigmoid(raw - threshold)` instead of the step.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcdSpec {
    /// Side of the square core that gets upscaled.
    pub rank: usize,
    pub hidden: [usize; 2],
    /// `(C_in, C_out)` of each target layer.
    pub layers: Vec<(usize, usize)>,
}

impl PcdSpec {
    pub fn uniform(count: usize, width: usize) -> Self {
        PcdSpec {
            rank: 8,
            hidden: [32, 32],
            layers: vec![(width, width); count],
        }
    }

    fn dims(&self, l: usize) -> Result<(usize, usize)> {
        self.layers.get(l).copied().ok_or(Error::IndexOutOfRange {
            what: "target layer",
            index: l,
            len: self.layers.len(),
        })
    }
}

pub fn layer_name(l: usize, part: &str) -> String {
    format!("pcd.{l}.{part}")
}

fn init_decoder<R: Rng>(params: &mut ParamSet, name: &str, input: usize, spec: &PcdSpec, rng: &mut R) {
    let widths = [input, spec.hidden[0], spec.hidden[1], spec.rank * spec.rank];
    for (i, w) in widths.windows(2).enumerate() {
        Linear::init(params, &format!("{name}.{i}"), w[0], w[1], true, rng);
    }
}

/// Adds one decoder bank per target layer; `input` is the pooled width.
pub fn init_pcd<R: Rng>(params: &mut ParamSet, spec: &PcdSpec, input: usize, rng: &mut R) {
    let r = spec.rank;
    for (l, &(ci, co)) in spec.layers.iter().enumerate() {
        init_decoder(params, &layer_name(l, "dw"), input, spec, rng);
        init_decoder(params, &layer_name(l, "dm"), input, spec, rng);
        for part in ["code", "personal", "threshold", "modulation"] {
            params.insert(layer_name(l, part), Tensor::randn(&[ci, co], CODE_STD, rng));
        }
        params.insert(layer_name(l, "w_in"), Tensor::randn(&[ci, r], (1.0 / r as f64).sqrt(), rng));
        params.insert(layer_name(l, "w_out"), Tensor::randn(&[r, co], (1.0 / r as f64).sqrt(), rng));
        params.insert(layer_name(l, "m_in"), Tensor::randn(&[ci, r], (1.0 / r as f64).sqrt(), rng));
        params.insert(layer_name(l, "m_out"), Tensor::randn(&[r, co], (1.0 / r as f64).sqrt(), rng));
    }
}

/// Mean of the feature volume over all cells, shape `[1, C]`.
pub fn pool_scene(tape: &mut Tape, f: Var) -> Result<Var> {
    let c = tape.shape(f)[1];
    let g = tape.mean_axis(f, 0)?;
    tape.reshape(g, &[1, c])
}

fn decode_core(tape: &mut Tape, b: &Bound, name: &str, g: Var, rank: usize) -> Result<Var> {
    let mut h = g;
    for i in 0..3 {
        h = Linear::bind(b, &format!("{name}.{i}"))?.forward(tape, h)?;
        if i < 2 {
            h = tape.relu(h);
        }
    }
    tape.reshape(h, &[rank, rank])
}

fn upscale(tape: &mut Tape, left: Var, core: Var, right: Var) -> Result<Var> {
    let t = tape.matmul(left, core)?;
    tape.matmul(t, right)
}

/// `W_d = (P_in core P_out) * E`, shape `[C_in, C_out]`.
pub fn decode_soft_weights(tape: &mut Tape, b: &Bound, spec: &PcdSpec, g: Var, l: usize) -> Result<Var> {
    spec.dims(l)?;
    let core = decode_core(tape, b, &layer_name(l, "dw"), g, spec.rank)?;
    let w = upscale(tape, b.var(&layer_name(l, "w_in"))?, core, b.var(&layer_name(l, "w_out"))?)?;
    tape.mul(w, b.var(&layer_name(l, "modulation"))?)
}

/// Upscaled mask logits before thresholding.
pub fn decode_mask_raw(tape: &mut Tape, b: &Bound, spec: &PcdSpec, g: Var, l: usize) -> Result<Var> {
    spec.dims(l)?;
    let core = decode_core(tape, b, &layer_name(l, "dm"), g, spec.rank)?;
    upscale(tape, b.var(&layer_name(l, "m_in"))?, core, b.var(&layer_name(l, "m_out"))?)
}

/// Selection mask for layer `l`; binary unless `mode` is [`MaskMode::Soft`].
pub fn decode_mask(tape: &mut Tape, b: &Bound, spec: &PcdSpec, g: Var, l: usize, mode: MaskMode) -> Result<Var> {
    let (ci, co) = spec.dims(l)?;
    match mode {
        MaskMode::AllZeros => tape.constant_from(vec![ci, co], vec![0.0; ci * co]),
        MaskMode::Quantized => {
            let raw = decode_mask_raw(tape, b, spec, g, l)?;
            tape.step_quantize(raw, b.var(&layer_name(l, "threshold"))?)
        }
        MaskMode::Soft => {
            let raw = decode_mask_raw(tape, b, spec, g, l)?;
            let u = tape.sub(raw, b.var(&layer_name(l, "threshold"))?)?;
            Ok(tape.sigmoid(u))
        }
    }
}

/// `W_a = (1 - M) * W_d + M * Z`.
pub fn candidate_params(tape: &mut Tape, w_d: Var, mask: Var, code: Var) -> Result<Var> {
    let keep = tape.rsub_scalar(1.0, mask);
    let kept = tape.mul(keep, w_d)?;
    let picked = tape.mul(mask, code)?;
    tape.add(kept, picked)
}

/// Candidate weights and personalization codes for every target layer.
#[derive(Clone, Debug)]
pub struct LayerCandidates {
    pub candidates: Vec<Var>,
    pub personal: Vec<Var>,
}

pub fn decode_layers(tape: &mut Tape, b: &Bound, spec: &PcdSpec, f: Var, mode: MaskMode) -> Result<LayerCandidates> {
    decode_layers_inner(tape, b, spec, f, |tape, g, l| decode_mask(tape, b, spec, g, l, mode))
}

/// [`decode_layers`] with the selection masks supplied as constants, which
/// cuts every gradient path through the quantizer.
pub fn decode_layers_with_masks(tape: &mut Tape, b: &Bound, spec: &PcdSpec, f: Var, masks: &[Tensor]) -> Result<LayerCandidates> {
    if masks.len() != spec.layers.len() {
        return Err(Error::invalid(format!("{} masks for {} layers", masks.len(), spec.layers.len())));
    }
    decode_layers_inner(tape, b, spec, f, |tape, _, l| Ok(tape.constant(&masks[l])))
}

fn decode_layers_inner(
    tape: &mut Tape,
    b: &Bound,
    spec: &PcdSpec,
    f: Var,
    mut mask: impl FnMut(&mut Tape, Var, usize) -> Result<Var>,
) -> Result<LayerCandidates> {
    let g = pool_scene(tape, f)?;
    let mut candidates = Vec::with_capacity(spec.layers.len());
    let mut personal = Vec::with_capacity(spec.layers.len());
    for l in 0..spec.layers.len() {
        let w_d = decode_soft_weights(tape, b, spec, g, l)?;
        let m = mask(tape, g, l)?;
        candidates.push(candidate_params(tape, w_d, m, b.var(&layer_name(l, "code"))?)?);
        personal.push(b.var(&layer_name(l, "personal"))?);
    }
    Ok(LayerCandidates { candidates, personal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (PcdSpec, ParamSet) {
        let spec = PcdSpec {
            rank: 3,
            hidden: [5, 4],
            layers: vec![(4, 6), (2, 2)],
        };
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_pcd(&mut p, &spec, 7, &mut rng);
        for (_, t) in p.iter_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        (spec, p)
    }

    fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for t in 0..k {
                    out[i * m + j] += a[i * k + t] * b[t * m + j];
                }
            }
        }
        out
    }

    /// Three dense layers with ReLU between, evaluated by hand.
    fn core_oracle(p: &ParamSet, name: &str, g: &[f64]) -> Vec<f64> {
        let mut h = g.to_vec();
        for i in 0..3 {
            let w = p.get(&format!("{name}.{i}.w")).unwrap();
            let b = p.get(&format!("{name}.{i}.b")).unwrap();
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            let mut out = matmul(&h, w.data(), 1, n_in, n_out);
            for (o, bb) in out.iter_mut().zip(b.data()) {
                *o += bb;
                if i < 2 {
                    *o = o.max(0.0);
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn pooling_is_the_cellwise_mean() {
        let mut tape = Tape::new();
        let c = tape.constant_from(vec![3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap();
        let g = pool_scene(&mut tape, c).unwrap();
        assert_eq!(tape.shape(g), &[1, 2]);
        assert_eq!(tape.value(g), &[1.5, -2.0]);
        let s = tape.constant_from(vec![2, 2], vec![0.7, -3.0, -0.7, 3.0]).unwrap();
        let g = pool_scene(&mut tape, s).unwrap();
        assert!(tape.value(g).iter().all(|v| v.abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vol = Tensor::randn(&[32, 16], 1.0, &mut rng);
        let v = tape.constant(&vol);
        let g = pool_scene(&mut tape, v).unwrap();
        for ch in 0..16 {
            let mut acc = 0.0;
            for cell in 0..32 {
                acc += vol.data()[cell * 16 + ch];
            }
            assert!((tape.value(g)[ch] - acc / 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_with_zero_biases_decodes_zero() {
        let (spec, mut p) = setup(1);
        for (_, t) in p.iter_mut() {
            if t.rank() == 1 {
                t.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let g = tape.constant_from(vec![1, 7], vec![0.0; 7]).unwrap();
        let w = decode_soft_weights(&mut tape, &b, &spec, g, 0).unwrap();
        assert!(tape.value(w).iter().all(|&v| v == 0.0));
        assert!(decode_soft_weights(&mut tape, &b, &spec, g, 2).is_err());
        assert!(decode_mask(&mut tape, &b, &spec, g, 5, MaskMode::Quantized).is_err());
    }

    #[test]
    fn soft_weights_match_matrix_oracle() {
        let (spec, mut p) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gv: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for ones in [false, true] {
            if ones {
                p.insert(layer_name(0, "modulation"), Tensor::ones(&[4, 6]));
            }
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let g = tape.constant_from(vec![1, 7], gv.clone()).unwrap();
            let w = decode_soft_weights(&mut tape, &b, &spec, g, 0).unwrap();
            let core = core_oracle(&p, &layer_name(0, "dw"), &gv);
            let left = matmul(p.get(&layer_name(0, "w_in")).unwrap().data(), &core, 4, 3, 3);
            let full = matmul(&left, p.get(&layer_name(0, "w_out")).unwrap().data(), 4, 3, 6);
            let e = p.get(&layer_name(0, "modulation")).unwrap().data();
            for i in 0..24 {
                assert!((tape.value(w)[i] - full[i] * e[i]).abs() < 1e-12);
                if ones {
                    assert_eq!(tape.value(w)[i], full[i]);
                }
            }
        }
    }

    #[test]
    fn mask_follows_the_comparison() {
        let (spec, mut p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gv: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let g = tape.constant_from(vec![1, 7], gv.clone()).unwrap();
            let r = decode_mask_raw(&mut tape, &b, &spec, g, 0).unwrap();
            tape.value(r).to_vec()
        };
        let cases: [(&str, Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize, f64) -> f64>); 3] = [
            ("below", Box::new(|i| raw[i] - 1e3), Box::new(|_, _| 1.0)),
            ("tie", Box::new(|i| raw[i]), Box::new(|_, _| 1.0)),
            ("random", Box::new(|i| if i % 3 == 0 { raw[i] + 0.1 } else { raw[i] - 0.1 }), Box::new(|i, _| if i % 3 == 0 { 0.0 } else { 1.0 })),
        ];
        for (label, theta, want) in cases.iter() {
            let t: Vec<f64> = (0..24).map(theta).collect();
            p.insert(layer_name(0, "threshold"), Tensor::new(vec![4, 6], t.clone()).unwrap());
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let g = tape.constant_from(vec![1, 7], gv.clone()).unwrap();
            let m = decode_mask(&mut tape, &b, &spec, g, 0, MaskMode::Quantized).unwrap();
            for i in 0..24 {
                let cmp = if raw[i] >= t[i] { 1.0 } else { 0.0 };
                assert_eq!(tape.value(m)[i], cmp, "{label} {i}");
                assert_eq!(tape.value(m)[i], want(i, raw[i]), "{label} {i}");
            }
            let z = decode_mask(&mut tape, &b, &spec, g, 0, MaskMode::AllZeros).unwrap();
            assert!(tape.value(z).iter().all(|&v| v == 0.0));
            let s = decode_mask(&mut tape, &b, &spec, g, 0, MaskMode::Soft).unwrap();
            for i in 0..24 {
                let want = 1.0 / (1.0 + (-(raw[i] - t[i])).exp());
                assert!((tape.value(s)[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn candidates_select_elementwise() {
        let mut tape = Tape::new();
        let w_d = tape.constant_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = tape.constant_from(vec![2, 2], vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        let zeros = tape.constant_from(vec![2, 2], vec![0.0; 4]).unwrap();
        let ones = tape.constant_from(vec![2, 2], vec![1.0; 4]).unwrap();
        let mixed = tape.constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = candidate_params(&mut tape, w_d, zeros, z).unwrap();
        assert_eq!(tape.value(a), tape.value(w_d));
        let a = candidate_params(&mut tape, w_d, ones, z).unwrap();
        assert_eq!(tape.value(a), tape.value(z));
        let a = candidate_params(&mut tape, w_d, mixed, z).unwrap();
        assert_eq!(tape.value(a), &[-1.0, 2.0, 3.0, -4.0]);
        // Exact selection also for values that do not cancel cleanly.
        let w_d = tape.constant_from(vec![2, 2], vec![0.1, 1e-9, -7.3, 0.7]).unwrap();
        let z = tape.constant_from(vec![2, 2], vec![0.3, 5e8, 0.2, -0.45]).unwrap();
        let a = candidate_params(&mut tape, w_d, ones, z).unwrap();
        assert_eq!(tape.value(a), tape.value(z));
        let a = candidate_params(&mut tape, w_d, zeros, z).unwrap();
        assert_eq!(tape.value(a), tape.value(w_d));
    }

    #[test]
    fn every_bank_tensor_gets_gradient() {
        let spec = PcdSpec::uniform(4, 16);
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        init_pcd(&mut p, &spec, 16, &mut rng);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let f = tape.constant(&Tensor::randn(&[10, 16], 1.0, &mut rng));
        let out = decode_layers(&mut tape, &b, &spec, f, MaskMode::Quantized).unwrap();
        let mut terms = Vec::new();
        for (i, (&w, &z)) in out.candidates.iter().zip(&out.personal).enumerate() {
            let target = tape.constant(&Tensor::randn(tape.shape(w), 1.0, &mut rng));
            let d = tape.sub(w, target).unwrap();
            let sq = tape.square(d);
            terms.push(tape.sum(sq));
            let s = tape.scale(z, i as f64 + 1.0);
            terms.push(tape.sum(s));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t).unwrap();
        }
        let grads = tape.backward(loss).unwrap();
        for (name, g) in b.collect_grads(&tape, &grads) {
            assert!(g.l2_norm() > 0.0, "{name} has no gradient");
        }
    }
}
