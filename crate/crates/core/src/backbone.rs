//! WaveNet-style x0 predictor with additive conditioning.
//!
//! ```text
//! h   = in_proj(x_t) + c_sem + proj_pro(c_pro) + proj_spk(c_spk) + mlp(enc(t))
//! for each block:
//!     z      = conv_k(h + c_sem)                  // 2C channels
//!     g      = tanh(z[..C]) * sigmoid(z[C..])
//!     r, s   = conv_1(g)                          // residual and skip halves
//!     h      = (h + r) / sqrt(2);  skip += s
//! x0_hat = out_proj(skip / sqrt(n_blocks))
//! ```
//!
//! The content condition enters without any learned projection. The prosody and
//! speaker projections carry no bias, so a null condition (a zero tensor) adds
//! exactly zero.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_1_SQRT_2;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub kernel: usize,
    pub channels: usize,
    pub cond_pro_dim: usize,
    pub cond_spk_dim: usize,
    pub embed_dim: usize,
    pub t_embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Desk-scale configuration that trains on one CPU core.
    pub fn toy() -> Self {
        BackboneConfig { n_blocks: 6, kernel: 5, channels: 32, cond_pro_dim: 8, cond_spk_dim: 8, embed_dim: 32, t_embed_dim: 32 }
    }

    /// Full-scale reference: 40 blocks, kernel 5, 1024 channels, 256-d prosody and speaker features.
    pub fn full_scale() -> Self {
        BackboneConfig {
            n_blocks: 40,
            kernel: 5,
            channels: 1024,
            cond_pro_dim: 256,
            cond_spk_dim: 256,
            embed_dim: 1024,
            t_embed_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim != self.channels {
            return bad(format!("embed_dim {} must equal channels {}", self.embed_dim, self.channels));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel));
        }
        if self.t_embed_dim < 2 || !self.t_embed_dim.is_multiple_of(2) {
            return bad(format!("t_embed_dim must be even and >= 2, got {}", self.t_embed_dim));
        }
        if self.n_blocks == 0 || self.channels == 0 || self.cond_pro_dim == 0 || self.cond_spk_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, e, k) = (self.channels, self.embed_dim, self.kernel);
        let mut out = vec![
            ("in_proj.weight".into(), vec![c, e, 1]),
            ("in_proj.bias".into(), vec![c]),
            ("proj_pro.weight".into(), vec![c, self.cond_pro_dim, k]),
            ("proj_spk.weight".into(), vec![c, self.cond_spk_dim, k]),
            ("t_mlp.0.weight".into(), vec![c, self.t_embed_dim, 1]),
            ("t_mlp.0.bias".into(), vec![c]),
            ("t_mlp.1.weight".into(), vec![c, c, 1]),
            ("t_mlp.1.bias".into(), vec![c]),
        ];
        for b in 0..self.n_blocks {
            out.push((format!("blocks.{b}.conv.weight"), vec![2 * c, c, k]));
            out.push((format!("blocks.{b}.conv.bias"), vec![2 * c]));
            out.push((format!("blocks.{b}.mix.weight"), vec![2 * c, c, 1]));
            out.push((format!("blocks.{b}.mix.bias"), vec![2 * c]));
        }
        out.push(("out_proj.weight".into(), vec![e, c, 1]));
        out.push(("out_proj.bias".into(), vec![e]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

const IN_W: usize = 0;
const IN_B: usize = 1;
const PRO_W: usize = 2;
const SPK_W: usize = 3;
const T1_W: usize = 4;
const T1_B: usize = 5;
const T2_W: usize = 6;
const T2_B: usize = 7;
const BLOCK0: usize = 8;

/// Content, prosody and speaker conditions. `None` is the null condition.
///
/// The content condition is not optional: content is always supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub c_sem: Tensor,
    pub c_pro: Option<Tensor>,
    pub c_spk: Option<Tensor>,
}

impl ConditionBundle {
    pub fn new(c_sem: Tensor, c_pro: Option<Tensor>, c_spk: Option<Tensor>) -> Self {
        ConditionBundle { c_sem, c_pro, c_spk }
    }

    pub fn frames(&self) -> usize {
        self.c_sem.frames()
    }
}

/// Repeats an utterance-level speaker vector across `frames`.
pub fn repeat_frames(v: &[f64], frames: usize) -> Tensor {
    Tensor::from_fn(&[v.len(), frames], |j| v[j / frames])
}

/// Anything that maps `(x_t, t, conditions)` to a clean-embedding estimate.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor, t: usize, conds: &ConditionBundle) -> Result<Tensor>;
}

/// Sinusoidal encoding of `t` as a `[dim, 1]` column: sines then cosines.
pub fn timestep_encoding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let ln_base = libm::log(10_000.0);
    Tensor::from_fn(&[dim, 1], |j| {
        let i = j % half;
        let freq = libm::exp(-ln_base * i as f64 / half as f64);
        let arg = t as f64 * freq;
        if j < half {
            libm::sin(arg)
        } else {
            libm::cos(arg)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: BackboneConfig,
    params: Vec<Tensor>,
}

impl DenoiserModel {
    /// Fan-in scaled uniform init; biases and the output projection start at zero.
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        let last = layout.len() - 2;
        let params = layout
            .iter()
            .enumerate()
            .map(|(i, (_, shape))| {
                if shape.len() == 1 || i >= last {
                    return Tensor::zeros(shape);
                }
                let bound = 1.0 / libm::sqrt((shape[1] * shape[2]) as f64);
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            })
            .collect();
        Ok(DenoiserModel { config, params })
    }

    pub fn from_params(config: BackboneConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!("expected {} parameter tensors, got {}", layout.len(), params.len())));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Config(format!("parameter {name}: expected shape {shape:?}, got {:?}", p.shape())));
            }
        }
        Ok(DenoiserModel { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Records every parameter on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p, requires_grad)).collect()
    }

    fn check_conds(&self, x_t: &Tensor, conds: &ConditionBundle) -> Result<()> {
        let c = &self.config;
        let len = x_t.frames();
        let expect = |t: &Tensor, rows: usize, what: &'static str| {
            if t.shape() != [rows, len] {
                Err(Error::ShapeMismatch { op: what, lhs: vec![rows, len], rhs: t.shape().to_vec() })
            } else {
                Ok(())
            }
        };
        expect(x_t, c.embed_dim, "x_t")?;
        expect(&conds.c_sem, c.embed_dim, "c_sem")?;
        if let Some(p) = &conds.c_pro {
            expect(p, c.cond_pro_dim, "c_pro")?;
        }
        if let Some(s) = &conds.c_spk {
            expect(s, c.cond_spk_dim, "c_spk")?;
        }
        Ok(())
    }

    /// Records a forward pass for already-bound parameters `p`.
    ///
    /// Null conditions are recorded as zero tensors and pass through the same
    /// projection path as explicit zeros.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, p: &[Var], x_t: &Tensor, t: usize, conds: &ConditionBundle) -> Result<Var> {
        self.check_conds(x_t, conds)?;
        let cfg = &self.config;
        let len = x_t.frames();
        let x = tape.constant(x_t.clone());
        let c_sem = tape.constant(conds.c_sem.clone());
        let c_pro = tape.constant(conds.c_pro.clone().unwrap_or_else(|| Tensor::zeros(&[cfg.cond_pro_dim, len])));
        let c_spk = tape.constant(conds.c_spk.clone().unwrap_or_else(|| Tensor::zeros(&[cfg.cond_spk_dim, len])));

        let mut h = tape.conv1d(x, p[IN_W], Some(p[IN_B]))?;
        h = tape.add(h, c_sem)?;
        let pro = tape.conv1d(c_pro, p[PRO_W], None)?;
        h = tape.add(h, pro)?;
        let spk = tape.conv1d(c_spk, p[SPK_W], None)?;
        h = tape.add(h, spk)?;

        let enc = tape.constant(timestep_encoding(t, cfg.t_embed_dim));
        let e = tape.conv1d(enc, p[T1_W], Some(p[T1_B]))?;
        let e = tape.tanh(e);
        let e = tape.conv1d(e, p[T2_W], Some(p[T2_B]))?;
        h = tape.add_channel(h, e)?;

        let c = cfg.channels;
        let mut skip: Option<Var> = None;
        for b in 0..cfg.n_blocks {
            let base = BLOCK0 + 4 * b;
            let y = tape.add(h, c_sem)?;
            let z = tape.conv1d(y, p[base], Some(p[base + 1]))?;
            let filt = tape.narrow(z, 0, c)?;
            let gate = tape.narrow(z, c, c)?;
            let g = tape.gated(filt, gate)?;
            let o = tape.conv1d(g, p[base + 2], Some(p[base + 3]))?;
            let res = tape.narrow(o, 0, c)?;
            let s = tape.narrow(o, c, c)?;
            let sum = tape.add(h, res)?;
            h = tape.scale(sum, FRAC_1_SQRT_2);
            skip = Some(match skip {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let skip = tape.scale(skip.expect("at least one block"), 1.0 / libm::sqrt(cfg.n_blocks as f64));
        let n = p.len();
        tape.conv1d(skip, p[n - 2], Some(p[n - 1]))
    }
}

impl X0Predictor for DenoiserModel {
    fn predict_x0(&self, x_t: &Tensor, t: usize, conds: &ConditionBundle) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.record(&mut tape, &p, x_t, t, conds)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{labeled_rng, randn, rng};

    fn tiny() -> BackboneConfig {
        BackboneConfig { n_blocks: 2, kernel: 3, channels: 6, cond_pro_dim: 3, cond_spk_dim: 2, embed_dim: 6, t_embed_dim: 4 }
    }

    /// Model with a random (non-zero) output projection.
    fn random_model(cfg: BackboneConfig, seed: u64) -> DenoiserModel {
        let mut m = DenoiserModel::new(cfg, &mut rng(seed)).unwrap();
        let n = m.params.len();
        let mut r = labeled_rng(seed, "out", 0);
        m.params[n - 2] = randn(m.params[n - 2].shape(), &mut r).map(|v| 0.3 * v);
        for i in 0..n {
            if m.params[i].shape().len() == 1 {
                m.params[i] = randn(m.params[i].shape(), &mut r).map(|v| 0.1 * v);
            }
        }
        m
    }

    fn bundle(cfg: &BackboneConfig, len: usize, seed: u64) -> ConditionBundle {
        let mut r = labeled_rng(seed, "conds", 0);
        ConditionBundle::new(
            randn(&[cfg.embed_dim, len], &mut r),
            Some(randn(&[cfg.cond_pro_dim, len], &mut r)),
            Some(repeat_frames(&[0.4, -0.9], len)),
        )
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::toy().validate().is_ok());
        assert!(BackboneConfig::full_scale().validate().is_ok());
        assert_eq!(BackboneConfig::full_scale().n_blocks, 40);
        let mut c = BackboneConfig::toy();
        c.embed_dim = 16;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::toy();
        c.kernel = 4;
        assert_eq!(c.validate(), Err(Error::EvenKernel(4)));
    }

    #[test]
    fn encoding_at_zero_and_against_formula() {
        let e = timestep_encoding(0, 8);
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
        let t = 137usize;
        let e = timestep_encoding(t, 6);
        for i in 0..3 {
            let f = (10_000f64).powf(-(i as f64) / 3.0);
            assert!((e.data()[i] - (t as f64 * f).sin()).abs() < 1e-12);
            assert!((e.data()[i + 3] - (t as f64 * f).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn encodings_distinct_over_range() {
        let encs: Vec<Tensor> = (1..=1000).map(|t| timestep_encoding(t, 32)).collect();
        for i in 0..encs.len() {
            for j in i + 1..encs.len() {
                assert!(encs[i].max_abs_diff(&encs[j]) > 1e-9, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn untrained_model_predicts_zero() {
        let cfg = tiny();
        let m = DenoiserModel::new(cfg, &mut rng(1)).unwrap();
        let b = bundle(&cfg, 9, 2);
        let x = randn(&[cfg.embed_dim, 9], &mut rng(3));
        let out = m.predict_x0(&x, 5, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn null_conditions_equal_explicit_zeros() {
        let cfg = tiny();
        let m = random_model(cfg, 4);
        let b = bundle(&cfg, 11, 5);
        let x = randn(&[cfg.embed_dim, 11], &mut rng(6));
        for t in [1, 17, 199] {
            let null = ConditionBundle::new(b.c_sem.clone(), None, None);
            let zeros = ConditionBundle::new(
                b.c_sem.clone(),
                Some(Tensor::zeros(&[cfg.cond_pro_dim, 11])),
                Some(Tensor::zeros(&[cfg.cond_spk_dim, 11])),
            );
            assert!(m.predict_x0(&x, t, &null).unwrap().bitwise_eq(&m.predict_x0(&x, t, &zeros).unwrap()));
        }
    }

    #[test]
    fn output_shape_follows_input() {
        let cfg = tiny();
        let m = random_model(cfg, 7);
        for len in [1, 7, 64] {
            let b = bundle(&cfg, len, 8);
            let x = randn(&[cfg.embed_dim, len], &mut rng(9));
            assert_eq!(m.predict_x0(&x, 3, &b).unwrap().shape(), &[cfg.embed_dim, len]);
        }
    }

    #[test]
    fn rejects_length_mismatch() {
        let cfg = tiny();
        let m = random_model(cfg, 7);
        let mut b = bundle(&cfg, 8, 8);
        b.c_pro = Some(Tensor::zeros(&[cfg.cond_pro_dim, 7]));
        let x = randn(&[cfg.embed_dim, 8], &mut rng(9));
        assert!(matches!(m.predict_x0(&x, 3, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn prosody_condition_changes_output() {
        let cfg = tiny();
        let m = random_model(cfg, 10);
        let b = bundle(&cfg, 10, 11);
        let x = randn(&[cfg.embed_dim, 10], &mut rng(12));
        let mut b2 = b.clone();
        b2.c_pro = b2.c_pro.map(|p| p.map(|v| v + 0.5));
        let d = m.predict_x0(&x, 3, &b).unwrap().max_abs_diff(&m.predict_x0(&x, 3, &b2).unwrap());
        assert!(d > 0.0);
    }

    /// With one block the receptive field is bounded, so zero-padding the
    /// sequence to twice its length only changes frames near the old edge.
    #[test]
    fn zero_padded_extension_changes_only_edge_frames() {
        let mut cfg = tiny();
        cfg.n_blocks = 1;
        let m = random_model(cfg, 13);
        let len = 12;
        let b = bundle(&cfg, len, 14);
        let x = randn(&[cfg.embed_dim, len], &mut rng(15));
        let pad = |t: &Tensor| Tensor::from_fn(&[t.channels(), 2 * len], |j| {
            let (c, l) = (j / (2 * len), j % (2 * len));
            if l < len { t.get2(c, l) } else { 0.0 }
        });
        let long = ConditionBundle::new(pad(&b.c_sem), b.c_pro.as_ref().map(pad), b.c_spk.as_ref().map(pad));
        let short_out = m.predict_x0(&x, 4, &b).unwrap();
        let long_out = m.predict_x0(&pad(&x), 4, &long).unwrap();
        // proj (k) then block conv (k): frames farther than 2 * (k / 2) from the edge see no padding.
        let reach = 2 * (cfg.kernel / 2);
        for c in 0..cfg.embed_dim {
            for l in 0..len {
                let same = short_out.get2(c, l).to_bits() == long_out.get2(c, l).to_bits();
                if l + reach < len {
                    assert!(same, "frame {l} changed");
                }
            }
        }
        assert!(short_out.max_abs_diff(&Tensor::from_fn(short_out.shape(), |j| long_out.get2(j / len, j % len))) > 0.0);
    }
}
