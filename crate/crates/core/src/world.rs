//! Synthetic codec-embedding world with known factor structure.
//!
//! Each frame of a clean embedding is
//!
//! ```text
//! x0[:, l] = c_sem[:, l] + B_p phi(p_l) + B_s s_k + noise,   phi(p) = [p, p^2, sin p]
//! ```
//!
//! where `c_sem` is a piecewise-constant sequence of token vectors, `p` the
//! prosody trajectory and `s_k` the unit speaker vector. The prosody trajectory
//! is a sum of three random-phase sinusoids plus a speaker-specific intonation
//! contour scaled by the leakage strength, so prosody carries identity. The
//! prosody condition encodes `p` after removing only part of the speaker's
//! contour, the way an imperfect speaker normalisation would.
//!
//! Token table, `B_p` and `B_s` span independent subspaces, so any embedding
//! decomposes uniquely by least squares ([`World::project_factors`]).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::backbone::repeat_frames;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, normal, rng, Rng};
use crate::tensor::Tensor;

/// Cycles per utterance of the three content-prosody sinusoids.
const CONTENT_CYCLES: [f64; 3] = [2.0, 3.0, 5.0];
/// Number of low-order cosine basis functions in a speaker intonation contour.
pub const CONTOUR_BASIS: usize = 3;
const PHI_DIM: usize = 3;
const MAX_COSINE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldConfig {
    pub n_speakers: usize,
    /// The first `n_pool_speakers` speakers train the model and form the
    /// pseudo-speaker pool; the rest are evaluation sources.
    pub n_pool_speakers: usize,
    pub n_semantic_tokens: usize,
    pub frames: usize,
    pub embed_dim: usize,
    pub cond_pro_dim: usize,
    pub cond_spk_dim: usize,
    /// How strongly prosody carries speaker identity, in `[0, 1]`.
    pub leakage: f64,
    pub residual_noise_std: f64,
    /// Standard deviation of speaker contour coefficients before leakage scaling.
    pub contour_std: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_speakers: 16,
            n_pool_speakers: 8,
            n_semantic_tokens: 16,
            frames: 64,
            embed_dim: 32,
            cond_pro_dim: 8,
            cond_spk_dim: 8,
            leakage: 0.5,
            residual_noise_std: 0.05,
            contour_std: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.n_speakers < 2 {
            return bad(format!("need at least 2 speakers, got {}", self.n_speakers));
        }
        if self.frames < 4 {
            return bad(format!("need at least 4 frames, got {}", self.frames));
        }
        if self.n_pool_speakers == 0 || self.n_pool_speakers >= self.n_speakers {
            return bad(format!("pool size must lie in [1, {}), got {}", self.n_speakers, self.n_pool_speakers));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return bad(format!("leakage must lie in [0, 1], got {}", self.leakage));
        }
        if self.residual_noise_std < 0.0 || self.contour_std < 0.0 {
            return bad("standard deviations must be non-negative".into());
        }
        if self.n_semantic_tokens == 0 || self.cond_pro_dim < 2 || self.cond_spk_dim == 0 {
            return bad("token count and condition dimensions must be positive (prosody >= 2)".into());
        }
        let cols = self.n_semantic_tokens + PHI_DIM + self.cond_spk_dim;
        if cols > self.embed_dim {
            return bad(format!("{cols} factor directions do not fit in embed_dim {}", self.embed_dim));
        }
        Ok(())
    }
}

/// Speaker vectors and leakage-scaled intonation contour coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerBank {
    pub vectors: Vec<Vec<f64>>,
    pub contours: Vec<[f64; CONTOUR_BASIS]>,
}

impl SpeakerBank {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn max_cosine(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for i in 0..self.vectors.len() {
            for j in i + 1..self.vectors.len() {
                m = m.max(dot(&self.vectors[i], &self.vectors[j]));
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct ToyUtterance {
    pub speaker: usize,
    pub tokens: Vec<usize>,
    pub x0: Tensor,
    pub c_sem: Tensor,
    /// Prosody trajectory `[1, L]`.
    pub prosody: Tensor,
    pub c_pro: Tensor,
    pub c_spk: Tensor,
}

/// Least-squares decomposition of an embedding onto the world subspaces.
#[derive(Clone, Debug)]
pub struct Factors {
    pub semantic: Tensor,
    /// First lifted coordinate per frame, the prosody estimate.
    pub prosody: Vec<f64>,
    /// Speaker-subspace coefficients averaged over frames.
    pub speaker: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub bank: SpeakerBank,
    /// `n_semantic_tokens` unit vectors of length `embed_dim`.
    pub tokens: Vec<Vec<f64>>,
    /// `B_p`, `[embed_dim, 3]` row-major.
    pub prosody_mix: Vec<f64>,
    /// `B_s`, `[embed_dim, cond_spk_dim]` row-major.
    pub speaker_mix: Vec<f64>,
    /// Prosody feature encoder, `[cond_pro_dim, 2]` acting on `[p, dp]`.
    pub prosody_encoder: Vec<f64>,
    solver: DMatrix<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = libm::sqrt(dot(&v, &v));
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Columns drawn as independent unit-norm Gaussian directions, stored row-major.
fn random_columns(rows: usize, cols: usize, norm: f64, rng: &mut Rng) -> Vec<f64> {
    let columns: Vec<Vec<f64>> = (0..cols).map(|_| unit_vector(rows, rng)).collect();
    (0..rows * cols).map(|j| norm * columns[j % cols][j / cols]).collect()
}

/// Unit-RMS cosine basis function `j` at frame `l`.
pub fn contour_basis(j: usize, l: usize, frames: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        SQRT_2 * libm::cos(PI * j as f64 * (l as f64 + 0.5) / frames as f64)
    }
}

pub fn phi(p: f64) -> [f64; PHI_DIM] {
    [p, p * p, libm::sin(p)]
}

impl World {
    pub fn generate(config: WorldConfig) -> Result<World> {
        config.validate()?;
        let mut r = rng(derive_seed(config.seed, "world"));
        let e = config.embed_dim;

        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(config.n_speakers);
        let mut attempts = 0;
        while vectors.len() < config.n_speakers {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::IllConditioned(format!(
                    "cannot place {} speakers in {} dims below cosine {MAX_COSINE}",
                    config.n_speakers, config.cond_spk_dim
                )));
            }
            let v = unit_vector(config.cond_spk_dim, &mut r);
            if vectors.iter().all(|u| dot(u, &v) < MAX_COSINE) {
                vectors.push(v);
            }
        }
        let contours = (0..config.n_speakers)
            .map(|_| {
                let mut c = [0.0; CONTOUR_BASIS];
                for x in &mut c {
                    *x = config.leakage * config.contour_std * normal(&mut r);
                }
                c
            })
            .collect();
        let tokens = (0..config.n_semantic_tokens).map(|_| unit_vector(e, &mut r)).collect();
        let prosody_mix = random_columns(e, PHI_DIM, 0.5, &mut r);
        let speaker_mix = random_columns(e, config.cond_spk_dim, 1.0, &mut r);
        let prosody_encoder = random_columns(config.cond_pro_dim, 2, 1.0, &mut r);

        let mut world = World {
            config,
            bank: SpeakerBank { vectors, contours },
            tokens,
            prosody_mix,
            speaker_mix,
            prosody_encoder,
            solver: DMatrix::zeros(0, 0),
        };
        let basis = world.basis();
        let svd = basis.clone().svd(true, true);
        let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
        if smin < 1e-6 * smax {
            return Err(Error::IllConditioned(format!("factor basis condition number {}", smax / smin)));
        }
        world.solver = svd.pseudo_inverse(1e-12 * smax).map_err(|m| Error::IllConditioned(m.into()))?;
        Ok(world)
    }

    /// `[embed_dim, tokens + 3 + cond_spk_dim]` matrix of all factor directions.
    pub fn basis(&self) -> DMatrix<f64> {
        let c = &self.config;
        let (nt, ns) = (c.n_semantic_tokens, c.cond_spk_dim);
        DMatrix::from_fn(c.embed_dim, nt + PHI_DIM + ns, |i, j| {
            if j < nt {
                self.tokens[j][i]
            } else if j < nt + PHI_DIM {
                self.prosody_mix[i * PHI_DIM + (j - nt)]
            } else {
                self.speaker_mix[i * ns + (j - nt - PHI_DIM)]
            }
        })
    }

    pub fn pool_speakers(&self) -> core::ops::Range<usize> {
        0..self.config.n_pool_speakers
    }

    pub fn eval_speakers(&self) -> core::ops::Range<usize> {
        self.config.n_pool_speakers..self.config.n_speakers
    }

    /// The speaker's leakage-scaled intonation contour at every frame.
    pub fn contour(&self, speaker: usize) -> Vec<f64> {
        let l = self.config.frames;
        let c = &self.bank.contours[speaker];
        (0..l).map(|f| (0..CONTOUR_BASIS).map(|j| c[j] * contour_basis(j, f, l)).sum()).collect()
    }

    /// `c_sem + B_p phi(p) + B_s s + noise`, frame by frame.
    pub fn assemble(&self, c_sem: &Tensor, prosody: &[f64], speaker: &[f64], noise: &Tensor) -> Result<Tensor> {
        let (e, l) = (self.config.embed_dim, c_sem.frames());
        let ns = speaker.len();
        let spk: Vec<f64> = (0..e).map(|i| dot(&self.speaker_mix[i * ns..(i + 1) * ns], speaker)).collect();
        let x = Tensor::from_fn(&[e, l], |j| {
            let (i, f) = (j / l, j % l);
            let lift = phi(prosody[f]);
            let pro = dot(&self.prosody_mix[i * PHI_DIM..(i + 1) * PHI_DIM], &lift);
            c_sem.data()[j] + pro + spk[i]
        });
        x.zip_map(noise, |a, b| a + b)
    }

    /// Prosody features `[cond_pro_dim, L]` from a normalised trajectory.
    pub fn encode_prosody(&self, normalised: &[f64]) -> Tensor {
        let l = normalised.len();
        Tensor::from_fn(&[self.config.cond_pro_dim, l], |j| {
            let (i, f) = (j / l, j % l);
            let delta = if f == 0 { 0.0 } else { normalised[f] - normalised[f - 1] };
            self.prosody_encoder[2 * i] * normalised[f] + self.prosody_encoder[2 * i + 1] * delta
        })
    }

    /// Shift of the prosody features equivalent to raising the normalised
    /// trajectory by `delta` at every frame (the delta channel is unchanged).
    pub fn prosody_shift_vector(&self, delta: f64) -> Vec<f64> {
        (0..self.config.cond_pro_dim).map(|i| self.prosody_encoder[2 * i] * delta).collect()
    }

    pub fn generate_utterance(&self, speaker: usize, rng: &mut Rng) -> Result<ToyUtterance> {
        let c = &self.config;
        if speaker >= c.n_speakers {
            return Err(Error::Config(format!("speaker {speaker} not in bank of {}", c.n_speakers)));
        }
        let l = c.frames;
        let seg = (l / 8).max(1);
        let n_seg = l.div_ceil(seg);
        let seg_tokens: Vec<usize> = (0..n_seg).map(|_| rng.random_range(0..c.n_semantic_tokens)).collect();
        let tokens: Vec<usize> = (0..l).map(|f| seg_tokens[f / seg]).collect();
        let c_sem = Tensor::from_fn(&[c.embed_dim, l], |j| self.tokens[tokens[j % l]][j / l]);

        let waves: Vec<(f64, f64, f64)> = CONTENT_CYCLES
            .iter()
            .map(|&cyc| (cyc, rng.random_range(0.3..0.7), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let contour = self.contour(speaker);
        let prosody: Vec<f64> = (0..l)
            .map(|f| {
                let content: f64 = waves.iter().map(|&(cyc, amp, ph)| amp * libm::sin(2.0 * PI * cyc * f as f64 / l as f64 + ph)).sum();
                content + contour[f]
            })
            .collect();
        let noise = Tensor::from_fn(&[c.embed_dim, l], |_| c.residual_noise_std * normal(rng));
        let s = &self.bank.vectors[speaker];
        let x0 = self.assemble(&c_sem, &prosody, s, &noise)?;

        let keep = c.leakage;
        let normalised: Vec<f64> = prosody.iter().zip(&contour).map(|(p, o)| p - (1.0 - keep) * o).collect();
        let c_pro = self.encode_prosody(&normalised);
        Ok(ToyUtterance {
            speaker,
            tokens,
            x0,
            c_sem,
            prosody: Tensor::new(vec![1, l], prosody)?,
            c_pro,
            c_spk: repeat_frames(s, l),
        })
    }

    /// Per-frame least-squares coefficients `[tokens.., phi.., speaker..]`.
    pub fn coefficients(&self, x: &Tensor) -> Result<DMatrix<f64>> {
        if x.channels() != self.config.embed_dim || x.shape().len() != 2 {
            return Err(Error::ShapeMismatch { op: "project_factors", lhs: vec![self.config.embed_dim, x.frames()], rhs: x.shape().to_vec() });
        }
        let m = DMatrix::from_row_slice(x.channels(), x.frames(), x.data());
        Ok(&self.solver * m)
    }

    pub fn project_factors(&self, x: &Tensor) -> Result<Factors> {
        let coef = self.coefficients(x)?;
        let c = &self.config;
        let (nt, ns, l) = (c.n_semantic_tokens, c.cond_spk_dim, x.frames());
        let semantic = Tensor::from_fn(&[c.embed_dim, l], |j| {
            let (i, f) = (j / l, j % l);
            (0..nt).map(|k| self.tokens[k][i] * coef[(k, f)]).sum()
        });
        let prosody = (0..l).map(|f| coef[(nt, f)]).collect();
        let speaker = (0..ns).map(|k| (0..l).map(|f| coef[(nt + PHI_DIM + k, f)]).sum::<f64>() / l as f64).collect();
        Ok(Factors { semantic, prosody, speaker })
    }
}
