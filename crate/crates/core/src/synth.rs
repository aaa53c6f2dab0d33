//! Deterministic synthetic faces.
//!
//! A face with identity latent `z` (length `k`) seen at pose `e` renders to an
//! `L × F` feature grid
//!
//! ```text
//! raw = reshape(A · z)  +  1 · (B · g(e))ᵀ  +  noise
//! ```
//!
//! where `g(e) = [sin p, cos p, sin y, cos y, sin r, cos r]`. The identity term
//! varies per token while the pose term is shared by every token, so a linear
//! tokenizer plus additive pose injection can cancel pose exactly. With
//! `entangled = true` the identity term is additionally gated by pose.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aligner::{FaceInput, PairBatch};
use crate::pose::EulerAngles;
use crate::rng::{stream, Domain};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSampling {
    /// Independent uniform draws over the configured ranges.
    Uniform,
    /// Jittered draws around five canonical head poses.
    Clustered,
}

/// Centers used by [`PoseSampling::Clustered`]: frontal, left, right, up, down.
pub const CLUSTER_CENTERS: [[f64; 3]; 5] =
    [[0.0, 0.0, 0.0], [0.0, 45.0, 0.0], [0.0, -45.0, 0.0], [40.0, 0.0, 0.0], [-40.0, 0.0, 0.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub identity_dim: usize,
    pub noise_sigma: f64,
    /// Per-entry standard deviation of the pose term relative to the identity term.
    pub pose_scale: f64,
    pub pitch_range: [f64; 2],
    pub yaw_range: [f64; 2],
    pub roll_range: [f64; 2],
    /// Minimum summed absolute angle difference between the two views of a pair.
    pub min_separation: f64,
    /// Number of training identities; evaluation identities are drawn beyond it.
    pub identity_pool: usize,
    pub entangled: bool,
    pub pose_sampling: PoseSampling,
    pub cluster_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            identity_dim: 16,
            noise_sigma: 0.05,
            pose_scale: 0.5,
            pitch_range: [-90.0, 90.0],
            yaw_range: [-90.0, 90.0],
            roll_range: [-45.0, 45.0],
            min_separation: 30.0,
            identity_pool: 4096,
            entangled: false,
            pose_sampling: PoseSampling::Uniform,
            cluster_jitter: 10.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identity_dim == 0 || self.identity_pool == 0 {
            return Err(Error::InvalidArgument("identity_dim and identity_pool must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if !(self.pose_scale >= 0.0 && self.pose_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("pose_scale must be non-negative, got {}", self.pose_scale)));
        }
        for (name, r) in [("pitch_range", self.pitch_range), ("yaw_range", self.yaw_range), ("roll_range", self.roll_range)] {
            if !(r[0] <= r[1] && r[0] >= -180.0 && r[1] <= 180.0) {
                return Err(Error::InvalidArgument(format!("{name} {r:?} must be ordered within [-180, 180]")));
            }
        }
        if !(self.min_separation >= 0.0) || !(self.cluster_jitter >= 0.0) {
            return Err(Error::InvalidArgument("min_separation and cluster_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// `[sin p, cos p, sin y, cos y, sin r, cos r]`
pub fn pose_features(e: &EulerAngles) -> Array1<f64> {
    let mut g = Array1::zeros(6);
    for (axis, angle) in e.as_array().into_iter().enumerate() {
        let (s, c) = angle.to_radians().sin_cos();
        g[2 * axis] = s;
        g[2 * axis + 1] = c;
    }
    g
}

/// Fixed mixing matrices of one synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    cfg: WorldConfig,
    seed: u64,
    tokens: usize,
    features: usize,
    /// `L·F × k`
    identity_mixer: Array2<f64>,
    /// `F × 6`
    pose_mixer: Array2<f64>,
    /// `F × 6`, used only when entangled.
    gate_mixer: Array2<f64>,
}

impl SynthWorld {
    pub fn new(cfg: WorldConfig, tokens: usize, features: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if tokens == 0 || features == 0 {
            return Err(Error::InvalidArgument("world needs positive L and F".into()));
        }
        let k = cfg.identity_dim;
        let mut rng = stream(seed, Domain::World, 0);
        let mut normal = |scale: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        };
        let identity_mixer = Array2::from_shape_fn((tokens * features, k), |_| normal(1.0 / (k as f64).sqrt()));
        let pose_mixer = Array2::from_shape_fn((features, 6), |_| normal(cfg.pose_scale / 3f64.sqrt()));
        let gate_mixer = Array2::from_shape_fn((features, 6), |_| normal(1.0 / 3f64.sqrt()));
        Ok(Self { cfg, seed, tokens, features, identity_mixer, pose_mixer, gate_mixer })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Latent of identity `id`; a pure function of `(seed, id)`.
    pub fn identity_latent(&self, id: u64) -> Array1<f64> {
        let mut rng = stream(self.seed, Domain::Identity, id);
        Array1::from_shape_fn(self.cfg.identity_dim, |_| StandardNormal.sample(&mut rng))
    }

    /// Noise-free rendering.
    pub fn render_clean(&self, z: &Array1<f64>, e: &EulerAngles) -> Result<Array2<f64>> {
        if z.len() != self.cfg.identity_dim {
            return Err(Error::Shape(format!("identity latent has length {}, expected {}", z.len(), self.cfg.identity_dim)));
        }
        let g = pose_features(e);
        let mut identity = self
            .identity_mixer
            .dot(z)
            .into_shape_with_order((self.tokens, self.features))
            .expect("L·F elements");
        if self.cfg.entangled {
            let gate = self.gate_mixer.dot(&g).mapv(|v| 1.0 + 0.5 * v.tanh());
            identity *= &gate.view().insert_axis(Axis(0));
        }
        let pose = self.pose_mixer.dot(&g);
        identity += &pose.view().insert_axis(Axis(0));
        Ok(identity)
    }

    /// Rendering plus i.i.d. Gaussian noise drawn from `rng`.
    pub fn render(&self, z: &Array1<f64>, e: &EulerAngles, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let mut raw = self.render_clean(z, e)?;
        if self.cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.cfg.noise_sigma).expect("validated sigma");
            raw.mapv_inplace(|v| v + noise.sample(rng));
        }
        Ok(raw)
    }

    pub fn sample_pose(&self, rng: &mut ChaCha8Rng) -> EulerAngles {
        let c = &self.cfg;
        let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
        let angles = match c.pose_sampling {
            PoseSampling::Uniform => [uniform(rng, c.pitch_range), uniform(rng, c.yaw_range), uniform(rng, c.roll_range)],
            PoseSampling::Clustered => {
                let center = CLUSTER_CENTERS[rng.random_range(0..CLUSTER_CENTERS.len())];
                let j = c.cluster_jitter;
                let mut out = [0.0; 3];
                for (o, ctr) in out.iter_mut().zip(center) {
                    *o = if j > 0.0 { ctr + rng.random_range(-j..j) } else { ctr };
                }
                out
            }
        };
        EulerAngles::new(angles[0], angles[1], angles[2]).expect("finite sampled angles")
    }

    /// Two poses at least `min_separation` apart.
    pub fn sample_pose_pair(&self, rng: &mut ChaCha8Rng) -> Result<(EulerAngles, EulerAngles)> {
        let first = self.sample_pose(rng);
        for _ in 0..100_000 {
            let second = self.sample_pose(rng);
            if first.l1_separation(&second) >= self.cfg.min_separation {
                return Ok((first, second));
            }
        }
        Err(Error::InvalidArgument(format!(
            "cannot find poses {} degrees apart within the configured ranges",
            self.cfg.min_separation
        )))
    }

    fn pair_batch_from_ids(&self, ids: Vec<u64>, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        let mut first = Vec::with_capacity(ids.len());
        let mut second = Vec::with_capacity(ids.len());
        for &id in &ids {
            let z = self.identity_latent(id);
            let (e1, e2) = self.sample_pose_pair(rng)?;
            first.push(FaceInput { raw: self.render(&z, &e1, rng)?, euler: e1 });
            second.push(FaceInput { raw: self.render(&z, &e2, rng)?, euler: e2 });
        }
        Ok(PairBatch { identities: ids, first, second })
    }

    /// Training batch number `counter`: `n` distinct identities from the
    /// training pool, two poses each.
    pub fn make_pair_batch(&self, n: usize, counter: u64) -> Result<PairBatch> {
        if n == 0 {
            return Err(Error::InvalidArgument("batch needs at least one pair".into()));
        }
        if n > self.cfg.identity_pool {
            return Err(Error::InvalidArgument(format!(
                "batch of {n} identities exceeds the pool of {}",
                self.cfg.identity_pool
            )));
        }
        let mut rng = stream(self.seed, Domain::Batch, counter);
        let ids = sample(&mut rng, self.cfg.identity_pool, n).into_iter().map(|i| i as u64).collect();
        self.pair_batch_from_ids(ids, &mut rng)
    }

    /// `m` held-out identities (ids `pool..pool+m`), disjoint from training.
    pub fn eval_pairs(&self, m: usize, counter: u64) -> Result<PairBatch> {
        if m == 0 {
            return Err(Error::InvalidArgument("evaluation set needs at least one identity".into()));
        }
        let mut rng = stream(self.seed, Domain::Eval, counter);
        let base = self.cfg.identity_pool as u64;
        self.pair_batch_from_ids((base..base + m as u64).collect(), &mut rng)
    }

    /// `identities × poses_per_identity` held-out faces, grouped by identity.
    pub fn eval_grid(&self, identities: usize, poses_per_identity: usize, counter: u64) -> Result<Vec<(u64, FaceInput)>> {
        let mut rng = stream(self.seed, Domain::Eval, counter);
        let base = self.cfg.identity_pool as u64;
        let mut out = Vec::with_capacity(identities * poses_per_identity);
        for id in base..base + identities as u64 {
            let z = self.identity_latent(id);
            for _ in 0..poses_per_identity {
                let e = self.sample_pose(&mut rng);
                out.push((id, FaceInput { raw: self.render(&z, &e, &mut rng)?, euler: e }));
            }
        }
        Ok(out)
    }

    /// Pose tracks in the curation input format: one single-face video per
    /// held-out identity with poses interpolated between two sampled poses.
    pub fn export_tracks(&self, videos: usize, frames: usize, counter: u64) -> Result<Vec<crate::curation::TrackLine>> {
        if frames == 0 {
            return Err(Error::InvalidArgument("tracks need at least one frame".into()));
        }
        let mut rng = stream(self.seed, Domain::Eval, counter);
        let dims = crate::pose::FrameDims::default();
        (0..videos)
            .map(|v| {
                let (a, b) = self.sample_pose_pair(&mut rng)?;
                let cx = rng.random_range(200.0..632.0);
                let cy = rng.random_range(150.0..330.0);
                let half = rng.random_range(40.0..90.0);
                let frame_records = (0..frames)
                    .map(|i| {
                        let t = if frames == 1 { 0.0 } else { i as f64 / (frames - 1) as f64 };
                        let lerp = |x: f64, y: f64| x + (y - x) * t;
                        let (pa, pb) = (a.as_array(), b.as_array());
                        crate::curation::FrameLine {
                            i: i as u64,
                            faces: 1,
                            bbox: Some([cx - half, cy - half, cx + half, cy + half]),
                            euler: Some([lerp(pa[0], pb[0]), lerp(pa[1], pb[1]), lerp(pa[2], pb[2])]),
                        }
                    })
                    .collect();
                Ok(crate::curation::TrackLine {
                    video_id: format!("synth_{:05}", self.cfg.identity_pool + v),
                    width: dims.width,
                    height: dims.height,
                    frames: frame_records,
                })
            })
            .collect()
    }
}
