//! Shared base patterns and content-aware query composition.
//!
//! Content queries are convex mixtures of `m` shared patterns:
//! `Q = W · P`, where each row of the `n × m` weight matrix `W` is produced
//! per image by a small generator and normalized with a row softmax.
//!
//! The generator runs three stages over multi-scale feature maps:
//!
//! 1. per-scale transform: a per-position linear map, a rate-2 dilated 3×3
//!    depthwise stencil (skipped on maps smaller than 5×5) and ReLU;
//! 2. top-down fusion, coarsest first: nearest 2× upsampling, addition,
//!    a per-channel sigmoid gate and a per-position sigmoid gate, plus a
//!    skip connection of the finer map;
//! 3. average pooling to a single vector, then a two-layer MLP with layer
//!    normalization and ReLU emitting `n · m` logits.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Rows whose norm falls below this are re-seeded after an update.
pub const MIN_PATTERN_NORM: f64 = 1e-8;

const LN_EPS: f64 = 1e-5;
const DILATION: usize = 2;
/// Smallest map extent that fits the dilated stencil.
const STENCIL_MIN_EXTENT: usize = 2 * DILATION + 1;

/// `m` learnable `d`-dimensional patterns stored in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatternBank {
    pub id: ParamId,
    pub m: usize,
    pub d: usize,
}

impl PatternBank {
    /// Entries drawn from `N(0, 1/d)`.
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, m: usize, d: usize) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let data = (0..m * d).map(|_| normal.sample(rng)).collect();
        let id = store.add("patterns", Tensor::new(&[m, d], data).expect("valid shape"));
        Self { id, m, d }
    }

    /// Restores any collapsed row to a unit basis direction.
    pub fn enforce_nonzero(&self, store: &mut ParamStore) {
        let d = self.d;
        let data = store.get_mut(self.id).data_mut();
        for r in 0..self.m {
            let row = &mut data[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < MIN_PATTERN_NORM {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[r % d] = MIN_PATTERN_NORM * 10.0;
            }
        }
    }
}

/// Row-stochastic `n × m` mixing weights of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicWeights {
    pub w: Tensor,
}

impl DynamicWeights {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: w.shape().to_vec(),
                reason: "dynamic weights must be n × m".into(),
            });
        }
        for r in 0..w.rows() {
            let row = w.row(r);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "row {r} of dynamic weights is not a convex combination (sum {s})"
                )));
            }
        }
        Ok(Self { w })
    }

    pub fn n(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ScaleParams {
    lin_w: ParamId,
    lin_b: ParamId,
    /// Absent on scales too small for the stencil.
    stencil: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
struct FuseParams {
    channel: ParamId,
    spatial_w: ParamId,
    spatial_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct MlpParams {
    w1: ParamId,
    b1: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Content-aware generator of [`DynamicWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGenerator {
    scales: Vec<ScaleParams>,
    fuse: Vec<FuseParams>,
    mlp: MlpParams,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub hidden: usize,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl WeightGenerator {
    /// The final MLP layer starts at zero so every initial row is uniform.
    /// Every scale carries stencil taps.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        num_scales: usize,
        n: usize,
        m: usize,
        d: usize,
        hidden: usize,
    ) -> Self {
        Self::init_with_extents(store, rng, &vec![usize::MAX; num_scales], n, m, d, hidden)
    }

    /// Like [`WeightGenerator::init`], for scales of known smallest spatial
    /// extent (coarsest first); scales below 5 get no stencil taps.
    pub fn init_with_extents(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        extents: &[usize],
        n: usize,
        m: usize,
        d: usize,
        hidden: usize,
    ) -> Self {
        let num_scales = extents.len();
        let mut scales = Vec::with_capacity(num_scales);
        for (s, &extent) in extents.iter().enumerate() {
            let lin_w = store.add(
                format!("gen.scale{s}.lin_w"),
                Tensor::new(&[d, d], glorot(rng, d, d)).unwrap(),
            );
            let lin_b = store.add(format!("gen.scale{s}.lin_b"), Tensor::zeros(&[d]));
            let stencil = (extent >= STENCIL_MIN_EXTENT).then(|| {
                let mut taps = vec![0.05; 9 * d];
                taps[4 * d..5 * d].iter_mut().for_each(|v| *v = 1.0);
                store.add(format!("gen.scale{s}.stencil"), Tensor::new(&[9, d], taps).unwrap())
            });
            scales.push(ScaleParams {
                lin_w,
                lin_b,
                stencil,
            });
        }
        let fuse = (1..num_scales)
            .map(|s| FuseParams {
                channel: store.add(format!("gen.fuse{s}.channel"), Tensor::zeros(&[d])),
                spatial_w: store.add(
                    format!("gen.fuse{s}.spatial_w"),
                    Tensor::new(&[d, 1], glorot(rng, d, 1)).unwrap(),
                ),
                spatial_b: store.add(format!("gen.fuse{s}.spatial_b"), Tensor::zeros(&[1])),
            })
            .collect();
        let mlp = MlpParams {
            w1: store.add(
                "gen.mlp.w1",
                Tensor::new(&[d, hidden], glorot(rng, d, hidden)).unwrap(),
            ),
            b1: store.add("gen.mlp.b1", Tensor::zeros(&[hidden])),
            ln_gain: store.add("gen.mlp.ln_gain", Tensor::full(&[hidden], 1.0)),
            ln_bias: store.add("gen.mlp.ln_bias", Tensor::zeros(&[hidden])),
            w2: store.add("gen.mlp.w2", Tensor::zeros(&[hidden, n * m])),
            b2: store.add("gen.mlp.b2", Tensor::zeros(&[n * m])),
        };
        Self {
            scales,
            fuse,
            mlp,
            n,
            m,
            d,
            hidden,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Per-position linear map, dilated stencil and ReLU on one `h × w × d`
    /// map. The stencil is skipped when either extent is below 5 or the scale
    /// has no taps.
    pub fn scale_transform<'t>(&self, bound: &Bound<'t>, scale: usize, map: Var<'t>) -> Result<Var<'t>> {
        let p = &self.scales[scale];
        let s = map.shape();
        if s.len() != 3 || s[2] != self.d {
            return Err(Error::ShapeMismatch {
                op: "scale_transform",
                lhs: s,
                rhs: vec![0, 0, self.d],
            });
        }
        let (h, w) = (s[0], s[1]);
        let flat = map.reshape(&[h * w, self.d])?;
        let lin = flat
            .matmul(bound.get(p.lin_w))?
            .add_row(bound.get(p.lin_b))?
            .reshape(&[h, w, self.d])?;
        let out = match p.stencil {
            Some(taps) if h >= STENCIL_MIN_EXTENT && w >= STENCIL_MIN_EXTENT => {
                lin.dilated_stencil(bound.get(taps), DILATION)?
            }
            _ => lin,
        };
        Ok(out.relu())
    }

    /// Fuses a coarse map into one of twice its spatial extent.
    pub fn top_down_fuse<'t>(
        &self,
        bound: &Bound<'t>,
        step: usize,
        high: Var<'t>,
        low: Var<'t>,
    ) -> Result<Var<'t>> {
        let (hs, ls) = (high.shape(), low.shape());
        if hs.len() != 3 || ls.len() != 3 || ls[0] != 2 * hs[0] || ls[1] != 2 * hs[1] || ls[2] != hs[2] {
            return Err(Error::ShapeMismatch {
                op: "top_down_fuse",
                lhs: hs,
                rhs: ls,
            });
        }
        let p = &self.fuse[step];
        let (h, w, d) = (ls[0], ls[1], ls[2]);
        let fused = high
            .nearest_upsample2x()?
            .add(low)?
            .reshape(&[h * w, d])?;
        let channel = fused.mul_row(bound.get(p.channel).sigmoid())?;
        let spatial = channel
            .matmul(bound.get(p.spatial_w))?
            .add_row(bound.get(p.spatial_b))?
            .sigmoid();
        channel
            .mul_col(spatial)?
            .reshape(&[h, w, d])?
            .add(low)
    }

    /// Pools the fused multi-scale representation to a `1 × d` vector.
    pub fn pooled_features<'t>(&self, bound: &Bound<'t>, scales: &[Var<'t>]) -> Result<Var<'t>> {
        if scales.len() != self.scales.len() || scales.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "generator expects {} scales (at least 2), got {}",
                self.scales.len(),
                scales.len()
            )));
        }
        if let Some(bad) = scales.iter().find(|s| s.shape().last() != Some(&self.d)) {
            return Err(Error::ShapeMismatch {
                op: "generate_weights",
                lhs: bad.shape(),
                rhs: vec![0, 0, self.d],
            });
        }
        let mut z = self.scale_transform(bound, 0, scales[0])?;
        for (s, map) in scales.iter().enumerate().skip(1) {
            let t = self.scale_transform(bound, s, *map)?;
            z = self.top_down_fuse(bound, s - 1, z, t)?;
        }
        let s = z.shape();
        Ok(z.reshape(&[s[0] * s[1], s[2]])?.mean_axis0())
    }

    /// `n × m` mixing weights for one image, coarsest scale first.
    pub fn generate_weights<'t>(&self, bound: &Bound<'t>, scales: &[Var<'t>]) -> Result<Var<'t>> {
        let pooled = self.pooled_features(bound, scales)?;
        let mlp = &self.mlp;
        let hidden = pooled
            .matmul(bound.get(mlp.w1))?
            .add_row(bound.get(mlp.b1))?
            .layer_norm_rows(LN_EPS)
            .mul_row(bound.get(mlp.ln_gain))?
            .add_row(bound.get(mlp.ln_bias))?
            .relu();
        let logits = hidden
            .matmul(bound.get(mlp.w2))?
            .add_row(bound.get(mlp.b2))?
            .reshape(&[self.n, self.m])?;
        Ok(logits.softmax_rows())
    }
}

/// `Q = W · P`: each query is a convex mixture of pattern rows.
pub fn compose_queries<'t>(patterns: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let (ps, ws) = (patterns.shape(), weights.shape());
    if ps.len() != 2 || ws.len() != 2 || ws[1] != ps[0] {
        return Err(Error::ShapeMismatch {
            op: "compose_queries",
            lhs: ws,
            rhs: ps,
        });
    }
    weights.matmul(patterns)
}

/// Mean absolute pairwise cosine similarity of the normalized patterns,
/// in `[0, 1]`. Vacuous (zero) for a single pattern.
pub fn diversity_loss<'t>(patterns: Var<'t>) -> Result<Var<'t>> {
    let m = patterns.shape()[0];
    if m < 2 {
        warn!("diversity loss needs at least two patterns; returning 0");
        return Ok(patterns.tape().scalar(0.0));
    }
    let mut mask = vec![1.0; m * m];
    for i in 0..m {
        mask[i * m + i] = 0.0;
    }
    // divide once so that m(m-1) unit terms give exactly 1
    let pairs = patterns.cosine_matrix()?.abs().mul_const(&mask)?.sum_all();
    Ok(pairs.div_scalar((m * (m - 1)) as f64))
}
