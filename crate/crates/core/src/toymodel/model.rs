use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::patterns::{compose_queries, PatternBank, WeightGenerator};

const LN_EPS: f64 = 1e-5;
/// Lower bound of predicted box extents.
pub const MIN_BOX_EXTENT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Learnable `n × d` content table.
    Static,
    /// Content queries composed from shared patterns per image.
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub mode: QueryMode,
    /// Grid extent of each feature-map scale, coarsest first.
    pub scale_extents: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 60,
            m: 10,
            d: 16,
            layers: 2,
            num_classes: 6,
            mode: QueryMode::Dynamic,
            scale_extents: vec![4, 8],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_extents.len() != 2 || self.scale_extents[1] != 2 * self.scale_extents[0] {
            return Err(Error::InvalidConfig(format!(
                "expected a coarse and a twice-as-fine scale, got extents {:?}",
                self.scale_extents
            )));
        }
        if self.n == 0 || self.m == 0 || self.d < 2 || self.d % 2 != 0 || self.layers == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "model needs n, m, layers, classes ≥ 1 and an even d ≥ 2: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuerySource {
    Static {
        table: ParamId,
    },
    Dynamic {
        bank: PatternBank,
        gen: WeightGenerator,
        /// Replaces the generated mixing weights when set.
        pinned: Option<Tensor>,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    self_attn: Attention,
    cross_attn: Attention,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Per-layer outputs: raw class logits (`n × (C+1)`, background last) and
/// centre-size boxes (`n × 4`).
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput<'t> {
    pub logits: Var<'t>,
    pub boxes: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Decoded<'t> {
    pub layers: Vec<LayerOutput<'t>>,
    /// Mixing weights used for this image; `None` for static queries.
    pub weights: Option<Var<'t>>,
    /// Pattern rows, for the diversity term.
    pub patterns: Option<Var<'t>>,
}

/// Single-head encoder-decoder detector over a scene's feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub queries: QuerySource,
    pos_emb: ParamId,
    anchors: ParamId,
    enc_w: ParamId,
    enc_b: ParamId,
    layers: Vec<DecoderLayer>,
    cls_w: ParamId,
    cls_b: ParamId,
    box_w1: ParamId,
    box_b1: ParamId,
    box_w2: ParamId,
    box_b2: ParamId,
}

fn uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("valid shape")
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Fixed 2D sinusoidal encoding of an `h × w` grid: the first half of the
/// channels encodes the row, the second half the column.
pub fn sine_position_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; h * w * d];
    let encode = |out: &mut [f64], pos: f64| {
        for (i, v) in out.iter_mut().enumerate() {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / half as f64);
            *v = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
        }
    };
    for y in 0..h {
        for x in 0..w {
            let cell = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            let (py, px) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            encode(&mut cell[..half], py * 2.0 * std::f64::consts::PI);
            encode(&mut cell[half..], px * 2.0 * std::f64::consts::PI);
        }
    }
    Tensor::new(&[h * w, d], data).expect("valid shape")
}

/// Spatial scale of the cross-attention prior around each query's point.
const LOCALITY_WIDTH: f64 = 0.15;

/// `-‖p_i - c_j‖² / (2σ²)` between query points (`n × 2`) and cell centres
/// (`hw × 2`).
fn locality_bias<'t>(points: Var<'t>, centres: Var<'t>, sigma: f64) -> Result<Var<'t>> {
    let tape = points.tape();
    let cells = centres.shape()[0];
    let c = centres.value();
    let c_sq: Vec<f64> = c.chunks(2).map(|v| v[0] * v[0] + v[1] * v[1]).collect();
    let p_sq = points.mul(points)?.matmul(tape.constant(&[2, cells], vec![1.0; 2 * cells])?)?;
    let cross = points.matmul(centres.transpose()?)?.scale(-2.0);
    let dist = p_sq.add(cross)?.add_row(tape.constant(&[cells], c_sq)?)?;
    Ok(dist.scale(-1.0 / (2.0 * sigma * sigma)))
}

/// `(x, y)` centre of every cell of an `h × w` grid, row-major.
pub fn cell_centres(h: usize, w: usize) -> Tensor {
    let data = (0..h)
        .flat_map(|y| (0..w).flat_map(move |x| [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]))
        .collect();
    Tensor::new(&[h * w, 2], data).expect("valid shape")
}

impl DetectorModel {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (n, m, d, c) = (config.n, config.m, config.d, config.num_classes);

        // both query sources draw from the same stream so paired runs share
        // everything else
        let queries = match config.mode {
            QueryMode::Static => {
                let table = store.add("queries", normal(&mut rng, &[n, d], 1.0 / (d as f64).sqrt()));
                QuerySource::Static { table }
            }
            QueryMode::Dynamic => {
                let bank = PatternBank::init(&mut store, &mut rng, m, d);
                let gen = WeightGenerator::init_with_extents(&mut store, &mut rng, &config.scale_extents, n, m, d, d);
                QuerySource::Dynamic {
                    bank,
                    gen,
                    pinned: None,
                }
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0_de00);
        let pos_emb = store.add("pos_emb", normal(&mut rng, &[n, d], 1.0));
        // anchor logits; sigmoid spreads them over the image
        let anchors = store.add("anchors", normal(&mut rng, &[n, 2], 1.0));
        let enc_w = store.add("enc.w", uniform(&mut rng, d, d));
        let enc_b = store.add("enc.b", Tensor::zeros(&[d]));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let attn = |store: &mut ParamStore, rng: &mut ChaCha8Rng, kind: &str| Attention {
                wq: store.add(format!("dec{l}.{kind}.wq"), uniform(rng, d, d)),
                wk: store.add(format!("dec{l}.{kind}.wk"), uniform(rng, d, d)),
                wv: store.add(format!("dec{l}.{kind}.wv"), uniform(rng, d, d)),
                wo: store.add(format!("dec{l}.{kind}.wo"), uniform(rng, d, d)),
                ln_gain: store.add(format!("dec{l}.{kind}.ln_gain"), Tensor::full(&[d], 1.0)),
                ln_bias: store.add(format!("dec{l}.{kind}.ln_bias"), Tensor::zeros(&[d])),
            };
            let self_attn = attn(&mut store, &mut rng, "self");
            let cross_attn = attn(&mut store, &mut rng, "cross");
            layers.push(DecoderLayer {
                self_attn,
                cross_attn,
                ffn_w1: store.add(format!("dec{l}.ffn.w1"), uniform(&mut rng, d, 2 * d)),
                ffn_b1: store.add(format!("dec{l}.ffn.b1"), Tensor::zeros(&[2 * d])),
                ffn_w2: store.add(format!("dec{l}.ffn.w2"), uniform(&mut rng, 2 * d, d)),
                ffn_b2: store.add(format!("dec{l}.ffn.b2"), Tensor::zeros(&[d])),
                ln_gain: store.add(format!("dec{l}.ffn.ln_gain"), Tensor::full(&[d], 1.0)),
                ln_bias: store.add(format!("dec{l}.ffn.ln_bias"), Tensor::zeros(&[d])),
            });
        }
        let cls_w = store.add("head.cls_w", uniform(&mut rng, d, c + 1));
        // background starts favoured, as most queries are unmatched
        let mut cls_bias = vec![0.0; c + 1];
        cls_bias[c] = 2.0;
        let cls_b = store.add("head.cls_b", Tensor::new(&[c + 1], cls_bias)?);
        let box_w1 = store.add("head.box_w1", uniform(&mut rng, d, d));
        let box_b1 = store.add("head.box_b1", Tensor::zeros(&[d]));
        let box_w2 = store.add("head.box_w2", uniform(&mut rng, d, 4));
        // sigmoid(-1.5) ≈ 0.18, a typical object extent
        let box_b2 = store.add("head.box_b2", Tensor::new(&[4], vec![0.0, 0.0, -1.5, -1.5])?);
        Ok(Self {
            config,
            store,
            queries,
            pos_emb,
            anchors,
            enc_w,
            enc_b,
            layers,
            cls_w,
            cls_b,
            box_w1,
            box_b1,
            box_w2,
            box_b2,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Freezes the mixing weights of a dynamic model to `w` (`n × m`).
    pub fn pin_weights(&mut self, w: Tensor) -> Result<()> {
        let (n, m) = (self.config.n, self.config.m);
        match &mut self.queries {
            QuerySource::Dynamic { pinned, .. } => {
                if w.shape() != [n, m] {
                    return Err(Error::ShapeMismatch {
                        op: "pin_weights",
                        lhs: w.shape().to_vec(),
                        rhs: vec![n, m],
                    });
                }
                *pinned = Some(Tensor::new(&[n, m], w.into_data())?);
                Ok(())
            }
            QuerySource::Static { .. } => Err(Error::InvalidConfig(
                "mixing weights exist only for dynamic queries".into(),
            )),
        }
    }

    /// Re-seeds collapsed patterns after a parameter update.
    pub fn after_update(&mut self) {
        if let QuerySource::Dynamic { bank, .. } = &self.queries {
            bank.enforce_nonzero(&mut self.store);
        }
    }

    /// Residual single-head attention; also returns the attention map.
    fn attend<'t>(
        &self,
        bound: &Bound<'t>,
        p: &Attention,
        tgt: Var<'t>,
        query_in: Var<'t>,
        key_in: Var<'t>,
        value_in: Var<'t>,
        bias: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let scale = 1.0 / (self.config.d as f64).sqrt();
        let q = query_in.matmul(bound.get(p.wq))?;
        let k = key_in.matmul(bound.get(p.wk))?;
        let v = value_in.matmul(bound.get(p.wv))?;
        let mut logits = q.matmul(k.transpose()?)?.scale(scale);
        if let Some(b) = bias {
            logits = logits.add(b)?;
        }
        let attn = logits.softmax_rows();
        let out = attn.matmul(v)?.matmul(bound.get(p.wo))?;
        let tgt = tgt
            .add(out)?
            .layer_norm_rows(LN_EPS)
            .mul_row(bound.get(p.ln_gain))?
            .add_row(bound.get(p.ln_bias))?;
        Ok((tgt, attn))
    }

    /// Class logits and boxes. Box centres are offsets, in logit space, from
    /// `reference`: the centroid of the layer's cross-attention (`n × 2`).
    fn heads<'t>(&self, bound: &Bound<'t>, tgt: Var<'t>, reference: Var<'t>) -> Result<LayerOutput<'t>> {
        let tape = tgt.tape();
        let n = self.config.n;
        let logits = tgt.matmul(bound.get(self.cls_w))?.add_row(bound.get(self.cls_b))?;
        // logit(r) = ln r - ln(1 - r), spread into the two centre columns
        let ref_logit = reference.ln().sub(reference.affine(-1.0, 1.0).ln())?;
        let spread = tape.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
        let raw = tgt
            .matmul(bound.get(self.box_w1))?
            .add_row(bound.get(self.box_b1))?
            .relu()
            .matmul(bound.get(self.box_w2))?
            .add_row(bound.get(self.box_b2))?
            .add(ref_logit.matmul(spread)?)?
            .sigmoid();
        // centres in (0, 1); extents in (MIN_BOX_EXTENT, 1)
        let s = 1.0 - MIN_BOX_EXTENT;
        let scale: Vec<f64> = (0..n).flat_map(|_| [1.0, 1.0, s, s]).collect();
        let shift: Vec<f64> = (0..n).flat_map(|_| [0.0, 0.0, MIN_BOX_EXTENT, MIN_BOX_EXTENT]).collect();
        let boxes = raw.mul_const(&scale)?.add(tape.constant(&[n, 4], shift)?)?;
        Ok(LayerOutput { logits, boxes })
    }

    /// Runs the decoder on one scene with parameters bound on `bound`.
    pub fn decode<'t>(&self, bound: &Bound<'t>, scene: &Scene) -> Result<Decoded<'t>> {
        let tape = bound
            .vars()
            .first()
            .map(|v| v.tape())
            .ok_or(Error::Empty("parameters"))?;
        let d = self.config.d;
        for (map, &e) in [&scene.coarse, &scene.fine].into_iter().zip(&self.config.scale_extents) {
            if map.shape() != [e, e, d] {
                return Err(Error::ShapeMismatch {
                    op: "decode",
                    lhs: map.shape().to_vec(),
                    rhs: vec![e, e, d],
                });
            }
        }
        let (content, weights, patterns) = match &self.queries {
            QuerySource::Static { table } => (bound.get(*table), None, None),
            QuerySource::Dynamic { bank, gen, pinned } => {
                let patterns = bound.get(bank.id);
                let w = match pinned {
                    Some(w) => tape.leaf(w),
                    None => {
                        let coarse = tape.leaf(&scene.coarse);
                        let fine = tape.leaf(&scene.fine);
                        gen.generate_weights(bound, &[coarse, fine])?
                    }
                };
                (compose_queries(patterns, w)?, Some(w), Some(patterns))
            }
        };

        let fs = scene.fine.shape();
        let (h, w) = (fs[0], fs[1]);
        let fine = tape.constant(&[h * w, d], scene.fine.data().to_vec())?;
        let mem_pos = tape.leaf(&sine_position_encoding(h, w, d));
        let memory = fine
            .matmul(bound.get(self.enc_w))?
            .add_row(bound.get(self.enc_b))?
            .add(mem_pos)?;
        let pos = bound.get(self.pos_emb);
        let centres = tape.leaf(&cell_centres(h, w));

        let mut point = bound.get(self.anchors).sigmoid();
        let mut tgt = content;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let qp = tgt.add(pos)?;
            tgt = self.attend(bound, &layer.self_attn, tgt, qp, qp, tgt, None)?.0;
            let qp = tgt.add(pos)?;
            let bias = locality_bias(point, centres, LOCALITY_WIDTH)?;
            let (out, cross) = self.attend(bound, &layer.cross_attn, tgt, qp, memory, memory, Some(bias))?;
            tgt = out;
            let reference = cross.matmul(centres)?;
            let ffn = tgt
                .matmul(bound.get(layer.ffn_w1))?
                .add_row(bound.get(layer.ffn_b1))?
                .relu()
                .matmul(bound.get(layer.ffn_w2))?
                .add_row(bound.get(layer.ffn_b2))?;
            tgt = tgt
                .add(ffn)?
                .layer_norm_rows(LN_EPS)
                .mul_row(bound.get(layer.ln_gain))?
                .add_row(bound.get(layer.ln_bias))?;
            let out = self.heads(bound, tgt, reference)?;
            point = out.boxes.matmul(tape.constant(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])?)?;
            outputs.push(out);
        }
        Ok(Decoded {
            layers: outputs,
            weights,
            patterns,
        })
    }

    /// Forward pass on a private tape, returning plain tensors per layer.
    pub fn predict(&self, scene: &Scene) -> Result<Vec<(Tensor, Tensor)>> {
        Ok(self.predict_with_weights(scene)?.0)
    }

    pub fn predict_with_weights(&self, scene: &Scene) -> Result<(Vec<(Tensor, Tensor)>, Option<Tensor>)> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let out = self.decode(&bound, scene)?;
        let layers = out
            .layers
            .iter()
            .map(|l| (l.logits.softmax_rows().to_tensor(), l.boxes.to_tensor()))
            .collect();
        Ok((layers, out.weights.map(|w| w.to_tensor())))
    }
}
