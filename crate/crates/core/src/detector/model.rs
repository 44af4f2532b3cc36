use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{glorot, he_conv, ParamStore};
use super::{box_logits, LayerOutput, LayerOutputs, ModelConfig, Origin, BOX_EPS};
use crate::etop::{frozen_box_mask, objectness_layer_mask, EtopConfig};
use crate::numerics::linalg::Cholesky;
use crate::numerics::{logit, sigmoid, Graph, Real, Tensor, Var};
use crate::objectness::GaussianStats;
use crate::tdqi::{init_queries, query_select_masked, QueryBatch, SelectedProposal, TdqiConfig};

const LN_EPS: f64 = 1e-5;
/// Prior probability that sets the initial class-logit bias.
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Deform {
    offsets: Linear,
    weights: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Deform,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: Norm,
    cross: Deform,
    norm3: Norm,
    ffn1: Linear,
    ffn2: Linear,
    class: Linear,
    bbox: [Linear; 3],
}

/// Everything a forward pass reads besides the parameters.
pub struct ForwardCtx<'a> {
    /// `known[c]` enables class column `c` for query selection.
    pub known: &'a [bool],
    pub etop: &'a EtopConfig,
    /// Objectness statistics and their factor; identity statistics are used
    /// when absent.
    pub stats: Option<(&'a GaussianStats, &'a Cholesky)>,
}

pub struct LayerVars {
    pub logits: Var,
    pub boxes: Var,
    pub embeddings: Var,
    pub distance_sq: Option<Var>,
    pub objectness: Option<Var>,
}

pub struct EncoderVars {
    /// `tokens x (C + 1)`.
    pub logits: Var,
    /// `tokens x 4`.
    pub boxes: Var,
}

pub struct ForwardVars {
    pub layers: Vec<LayerVars>,
    pub encoder: Option<EncoderVars>,
    pub origins: Vec<Origin>,
    pub selected: Vec<SelectedProposal>,
    /// Reference boxes each decoder layer read as constants, `N x 4` flat.
    pub ref_boxes: Vec<Vec<f64>>,
}

/// The values a forward pass treats as constants: the selected proposals
/// and every layer's reference boxes. Replaying them holds the
/// stop-gradient points fixed, so finite differences see the same function
/// the reverse pass differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct Pinned {
    pub selected: Vec<SelectedProposal>,
    pub ref_boxes: Vec<Vec<f64>>,
}

impl ForwardVars {
    pub fn pinned(&self) -> Pinned {
        Pinned {
            selected: self.selected.clone(),
            ref_boxes: self.ref_boxes.clone(),
        }
    }
}

/// Detector parameters plus the layout needed to run them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    tdqi: TdqiConfig,
    params: ParamStore<T>,
    backbone: [Linear; 3],
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    enc_output: Linear,
    enc_output_norm: Norm,
    enc_class: Linear,
    enc_box: [Linear; 3],
    query_content: Option<usize>,
    query_ref: Option<usize>,
    selected_content: Option<usize>,
    query_pos: [Linear; 2],
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
}

struct Builder<'a, T: Real> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        let w = glorot(&mut self.rng, i, o);
        Linear {
            w: self.params.add(&format!("{name}.weight"), w),
            b: self.params.add(&format!("{name}.bias"), Tensor::zeros(&[o])),
        }
    }

    fn zero_linear(&mut self, name: &str, i: usize, o: usize, bias: Tensor<T>) -> Linear {
        assert_eq!(bias.len(), o);
        Linear {
            w: self.params.add(&format!("{name}.weight"), Tensor::zeros(&[i, o])),
            b: self.params.add(&format!("{name}.bias"), bias),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.params.add(&format!("{name}.gamma"), Tensor::filled(&[d], T::one())),
            b: self.params.add(&format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    /// Three-layer MLP whose last layer starts at zero.
    fn box_mlp(&mut self, name: &str, d: usize) -> [Linear; 3] {
        [
            self.linear(&format!("{name}.0"), d, d),
            self.linear(&format!("{name}.1"), d, d),
            self.zero_linear(&format!("{name}.2"), d, 4, Tensor::zeros(&[4])),
        ]
    }

    fn deform(&mut self, name: &str, d: usize, heads: usize, points: usize, offset_bias: Tensor<T>) -> Deform {
        let hp = heads * points;
        Deform {
            offsets: self.zero_linear(&format!("{name}.offsets"), d, hp * 2, offset_bias),
            weights: self.zero_linear(&format!("{name}.weights"), d, hp, Tensor::zeros(&[hp])),
            value: self.linear(&format!("{name}.value"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }
}

/// Offsets fanning out from the token in one direction per head, in feature
/// pixels.
fn grid_offsets<T: Real>(heads: usize, points: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(heads * points * 2);
    for h in 0..heads {
        let theta = 2.0 * core::f64::consts::PI * h as f64 / heads as f64;
        let (s, c) = Float::sin_cos(theta);
        let scale = Float::abs(c).max(Float::abs(s));
        for p in 0..points {
            out.push(T::of(c / scale * (p + 1) as f64));
            out.push(T::of(s / scale * (p + 1) as f64));
        }
    }
    Tensor::new(&[heads * points * 2], out)
}

/// Sine features of each column of `values` (`rows x k`), `feats` per column.
fn sine_embed<T: Real>(values: &[f64], k: usize, feats: usize) -> Tensor<T> {
    let rows = values.len() / k;
    let mut out = Vec::with_capacity(rows * k * feats);
    for r in 0..rows {
        for c in 0..k {
            let x = values[r * k + c] * 2.0 * core::f64::consts::PI;
            for i in 0..feats / 2 {
                let dim_t = Float::powf(10000.0f64, (2 * i) as f64 / feats as f64);
                let (s, co) = Float::sin_cos(x / dim_t);
                out.push(T::of(s));
                out.push(T::of(co));
            }
        }
    }
    Tensor::new(&[rows, k * feats], out)
}

impl<T: Real> Model<T> {
    /// Deterministic initialisation from `seed`.
    pub fn new(cfg: &ModelConfig, tdqi: &TdqiConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model configuration");
        assert_eq!(tdqi.total(), cfg.num_queries, "query split must sum to num_queries");
        let d = cfg.embed_dim;
        let k = cfg.head_width();
        let mut params = ParamStore::default();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let chans = [1, cfg.backbone_channels[0], cfg.backbone_channels[1], d];
        let mut backbone = [Linear { w: 0, b: 0 }; 3];
        for (i, slot) in backbone.iter_mut().enumerate() {
            let w = he_conv(&mut b.rng, chans[i + 1], chans[i] * 9);
            *slot = Linear {
                w: b.params.add(&format!("backbone.conv{i}.weight"), w),
                b: b.params.add(&format!("backbone.conv{i}.bias"), Tensor::zeros(&[chans[i + 1]])),
            };
        }
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let name = format!("encoder.{l}");
                EncoderLayer {
                    norm1: b.norm(&format!("{name}.norm1"), d),
                    attn: b.deform(&format!("{name}.attn"), d, cfg.heads, cfg.points, grid_offsets(cfg.heads, cfg.points)),
                    norm2: b.norm(&format!("{name}.norm2"), d),
                    ffn1: b.linear(&format!("{name}.ffn1"), d, cfg.ffn_dim),
                    ffn2: b.linear(&format!("{name}.ffn2"), cfg.ffn_dim, d),
                }
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", d);
        let enc_output = b.linear("proposal.output", d, d);
        let enc_output_norm = b.norm("proposal.output_norm", d);
        let bias = T::of(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        let enc_class = {
            let w = glorot(&mut b.rng, d, k);
            Linear {
                w: b.params.add("proposal.class.weight", w),
                b: b.params.add("proposal.class.bias", Tensor::filled(&[k], bias)),
            }
        };
        let enc_box = b.box_mlp("proposal.box", d);

        let n_lq = tdqi.learnable();
        let (query_content, query_ref) = if n_lq > 0 {
            let content = Tensor::from_fn(&[n_lq, d], |_| T::of(rand::Rng::gen_range(&mut b.rng, -1.0..1.0)));
            (
                Some(b.params.add("query.content", content)),
                Some(b.params.add("query.ref_logits", learnable_ref_logits(n_lq))),
            )
        } else {
            (None, None)
        };
        let selected_content = if tdqi.mixed_selection && tdqi.selected() > 0 {
            let content = Tensor::from_fn(&[tdqi.selected(), d], |_| T::of(rand::Rng::gen_range(&mut b.rng, -1.0..1.0)));
            Some(b.params.add("query.selected_content", content))
        } else {
            None
        };
        let query_pos = [b.linear("decoder.query_pos.0", 2 * d, d), b.linear("decoder.query_pos.1", d, d)];
        let hp2 = cfg.heads * cfg.points * 2;
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                let class_w = glorot(&mut b.rng, d, k);
                DecoderLayer {
                    norm1: b.norm(&format!("{name}.norm1"), d),
                    q: b.linear(&format!("{name}.self_q"), d, d),
                    k: b.linear(&format!("{name}.self_k"), d, d),
                    v: b.linear(&format!("{name}.self_v"), d, d),
                    o: b.linear(&format!("{name}.self_out"), d, d),
                    norm2: b.norm(&format!("{name}.norm2"), d),
                    cross: b.deform(&format!("{name}.cross"), d, cfg.heads, cfg.points, Tensor::zeros(&[hp2])),
                    norm3: b.norm(&format!("{name}.norm3"), d),
                    ffn1: b.linear(&format!("{name}.ffn1"), d, cfg.ffn_dim),
                    ffn2: b.linear(&format!("{name}.ffn2"), cfg.ffn_dim, d),
                    class: Linear {
                        w: b.params.add(&format!("{name}.class.weight"), class_w),
                        b: b.params.add(&format!("{name}.class.bias"), Tensor::filled(&[k], bias)),
                    },
                    bbox: b.box_mlp(&format!("{name}.box"), d),
                }
            })
            .collect();
        let decoder_norm = b.norm("decoder.norm", d);
        Self {
            cfg: cfg.clone(),
            tdqi: tdqi.clone(),
            params,
            backbone,
            encoder,
            encoder_norm,
            enc_output,
            enc_output_norm,
            enc_class,
            enc_box,
            query_content,
            query_ref,
            selected_content,
            query_pos,
            decoder,
            decoder_norm,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tdqi(&self) -> &TdqiConfig {
        &self.tdqi
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameter ids of decoder layer `l` (0-based), excluding shared modules.
    pub fn decoder_layer_param_ids(&self, l: usize) -> Vec<usize> {
        let prefix = format!("decoder.{l}.");
        (0..self.params.len()).filter(|&i| self.params.names()[i].starts_with(&prefix)).collect()
    }

    /// Puts every parameter on the graph, as trainable leaves or constants.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn lin(g: &mut Graph<T>, pv: &[Var], x: Var, l: Linear) -> Var {
        g.linear(x, pv[l.w], Some(pv[l.b]))
    }

    fn ln(g: &mut Graph<T>, pv: &[Var], x: Var, n: Norm) -> Var {
        g.layer_norm(x, pv[n.g], pv[n.b], LN_EPS)
    }

    fn mlp3(g: &mut Graph<T>, pv: &[Var], x: Var, m: &[Linear; 3]) -> Var {
        let h = Self::lin(g, pv, x, m[0]);
        let h = g.relu(h);
        let h = Self::lin(g, pv, h, m[1]);
        let h = g.relu(h);
        Self::lin(g, pv, h, m[2])
    }

    fn ffn(g: &mut Graph<T>, pv: &[Var], x: Var, norm: Norm, f1: Linear, f2: Linear) -> Var {
        let h = Self::ln(g, pv, x, norm);
        let h = Self::lin(g, pv, h, f1);
        let h = g.relu(h);
        let h = Self::lin(g, pv, h, f2);
        g.add(x, h)
    }

    /// Deformable read-out of `memory` for queries `query` at locations
    /// `base + offsets * scale` (elementwise, both `n x (heads*points*2)`).
    #[allow(clippy::too_many_arguments)]
    fn deform_block(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        query: Var,
        value_src: Var,
        a: &Deform,
        base: Tensor<T>,
        scale: Tensor<T>,
    ) -> Var {
        let (fh, fw) = self.cfg.feature_size();
        let off = Self::lin(g, pv, query, a.offsets);
        let scale = g.constant(scale);
        let off = g.mul(off, scale);
        let base = g.constant(base);
        let locs = g.add(off, base);
        let w = Self::lin(g, pv, query, a.weights);
        let w = g.softmax_groups(w, self.cfg.points);
        let value = Self::lin(g, pv, value_src, a.value);
        let s = g.deform_attention(value, fh, fw, locs, w, self.cfg.heads, self.cfg.points);
        Self::lin(g, pv, s, a.out)
    }

    /// Backbone feature map as `tokens x d`.
    pub fn backbone_forward(&self, g: &mut Graph<T>, pv: &[Var], image: Var) -> Var {
        let mut x = image;
        for (i, l) in self.backbone.iter().enumerate() {
            x = g.conv2d(x, pv[l.w], pv[l.b], 3, self.cfg.backbone_strides[i], 1);
            if i + 1 < self.backbone.len() {
                x = g.relu(x);
            }
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]]);
        g.transpose(flat)
    }

    /// Normalised centre `(x, y)` of each feature token.
    pub fn token_centers(&self) -> Vec<[f64; 2]> {
        let (fh, fw) = self.cfg.feature_size();
        let mut out = Vec::with_capacity(fh * fw);
        for i in 0..fh {
            for j in 0..fw {
                out.push([(j as f64 + 0.5) / fw as f64, (i as f64 + 0.5) / fh as f64]);
            }
        }
        out
    }

    /// Encoder over backbone tokens; returns the memory `tokens x d`.
    pub fn encoder_forward(&self, g: &mut Graph<T>, pv: &[Var], tokens: Var) -> Var {
        let (fh, fw) = self.cfg.feature_size();
        let d = self.cfg.embed_dim;
        let centers = self.token_centers();
        let flat: Vec<f64> = centers.iter().flat_map(|c| *c).collect();
        let pos = g.constant(sine_embed(&flat, 2, d / 2));
        let hp = self.cfg.heads * self.cfg.points;
        let n = centers.len();
        let base = Tensor::from_fn(&[n, hp * 2], |i| T::of(centers[i / (hp * 2)][i % 2]));
        let scale = Tensor::from_fn(&[n, hp * 2], |i| T::of(if i % 2 == 0 { 1.0 / fw as f64 } else { 1.0 / fh as f64 }));
        let mut x = tokens;
        for layer in &self.encoder {
            let xn = Self::ln(g, pv, x, layer.norm1);
            let q = g.add(xn, pos);
            let a = self.deform_block(g, pv, q, xn, &layer.attn, base.clone(), scale.clone());
            x = g.add(x, a);
            x = Self::ffn(g, pv, x, layer.norm2, layer.ffn1, layer.ffn2);
        }
        Self::ln(g, pv, x, self.encoder_norm)
    }

    /// Anchor boxes of the encoder tokens.
    pub fn token_anchors(&self) -> Vec<[f64; 4]> {
        let s = self.cfg.anchor_size;
        self.token_centers().iter().map(|c| [c[0], c[1], s, s]).collect()
    }

    /// Encoder-side proposal heads: projected tokens, class logits and boxes.
    pub fn encoder_proposals(&self, g: &mut Graph<T>, pv: &[Var], memory: Var) -> (Var, EncoderVars) {
        let proj = Self::lin(g, pv, memory, self.enc_output);
        let proj = Self::ln(g, pv, proj, self.enc_output_norm);
        let logits = Self::lin(g, pv, proj, self.enc_class);
        let delta = Self::mlp3(g, pv, proj, &self.enc_box);
        let anchors: Vec<f64> = self.token_anchors().iter().flat_map(|a| *a).collect();
        let n = anchors.len() / 4;
        let anchor_logits = g.constant(box_logits(&Tensor::<T>::from_f64(&[n, 4], &anchors)));
        let z = g.add(anchor_logits, delta);
        let z = self.clamp_logits(g, z);
        let boxes = g.sigmoid(z);
        (proj, EncoderVars { logits, boxes })
    }

    /// Keeps box logits where their sigmoid stays strictly inside (0, 1).
    fn clamp_logits(&self, g: &mut Graph<T>, z: Var) -> Var {
        let hi = logit(1.0 - BOX_EPS);
        let shape = g.shape(z).to_vec();
        let lo_t = g.constant(Tensor::filled(&shape, T::of(-hi)));
        let hi_t = g.constant(Tensor::filled(&shape, T::of(hi)));
        let z = g.maximum(z, lo_t);
        g.minimum(z, hi_t)
    }

    fn decoder_queries(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        memory: Var,
        known: &[bool],
        pinned: Option<&Pinned>,
    ) -> (QueryBatch, Option<EncoderVars>, Vec<SelectedProposal>) {
        let learn_content = self.query_content.map(|i| pv[i]);
        let learn_ref = self.query_ref.map(|i| pv[i]);
        if self.tdqi.bypass {
            let n = self.tdqi.learnable();
            let batch = QueryBatch {
                content: learn_content.expect("bypass keeps learnable queries"),
                ref_logits: learn_ref.expect("bypass keeps learnable queries"),
                origins: vec![Origin::Learnable; n],
            };
            return (batch, None, Vec::new());
        }
        let k = self.tdqi.selected();
        let (sel_content, enc, selected) = if k > 0 {
            let (proj, enc) = self.encoder_proposals(g, pv, memory);
            if let Some(p) = pinned {
                let idx: Vec<usize> = p.selected.iter().map(|s| s.token_index).collect();
                let content = match self.selected_content {
                    Some(i) => pv[i],
                    None => g.gather_rows(proj, &idx),
                };
                let batch = init_queries(g, &p.selected, Some(content), learn_content, learn_ref).expect("query layout checked by config");
                return (batch, Some(enc), p.selected.clone());
            }
            let width = self.cfg.head_width();
            let scores: Vec<f64> = g.value(enc.logits).data().iter().map(|&x| sigmoid(x.as_f64())).collect();
            let mut columns = vec![false; width];
            for (c, &on) in known.iter().enumerate().take(self.cfg.num_classes) {
                columns[c] = on;
            }
            let picks = query_select_masked(&scores, width, k, &columns).expect("selection size checked by config");
            let idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
            let boxes = g.value(enc.boxes).clone();
            let proj_v = g.value(proj).clone();
            let selected: Vec<SelectedProposal> = picks
                .iter()
                .map(|&(t, score)| {
                    let b = boxes.row(t);
                    SelectedProposal {
                        token_index: t,
                        score,
                        bbox: [b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64()],
                        content: proj_v.row(t).iter().map(|x| x.as_f64()).collect(),
                    }
                })
                .collect();
            let content = match self.selected_content {
                Some(i) => pv[i],
                None => g.gather_rows(proj, &idx),
            };
            (Some(content), Some(enc), selected)
        } else {
            (None, None, Vec::new())
        };
        let batch = init_queries(g, &selected, sel_content, learn_content, learn_ref).expect("query layout checked by config");
        (batch, enc, selected)
    }

    /// Full forward pass for one `1 x H x W` image.
    pub fn forward(&self, g: &mut Graph<T>, pv: &[Var], image: &Tensor<T>, ctx: &ForwardCtx) -> ForwardVars {
        self.forward_pinned(g, pv, image, ctx, None)
    }

    /// [`Model::forward`] with the constant inputs replayed from `pinned`
    /// instead of recomputed from values.
    pub fn forward_pinned(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        image: &Tensor<T>,
        ctx: &ForwardCtx,
        pinned: Option<&Pinned>,
    ) -> ForwardVars {
        assert_eq!(
            image.shape(),
            &[1, self.cfg.image_height, self.cfg.image_width],
            "image does not match the configured size"
        );
        let img = g.constant(image.clone());
        let tokens = self.backbone_forward(g, pv, img);
        let memory = self.encoder_forward(g, pv, tokens);
        let (queries, encoder, selected) = self.decoder_queries(g, pv, memory, ctx.known, pinned);
        let (layers, ref_boxes) = self.decoder_forward(g, pv, memory, &queries, ctx, pinned.map(|p| &p.ref_boxes[..]));
        ForwardVars {
            layers,
            encoder,
            origins: queries.origins,
            selected,
            ref_boxes,
        }
    }

    fn decoder_forward(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        memory: Var,
        queries: &QueryBatch,
        ctx: &ForwardCtx,
        pinned: Option<&[Vec<f64>]>,
    ) -> (Vec<LayerVars>, Vec<Vec<f64>>) {
        let d = self.cfg.embed_dim;
        let n_layers = self.decoder.len();
        let obj_mask = objectness_layer_mask(ctx.etop, n_layers);
        let frozen = frozen_box_mask(ctx.etop, n_layers);
        let identity;
        let (stats, factor) = match ctx.stats {
            Some(s) => s,
            None => {
                let st = GaussianStats::new(d, 0.1, 0.0);
                let f = st.factor().expect("identity covariance");
                identity = (st, f);
                (&identity.0, &identity.1)
            }
        };
        let hp = self.cfg.heads * self.cfg.points;
        let mut x = queries.content;
        let mut ref_logits = queries.ref_logits;
        let mut out = Vec::with_capacity(n_layers);
        let mut refs = Vec::with_capacity(n_layers);
        for (l, layer) in self.decoder.iter().enumerate() {
            let ref_box: Vec<f64> = match pinned {
                Some(p) => p[l].clone(),
                None => g.value(ref_logits).data().iter().map(|&z| sigmoid(z.as_f64())).collect(),
            };
            let n = ref_box.len() / 4;
            let sine = g.constant(sine_embed(&ref_box, 4, d / 2));
            let qp = Self::lin(g, pv, sine, self.query_pos[0]);
            let qp = g.relu(qp);
            let qpos = Self::lin(g, pv, qp, self.query_pos[1]);

            let xn = Self::ln(g, pv, x, layer.norm1);
            let qk = g.add(xn, qpos);
            let q = Self::lin(g, pv, qk, layer.q);
            let k = Self::lin(g, pv, qk, layer.k);
            let v = Self::lin(g, pv, xn, layer.v);
            let a = g.attention(q, k, v, self.cfg.heads);
            let a = Self::lin(g, pv, a, layer.o);
            x = g.add(x, a);

            let xn = Self::ln(g, pv, x, layer.norm2);
            let qc = g.add(xn, qpos);
            let points = self.cfg.points as f64;
            let base = Tensor::from_fn(&[n, hp * 2], |i| T::of(ref_box[(i / (hp * 2)) * 4 + i % 2]));
            let scale = Tensor::from_fn(&[n, hp * 2], |i| T::of(ref_box[(i / (hp * 2)) * 4 + 2 + i % 2] * 0.5 / points));
            let c = self.deform_block(g, pv, qc, memory, &layer.cross, base, scale);
            x = g.add(x, c);
            x = Self::ffn(g, pv, x, layer.norm3, layer.ffn1, layer.ffn2);

            let emb = Self::ln(g, pv, x, self.decoder_norm);
            let logits = Self::lin(g, pv, emb, layer.class);
            let boxes = if frozen[l] {
                g.sigmoid(ref_logits)
            } else {
                let delta = Self::mlp3(g, pv, emb, &layer.bbox);
                let z = g.add(ref_logits, delta);
                let z = self.clamp_logits(g, z);
                g.sigmoid(z)
            };
            let (distance_sq, objectness) = if obj_mask[l] {
                let src = if ctx.etop.detach_objectness { g.detach(emb) } else { emb };
                let d2 = g.mahalanobis_sq(src, &stats.mean, factor);
                let neg = g.neg(d2);
                (Some(d2), Some(g.exp(neg)))
            } else {
                (None, None)
            };
            ref_logits = match pinned {
                Some(p) if l + 1 < n_layers => {
                    g.constant(box_logits(&Tensor::<T>::from_f64(&[n, 4], &p[l + 1])))
                }
                _ => g.constant(box_logits(g.value(boxes))),
            };
            refs.push(ref_box);
            out.push(LayerVars {
                logits,
                boxes,
                embeddings: emb,
                distance_sq,
                objectness,
            });
        }
        (out, refs)
    }

    /// Value-level outputs of a forward pass.
    pub fn layer_outputs(g: &Graph<T>, vars: &ForwardVars) -> LayerOutputs<T> {
        LayerOutputs {
            layers: vars
                .layers
                .iter()
                .map(|l| LayerOutput {
                    class_logits: g.value(l.logits).clone(),
                    boxes: g.value(l.boxes).clone(),
                    embeddings: g.value(l.embeddings).clone(),
                    distance_sq: l.distance_sq.map(|v| g.value(v).clone()),
                    objectness: l.objectness.map(|v| g.value(v).clone()),
                })
                .collect(),
            origins: vars.origins.clone(),
        }
    }

    /// Inference-only forward returning value-level outputs.
    pub fn infer(&self, image: &Tensor<T>, ctx: &ForwardCtx) -> LayerOutputs<T> {
        let mut g = Graph::new();
        let pv = self.register(&mut g, false);
        let vars = self.forward(&mut g, &pv, image, ctx);
        Self::layer_outputs(&g, &vars)
    }
}

/// Learnable reference boxes: centres on an evenly spaced logit grid,
/// `w = h = 0.1`.
fn learnable_ref_logits<T: Real>(n: usize) -> Tensor<T> {
    let side = (1..).find(|s| s * s >= n).unwrap_or(1);
    let grid = |i: usize| {
        if side == 1 {
            0.0
        } else {
            -2.5 + 5.0 * i as f64 / (side - 1) as f64
        }
    };
    let wh = logit(0.1);
    let mut data = Vec::with_capacity(n * 4);
    for q in 0..n {
        data.push(T::of(grid(q % side)));
        data.push(T::of(grid(q / side)));
        data.push(T::of(wh));
        data.push(T::of(wh));
    }
    Tensor::new(&[n, 4], data)
}
