//! Context-gated video captioner.
//!
//! Per video: each feature stream is adapted (`tanh(linear)`) and refined by
//! its auxiliary head's hidden layer; the head also predicts multi-label
//! targets from the frame-averaged refined features. Per decoding step:
//!
//! ```text
//! e_i   = w . tanh(W h_{t-1} + U [a_i; m_i; o_i] + b),  alpha = softmax(e)
//! x_t   = sum_i alpha_i [a_i; m_i; o_i]
//! v_t   = CG_E([x_t; M_v; M_l]) * x_t
//! C_t   = CG_D([v_t; E(y_{t-1}); M_v; M_l]) * [v_t; E(y_{t-1})]
//! h_t   = LSTM(C_t, h_{t-1}),  p_t = softmax(V h_t + b_h)
//! ```
//!
//! and only afterwards the memories advance: `M_v <- GRU(v_t, M_v)`,
//! `M_l <- GRU(E(y_t), M_l)`, so the gates at step t see only past context.
//!
//! With heads disabled the adapted streams are used directly and no label
//! loss exists; with gates disabled every gate is the constant 1 and the
//! memories (which only feed the gates) are dropped.

use hrig_autodiff::nn::{lstm_cell, GruCell, Linear, LstmCell};
use hrig_autodiff::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::vocab::BOS;

/// Gate output biases start here, so fresh gates are mostly open
/// (sigmoid(2) = 0.88) and the gated model begins close to the ungated one.
pub const GATE_BIAS_INIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_m: usize,
    pub d_o: usize,
    /// hidden size d: adapters, heads, attention and decoder state
    pub hidden: usize,
    /// token embedding size e
    pub embed: usize,
    /// running memory size m
    pub memory: usize,
    pub vocab: usize,
    pub n_objects: usize,
    pub n_actions: usize,
    /// 0 disables the category head
    pub n_categories: usize,
    pub use_heads: bool,
    pub use_gates: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_a, self.d_m, self.d_o, self.hidden, self.embed, self.memory];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab < 5 {
            return Err(Error::Config(
                "vocabulary needs at least one word besides the reserved ids".into(),
            ));
        }
        if self.use_heads && (self.n_objects == 0 || self.n_actions == 0) {
            return Err(Error::Config(
                "auxiliary heads need object and action label spaces".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the coherent and auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub acl: f64,
    pub fcl: f64,
    pub mcl: f64,
    pub ocl: f64,
    pub c: f64,
    pub a: f64,
    pub o: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            acl: 0.01,
            fcl: 0.1,
            mcl: 0.01,
            ocl: 0.1,
            c: 0.5,
            a: 0.5,
            o: 0.5,
        }
    }
}

/// Multi-label supervision for the auxiliary heads, as 0/1 vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTargets {
    pub objects: Vec<f64>,
    pub actions: Vec<f64>,
    pub category: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Gates {
    enc_hidden: Linear,
    enc_out: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
    mem_v: GruCell,
    mem_l: GruCell,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    adapt: [Linear; 3],
    /// appearance (category), motion (action), object heads
    heads: [Option<Head>; 3],
    att_w: ParamId,
    att_u: Linear,
    att_v: ParamId,
    gates: Option<Gates>,
    embed: ParamId,
    lstm: LstmCell,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Per-video graph values shared by every decoding step.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// adapted streams, N x d each
    pub adapted: [Var; 3],
    /// refined streams (the adapted ones when heads are off)
    pub refined: [Var; 3],
    /// `[a; m; o]` per frame, N x 3d
    pub frames: Var,
    /// `U [a; m; o] + b`, N x d
    projected: Var,
    /// label logits: category, action, object
    pub label_logits: [Option<Var>; 3],
    pub n_frames: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub mem_v: Option<Var>,
    pub mem_l: Option<Var>,
    pub prev_embedding: Var,
}

/// Gate activations averaged over components; 1.0 when gates are off.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateMeans {
    pub encoder: f64,
    pub source: f64,
    pub target: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// 1 x vocab
    pub logits: Var,
    /// 1 x N
    pub alpha: Var,
    /// fused visual vector, 1 x 3d
    pub visual: Var,
    pub encoder_gate: Option<Var>,
    pub decoder_gate: Option<Var>,
    pub gates: GateMeans,
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub ah: Option<Var>,
    pub cl: Var,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    /// emitted ids, ending in EOS unless the length cap was hit
    pub tokens: Vec<usize>,
    /// probability of each emitted token
    pub confidence: Vec<f64>,
    pub gates: Vec<GateMeans>,
    pub alphas: Vec<Vec<f64>>,
}

fn mean_of(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.len() as f64
}

/// Lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Captioner {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = &config;
        let d = c.hidden;
        let adapt = [
            Linear::new(&mut p, "adapt.appearance", c.d_a, d, &mut rng)?,
            Linear::new(&mut p, "adapt.motion", c.d_m, d, &mut rng)?,
            Linear::new(&mut p, "adapt.object", c.d_o, d, &mut rng)?,
        ];
        let mut heads = [None; 3];
        if c.use_heads {
            let labels = [c.n_categories, c.n_actions, c.n_objects];
            for (k, name) in ["category", "action", "object"].into_iter().enumerate() {
                if labels[k] == 0 {
                    continue;
                }
                let hidden = Linear::new(&mut p, &format!("head.{name}.hidden"), d, d, &mut rng)?;
                let out = Linear::new(&mut p, &format!("head.{name}.out"), d, labels[k], &mut rng)?;
                heads[k] = Some(Head { hidden, out });
            }
        }
        let bound = 1.0 / (d as f64).sqrt();
        let att_w = p.add(
            "attention.w",
            Tensor::from_fn(&[d, d], |_| rng.random_range(-bound..bound)),
        )?;
        let att_u = Linear::new(&mut p, "attention.u", 3 * d, d, &mut rng)?;
        let att_v = p.add(
            "attention.v",
            Tensor::from_fn(&[d, 1], |_| rng.random_range(-bound..bound)),
        )?;
        let gates = if c.use_gates {
            let m = c.memory;
            Some(Gates {
                enc_hidden: Linear::new(&mut p, "gate.encoder.hidden", 3 * d + 2 * m, d, &mut rng)?,
                enc_out: Linear::new(&mut p, "gate.encoder.out", d, 3 * d, &mut rng)?,
                dec_hidden: Linear::new(&mut p, "gate.decoder.hidden", 3 * d + c.embed + 2 * m, d, &mut rng)?,
                dec_out: Linear::new(&mut p, "gate.decoder.out", d, 3 * d + c.embed, &mut rng)?,
                mem_v: GruCell::new(&mut p, "memory.visual", 3 * d, m, &mut rng)?,
                mem_l: GruCell::new(&mut p, "memory.language", c.embed, m, &mut rng)?,
            })
        } else {
            None
        };
        if let Some(gl) = &gates {
            for out in [gl.enc_out, gl.dec_out] {
                let bias = p.get_mut(out.bias);
                *bias = Tensor::filled(bias.shape(), GATE_BIAS_INIT);
            }
        }
        let embed = p.add(
            "embedding",
            Tensor::from_fn(&[c.vocab, c.embed], |_| rng.random_range(-0.1..0.1)),
        )?;
        let lstm = LstmCell::new(&mut p, "decoder", 3 * d + c.embed, d, &mut rng)?;
        let out = Linear::new(&mut p, "output", d, c.vocab, &mut rng)?;
        let layout = Layout {
            adapt,
            heads,
            att_w,
            att_u,
            att_v,
            gates,
            embed,
            lstm,
            out,
        };
        Ok(Self {
            config,
            params: p,
            layout,
        })
    }

    /// Rebuild from saved tensors; every parameter must be present.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(tensors)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn has_category_head(&self) -> bool {
        self.layout.heads[0].is_some()
    }

    pub fn encode(&self, g: &mut Graph, b: &Bound, vf: &VideoFeatures) -> Result<Encoded> {
        let c = &self.config;
        if vf.dims() != (c.d_a, c.d_m, c.d_o) {
            return Err(Error::Model(format!(
                "{}: feature dims {:?} do not match model ({}, {}, {})",
                vf.video_id,
                vf.dims(),
                c.d_a,
                c.d_m,
                c.d_o
            )));
        }
        let streams = [&vf.appearance, &vf.motion, &vf.object];
        let mut adapted = Vec::with_capacity(3);
        let mut refined = Vec::with_capacity(3);
        let mut label_logits = [None; 3];
        for k in 0..3 {
            let x = g.constant(streams[k].clone());
            let a = self.layout.adapt[k].forward(g, b, x)?;
            let a = g.tanh(a)?;
            adapted.push(a);
            let mut r = a;
            if let Some(head) = self.layout.heads[k] {
                let h = head.hidden.forward(g, b, a)?;
                r = g.tanh(h)?;
                let pooled = g.mean_rows(r)?;
                label_logits[k] = Some(head.out.forward(g, b, pooled)?);
            }
            refined.push(r);
        }
        let adapted: [Var; 3] = adapted.try_into().expect("three streams");
        let refined: [Var; 3] = refined.try_into().expect("three streams");
        let frames = g.concat_cols(&refined)?;
        let projected = self.layout.att_u.forward(g, b, frames)?;
        Ok(Encoded {
            adapted,
            refined,
            frames,
            projected,
            label_logits,
            n_frames: vf.frames(),
        })
    }

    pub fn initial_state(&self, g: &mut Graph, b: &Bound) -> Result<DecoderState> {
        let d = self.config.hidden;
        let m = self.config.memory;
        let gated = self.layout.gates.is_some();
        Ok(DecoderState {
            h: g.constant(Tensor::zeros(&[1, d])),
            c: g.constant(Tensor::zeros(&[1, d])),
            mem_v: gated.then(|| g.constant(Tensor::zeros(&[1, m]))),
            mem_l: gated.then(|| g.constant(Tensor::zeros(&[1, m]))),
            prev_embedding: g.lookup(b.var(self.layout.embed), BOS)?,
        })
    }

    /// Attention weights over frames and the pooled `[a; m; o]` vector.
    pub fn attend(&self, g: &mut Graph, b: &Bound, enc: &Encoded, h_prev: Var) -> Result<(Var, Var)> {
        let wh = g.matmul(h_prev, b.var(self.layout.att_w))?;
        let pre = g.add_row(enc.projected, wh)?;
        let act = g.tanh(pre)?;
        let energies = g.matmul(act, b.var(self.layout.att_v))?;
        let energies = g.reshape(energies, &[1, enc.n_frames])?;
        let alpha = g.softmax_rows(energies)?;
        let pooled = g.matmul(alpha, enc.frames)?;
        Ok((alpha, pooled))
    }

    /// One decoding step; updates `h` and `c` but not the memories.
    pub fn step(&self, g: &mut Graph, b: &Bound, enc: &Encoded, state: &mut DecoderState) -> Result<StepOutput> {
        let (alpha, pooled) = self.attend(g, b, enc, state.h)?;
        let mut gates = GateMeans {
            encoder: 1.0,
            source: 1.0,
            target: 1.0,
        };
        let (visual, fused, encoder_gate, decoder_gate) = match (self.layout.gates, state.mem_v, state.mem_l) {
            (Some(gl), Some(mv), Some(ml)) => {
                let enc_in = g.concat_cols(&[pooled, mv, ml])?;
                let hid = gl.enc_hidden.forward(g, b, enc_in)?;
                let hid = g.tanh(hid)?;
                let ge = gl.enc_out.forward(g, b, hid)?;
                let ge = g.sigmoid(ge)?;
                let visual = g.hadamard(ge, pooled)?;

                let dec_in = g.concat_cols(&[visual, state.prev_embedding, mv, ml])?;
                let hid = gl.dec_hidden.forward(g, b, dec_in)?;
                let hid = g.tanh(hid)?;
                let gd = gl.dec_out.forward(g, b, hid)?;
                let gd = g.sigmoid(gd)?;
                let both = g.concat_cols(&[visual, state.prev_embedding])?;
                let fused = g.hadamard(gd, both)?;

                let split = 3 * self.config.hidden;
                gates.encoder = mean_of(g.value(ge));
                let gdv = g.value(gd).data();
                gates.source = gdv[..split].iter().sum::<f64>() / split as f64;
                gates.target = gdv[split..].iter().sum::<f64>() / (gdv.len() - split) as f64;
                (visual, fused, Some(ge), Some(gd))
            }
            (None, _, _) => {
                let fused = g.concat_cols(&[pooled, state.prev_embedding])?;
                (pooled, fused, None, None)
            }
            _ => return Err(Error::Model("decoder state has no running memories".into())),
        };
        let (h, c) = lstm_cell(g, fused, state.h, state.c, self.layout.lstm.vars(b))?;
        state.h = h;
        state.c = c;
        let logits = self.layout.out.forward(g, b, h)?;
        Ok(StepOutput {
            logits,
            alpha,
            visual,
            encoder_gate,
            decoder_gate,
            gates,
        })
    }

    /// Feed `token` as y_t: advances the memories and sets the next input.
    pub fn advance(
        &self,
        g: &mut Graph,
        b: &Bound,
        state: &mut DecoderState,
        out: &StepOutput,
        token: usize,
    ) -> Result<()> {
        let emb = g.lookup(b.var(self.layout.embed), token)?;
        if let (Some(gl), Some(mv), Some(ml)) = (self.layout.gates, state.mem_v, state.mem_l) {
            state.mem_v = Some(gl.mem_v.forward(g, b, out.visual, mv)?);
            state.mem_l = Some(gl.mem_l.forward(g, b, emb, ml)?);
        }
        state.prev_embedding = emb;
        Ok(())
    }

    /// `L_CE + L_AH + L_CL` for one caption. `feed(teacher, logits)` picks
    /// the token fed back after each step.
    pub fn loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        vf: &VideoFeatures,
        tokens: &[usize],
        labels: Option<&LabelTargets>,
        w: &LossWeights,
        feed: &mut dyn FnMut(usize, &[f64]) -> usize,
    ) -> Result<LossParts> {
        if tokens.is_empty() {
            return Err(Error::Model("empty target sequence".into()));
        }
        let enc = self.encode(g, b, vf)?;
        let mut state = self.initial_state(g, b)?;
        let mut ce_terms = Vec::with_capacity(tokens.len());
        let mut alpha_terms = Vec::with_capacity(tokens.len());
        for &target in tokens {
            let out = self.step(g, b, &enc, &mut state)?;
            ce_terms.push(g.cross_entropy(out.logits, &[target])?);
            let column = g.reshape(out.alpha, &[enc.n_frames, 1])?;
            alpha_terms.push(g.l1_row_diff(column)?);
            let next = feed(target, g.value(out.logits).data());
            self.advance(g, b, &mut state, &out, next)?;
        }
        let ce = g.add_all(&ce_terms)?;

        let ah = if self.config.use_heads {
            let labels = labels.ok_or_else(|| Error::Model("auxiliary heads need label targets".into()))?;
            if labels.category.is_some() && enc.label_logits[0].is_none() {
                return Err(Error::Model(
                    "category targets supplied but the model has no category head".into(),
                ));
            }
            let mut terms = Vec::new();
            let parts = [
                (enc.label_logits[0], labels.category.as_deref(), w.c),
                (enc.label_logits[1], Some(labels.actions.as_slice()), w.a),
                (enc.label_logits[2], Some(labels.objects.as_slice()), w.o),
            ];
            for (logits, target, lambda) in parts {
                if let (Some(logits), Some(target)) = (logits, target) {
                    let bce = g.bce_with_logits(logits, target)?;
                    terms.push(g.scale(bce, lambda)?);
                }
            }
            if terms.is_empty() {
                None
            } else {
                Some(g.add_all(&terms)?)
            }
        } else {
            None
        };

        let steps = tokens.len() as f64;
        let mut cl_terms = Vec::with_capacity(4);
        for (k, lambda) in [w.fcl, w.mcl, w.ocl].into_iter().enumerate() {
            let phi = g.l1_row_diff(enc.refined[k])?;
            cl_terms.push(g.scale(phi, lambda * steps)?);
        }
        let phi_alpha = g.add_all(&alpha_terms)?;
        cl_terms.push(g.scale(phi_alpha, w.acl)?);
        let cl = g.add_all(&cl_terms)?;

        let total = match ah {
            Some(ah) => g.add_all(&[ce, ah, cl])?,
            None => g.add(ce, cl)?,
        };
        if !g.value(total).all_finite() {
            return Err(Error::NonFinite(format!("loss of {}", vf.video_id)));
        }
        Ok(LossParts { total, ce, ah, cl })
    }

    /// Argmax decoding until EOS or `max_len` tokens.
    pub fn greedy_decode(&self, vf: &VideoFeatures, max_len: usize) -> Result<Decoded> {
        let mut g = Graph::new();
        let b = g.bind(&self.params);
        let enc = self.encode(&mut g, &b, vf)?;
        let mut state = self.initial_state(&mut g, &b)?;
        let mut out = Decoded::default();
        for _ in 0..max_len {
            let step = self.step(&mut g, &b, &enc, &mut state)?;
            let logits = g.value(step.logits).data();
            let token = argmax(logits);
            let probs = hrig_autodiff::softmax(logits);
            out.tokens.push(token);
            out.confidence.push(probs[token]);
            out.gates.push(step.gates);
            out.alphas.push(g.value(step.alpha).data().to_vec());
            if token == crate::vocab::EOS {
                break;
            }
            self.advance(&mut g, &b, &mut state, &step, token)?;
        }
        Ok(out)
    }
}
