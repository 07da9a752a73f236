use crate::error::{Error, Result};
use crate::linalg::{softmax_in_place, softmax_rows, Matrix, RngStream};
use crate::uniattn::CompensationSet;

use super::cache::{KVCache, LayerCache};
use super::config::{LayerRole, ModelConfig, Positional, VariantSpec};
use super::ops::{apply_rope, rms_norm, silu};
use super::trace::{ForwardTrace, LayerTrace};
use super::weights::Weights;

/// Config, parameters and (for compensated UniAttn) the `W_c` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
    pub compensation: Option<CompensationSet>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `seq x vocab`
    pub logits: Matrix,
    pub trace: Option<ForwardTrace>,
    pub cache: KVCache,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnTape {
    pub xn: Matrix,
    pub inv_rms: Vec<f64>,
    /// Post-rotary queries, absent when probabilities are reused.
    pub q: Option<Matrix>,
    /// Post-rotary keys attended over, absent when probabilities are reused.
    pub k: Option<Matrix>,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub concat: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnTape {
    pub xn: Matrix,
    pub inv_rms: Vec<f64>,
    pub gate: Matrix,
    pub up: Matrix,
    pub act: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerTape {
    pub role: LayerRole,
    pub x_in: Matrix,
    pub attn: Option<AttnTape>,
    pub x_mid: Matrix,
    pub ffn: FfnTape,
    pub x_out: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct Tape {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTape>,
    pub final_xn: Matrix,
    pub final_inv_rms: Vec<f64>,
    pub logits: Matrix,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        weights: Weights,
        compensation: Option<CompensationSet>,
    ) -> Result<Self> {
        let model = Self { config, weights, compensation };
        model.validate()?;
        Ok(model)
    }

    /// Seeded Gaussian init; compensated UniAttn starts from zero `W_c`.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let weights = Weights::init(&config, rng)?;
        let compensation = match &config.variant {
            VariantSpec::UniAttn { compensated: true, .. } => Some(CompensationSet::zeros(&config)),
            _ => None,
        };
        Self::new(config, weights, compensation)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.weights.check_shapes(&self.config)?;
        let wants = matches!(self.config.variant, VariantSpec::UniAttn { compensated: true, .. });
        match (&self.compensation, wants) {
            (Some(c), true) => c.validate_for(&self.config),
            (None, false) => Ok(()),
            (None, true) => Err(Error::Config("variant requires compensation matrices".into())),
            (Some(_), false) => {
                Err(Error::Config("compensation given for a variant without W_c".into()))
            }
        }
    }

    /// Same weights under a different variant; `compensation` must match it.
    pub fn with_variant(
        &self,
        variant: VariantSpec,
        compensation: Option<CompensationSet>,
    ) -> Result<Model> {
        Model::new(self.config.with_variant(variant), self.weights.clone(), compensation)
    }

    pub fn forward(&self, tokens: &[usize], trace: bool) -> Result<ForwardOutput> {
        let tape = self.forward_tape(tokens)?;
        let cache = self.cache_from_tape(&tape);
        let trace = trace.then(|| trace_from_tape(&tape));
        Ok(ForwardOutput { logits: tape.logits, trace, cache })
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(self.forward_tape(tokens)?.logits)
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::shape("forward", "empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::shape(
                "forward",
                format!("{} tokens exceed max_seq {}", tokens.len(), self.config.max_seq),
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::shape(
                "forward",
                format!("token {t} outside vocabulary of {}", self.config.vocab_size),
            ));
        }
        Ok(())
    }

    pub(crate) fn forward_tape(&self, tokens: &[usize]) -> Result<Tape> {
        self.validate()?;
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let roles = cfg.roles();
        let mut x = Matrix::from_fn(tokens.len(), cfg.d_model, |i, j| self.weights.embed[(tokens[i], j)]);
        let mut layers: Vec<LayerTape> = Vec::with_capacity(cfg.n_layers);

        for (l, (&role, lw)) in roles.iter().zip(&self.weights.layers).enumerate() {
            let attn = match role {
                LayerRole::Dropped => None,
                _ => {
                    let (xn, inv_rms) = rms_norm(&x, &lw.attn_norm, cfg.norm_eps);
                    let (q, k, v, probs) = match role {
                        LayerRole::Full => {
                            let q = self.rotate(xn.matmul(&lw.wq)?, 0);
                            let k = self.rotate(xn.matmul(&lw.wk)?, 0);
                            let v = xn.matmul(&lw.wv)?;
                            let probs = self.attention_probs(&q, &k)?;
                            (Some(q), Some(k), v, probs)
                        }
                        LayerRole::SharedKv { bottom } => {
                            let src = layers[bottom].attn.as_ref().expect("bottom layer has attention");
                            let q = self.rotate(xn.matmul(&lw.wq)?, 0);
                            let k = src.k.clone().expect("bottom layer has keys");
                            let probs = self.attention_probs(&q, &k)?;
                            (Some(q), Some(k), src.v.clone(), probs)
                        }
                        LayerRole::SharedProbs { bottom } => {
                            let src = layers[bottom].attn.as_ref().expect("bottom layer has attention");
                            (None, None, xn.matmul(&lw.wv)?, src.probs.clone())
                        }
                        LayerRole::Dropped => unreachable!(),
                    };
                    let concat = self.mix_values(&probs, &v)?;
                    Some(AttnTape { xn, inv_rms, q, k, v, probs, concat })
                }
            };

            let mut x_mid = x.clone();
            if let Some(a) = &attn {
                x_mid.add_assign(&a.concat.matmul(&lw.wo)?)?;
            }
            if let Some(wc) = self.compensation.as_ref().and_then(|c| c.get(l + 1)) {
                x_mid.add_assign(&x.matmul(wc)?)?;
            }

            let (fxn, f_inv) = rms_norm(&x_mid, &lw.ffn_norm, cfg.norm_eps);
            let gate = fxn.matmul(&lw.w_gate)?;
            let up = fxn.matmul(&lw.w_up)?;
            let act = gate.map(silu).hadamard(&up)?;
            let x_out = x_mid.add(&act.matmul(&lw.w_down)?)?;
            if !x_out.is_finite() {
                return Err(Error::NonFiniteActivation { layer: l + 1 });
            }

            let x_in = std::mem::replace(&mut x, x_out.clone());
            layers.push(LayerTape {
                role,
                x_in,
                attn,
                x_mid,
                ffn: FfnTape { xn: fxn, inv_rms: f_inv, gate, up, act },
                x_out,
            });
        }

        let (final_xn, final_inv_rms) = rms_norm(&x, &self.weights.final_norm, cfg.norm_eps);
        let logits = final_xn.matmul(&self.weights.unembed)?;
        Ok(Tape { tokens: tokens.to_vec(), layers, final_xn, final_inv_rms, logits })
    }

    fn rotate(&self, mut m: Matrix, first_pos: usize) -> Matrix {
        if self.config.positional == Positional::Rope {
            apply_rope(&mut m, self.config.d_head, first_pos, false);
        }
        m
    }

    /// Per query head `softmax(Q_h K_gᵀ / √d_k)` with a causal mask.
    fn attention_probs(&self, q: &Matrix, k: &Matrix) -> Result<Vec<Matrix>> {
        let dk = self.config.d_head;
        let scale = 1.0 / (dk as f64).sqrt();
        (0..self.config.n_heads)
            .map(|h| {
                let g = h / self.config.group_size();
                let qh = q.cols_range(h * dk, dk);
                let kg = k.cols_range(g * dk, dk);
                softmax_rows(&qh.matmul_t(&kg)?.scale(scale), true)
            })
            .collect()
    }

    /// Concatenates `P_h · V_g` over heads.
    fn mix_values(&self, probs: &[Matrix], v: &Matrix) -> Result<Matrix> {
        let dk = self.config.d_head;
        let mut concat = Matrix::zeros(v.rows(), self.config.d_model);
        for (h, p) in probs.iter().enumerate() {
            let g = h / self.config.group_size();
            concat.add_cols_range(h * dk, &p.matmul(&v.cols_range(g * dk, dk))?);
        }
        Ok(concat)
    }

    fn cache_from_tape(&self, tape: &Tape) -> KVCache {
        let layers = tape
            .layers
            .iter()
            .map(|lt| match &lt.attn {
                None => LayerCache::default(),
                Some(a) => LayerCache {
                    k: if lt.role.stores_k() { a.k.clone() } else { None },
                    v: if lt.role.stores_v() { Some(a.v.clone()) } else { None },
                },
            })
            .collect();
        KVCache { layers, len: tape.tokens.len() }
    }

    /// Appends one token to `cache` and returns its logits row.
    ///
    /// Softmax-reusing layers take the probability row their bottom layer
    /// computed for this same step.
    pub fn decode_step(&self, cache: &mut KVCache, token: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let cfg = &self.config;
        let roles = cfg.roles();
        self.check_cache(cache, &roles)?;
        if cache.len + 1 > cfg.max_seq {
            return Err(Error::shape("decode_step", format!("cache already holds {} tokens", cache.len)));
        }
        if token >= cfg.vocab_size {
            return Err(Error::shape("decode_step", format!("token {token} outside vocabulary")));
        }
        let pos = cache.len;
        let dk = cfg.d_head;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut x = Matrix::from_fn(1, cfg.d_model, |_, j| self.weights.embed[(token, j)]);
        let mut step_probs: Vec<Option<Vec<Vec<f64>>>> = vec![None; cfg.n_layers];

        for (l, (&role, lw)) in roles.iter().zip(&self.weights.layers).enumerate() {
            let mut x_mid = x.clone();
            if role != LayerRole::Dropped {
                let (xn, _) = rms_norm(&x, &lw.attn_norm, cfg.norm_eps);
                let (probs, v_src) = match role {
                    LayerRole::Full | LayerRole::SharedKv { .. } => {
                        let q = self.rotate(xn.matmul(&lw.wq)?, pos);
                        let kv_layer = match role {
                            LayerRole::SharedKv { bottom } => bottom,
                            _ => {
                                let k = self.rotate(xn.matmul(&lw.wk)?, pos);
                                let v = xn.matmul(&lw.wv)?;
                                let lc = &mut cache.layers[l];
                                lc.k = Some(lc.k.as_ref().expect("checked").vstack(&k)?);
                                lc.v = Some(lc.v.as_ref().expect("checked").vstack(&v)?);
                                l
                            }
                        };
                        let keys = cache.layers[kv_layer].k.as_ref().expect("checked");
                        let probs: Vec<Vec<f64>> = (0..cfg.n_heads)
                            .map(|h| {
                                let g = h / cfg.group_size();
                                let qh = &q.row(0)[h * dk..(h + 1) * dk];
                                let mut row: Vec<f64> = (0..keys.rows())
                                    .map(|t| {
                                        let kt = &keys.row(t)[g * dk..(g + 1) * dk];
                                        qh.iter().zip(kt).map(|(a, b)| a * b).sum::<f64>() * scale
                                    })
                                    .collect();
                                softmax_in_place(&mut row);
                                row
                            })
                            .collect();
                        (probs, kv_layer)
                    }
                    LayerRole::SharedProbs { bottom } => {
                        let v = xn.matmul(&lw.wv)?;
                        let lc = &mut cache.layers[l];
                        lc.v = Some(lc.v.as_ref().expect("checked").vstack(&v)?);
                        (step_probs[bottom].clone().expect("bottom computed this step"), l)
                    }
                    LayerRole::Dropped => unreachable!(),
                };
                let values = cache.layers[v_src].v.as_ref().expect("checked");
                let mut concat = Matrix::zeros(1, cfg.d_model);
                for (h, p) in probs.iter().enumerate() {
                    let g = h / cfg.group_size();
                    for (t, &w) in p.iter().enumerate() {
                        let vt = &values.row(t)[g * dk..(g + 1) * dk];
                        for (o, vv) in concat.row_mut(0)[h * dk..(h + 1) * dk].iter_mut().zip(vt) {
                            *o += w * vv;
                        }
                    }
                }
                x_mid.add_assign(&concat.matmul(&lw.wo)?)?;
                step_probs[l] = Some(probs);
            }
            if let Some(wc) = self.compensation.as_ref().and_then(|c| c.get(l + 1)) {
                x_mid.add_assign(&x.matmul(wc)?)?;
            }
            let (fxn, _) = rms_norm(&x_mid, &lw.ffn_norm, cfg.norm_eps);
            let act = fxn.matmul(&lw.w_gate)?.map(silu).hadamard(&fxn.matmul(&lw.w_up)?)?;
            x = x_mid.add(&act.matmul(&lw.w_down)?)?;
        }
        cache.len += 1;
        let (xf, _) = rms_norm(&x, &self.weights.final_norm, cfg.norm_eps);
        Ok(xf.matmul(&self.weights.unembed)?.into_data())
    }

    fn check_cache(&self, cache: &KVCache, roles: &[LayerRole]) -> Result<()> {
        let kvw = self.config.kv_width();
        if cache.layers.len() != roles.len() {
            return Err(Error::Config(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                roles.len()
            )));
        }
        for (i, (lc, role)) in cache.layers.iter().zip(roles).enumerate() {
            if lc.has_k() != role.stores_k() || lc.has_v() != role.stores_v() {
                return Err(Error::Config(format!("cache layout of layer {} does not match the variant", i + 1)));
            }
            for m in [lc.k.as_ref(), lc.v.as_ref()].into_iter().flatten() {
                if m.shape() != (cache.len, kvw) {
                    return Err(Error::Config(format!(
                        "cache block of layer {} is {:?}, expected ({}, {kvw})",
                        i + 1,
                        m.shape(),
                        cache.len
                    )));
                }
            }
        }
        Ok(())
    }
}

fn trace_from_tape(tape: &Tape) -> ForwardTrace {
    let layers = tape
        .layers
        .iter()
        .map(|lt| LayerTrace {
            x_in: lt.x_in.clone(),
            x_mid: lt.x_mid.clone(),
            probs: match (&lt.attn, lt.role.computes_softmax()) {
                (Some(a), true) => Some(a.probs.clone()),
                _ => None,
            },
            keys: lt.attn.as_ref().and_then(|a| a.k.clone()),
            values: lt.attn.as_ref().map(|a| a.v.clone()),
        })
        .collect();
    let final_hidden = tape.layers.last().expect("at least one layer").x_out.clone();
    ForwardTrace { layers, final_hidden }
}
