//! The full grounding + reconstruction network and its batched
//! forward/backward pass.
//!
//! Phrase encodings and proposal features are batch-normalized across the
//! batch when enabled, so the pass is organized in phases: encode all
//! phrases, normalize, score and reconstruct each phrase, then run the
//! backward phases in reverse. Per-phrase work runs in parallel over fixed
//! chunks whose gradient buffers are summed in chunk order, so results do not
//! depend on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_loss_backward, normalize_and_select, score_rows, score_rows_backward, AttentionNorm, AttentionOutput,
    AttentionParams, Phrase, ProposalSet, ScoreCache,
};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, BnCache, BnMode, EmbeddingTable, InitScheme, LstmCell, LstmStepCache};
use crate::numerics::{log_likelihood_from_logits, softmax_backward, Tensor};
use crate::reconstruction::{
    aggregate_visual, aggregate_visual_backward, decode_backward, decode_phrase_logits_cached, encode_visual_backward,
    encode_visual_cached, phrase_nll, phrase_nll_backward, targets_with_eos, DecodeCache, DecoderParams,
    RecEncoderParams,
};

/// Phrases per parallel work unit.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Reconstruction loss only.
    #[serde(rename = "unsup")]
    Unsupervised,
    /// `λ·L_att + L_rec`.
    #[serde(rename = "semi")]
    SemiSupervised,
    /// Attention loss only; the reconstruction branch is skipped.
    #[serde(rename = "full")]
    FullySupervised,
    /// Grounding only, no losses.
    #[serde(rename = "eval")]
    Eval,
}

impl Mode {
    pub fn uses_attention_loss(self) -> bool {
        matches!(self, Mode::SemiSupervised | Mode::FullySupervised)
    }

    pub fn uses_reconstruction(self) -> bool {
        matches!(self, Mode::Unsupervised | Mode::SemiSupervised)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unsupervised => "unsup",
            Mode::SemiSupervised => "semi",
            Mode::FullySupervised => "full",
            Mode::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsup" => Ok(Mode::Unsupervised),
            "semi" => Ok(Mode::SemiSupervised),
            "full" => Ok(Mode::FullySupervised),
            "eval" => Ok(Mode::Eval),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub share_embeddings: bool,
    pub batchnorm: bool,
    pub lstm_init_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            feature_dim: 0,
            embed_dim: 64,
            hidden_dim: 128,
            attention_dim: 128,
            share_embeddings: false,
            batchnorm: false,
            lstm_init_scale: 0.08,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < crate::layers::NUM_RESERVED {
            return Err(Error::Config("vocab_size must cover the reserved tokens".into()));
        }
        if !(self.lstm_init_scale > 0.0) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("invalid initialization or batchnorm constants".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Weight matrices, subject to weight decay.
    Weight,
    Bias,
    /// Batchnorm scale and shift.
    Norm,
    /// Running statistics; saved but never optimized.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: &'static str,
    pub group: &'static str,
    pub kind: ParamKind,
}

impl ParamMeta {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub enc_embed: EmbeddingTable,
    pub encoder: LstmCell,
    pub bn_phrase: BatchNorm,
    pub bn_visual: BatchNorm,
    pub attention: AttentionParams,
    pub rec_encoder: RecEncoderParams,
    /// `None` when the decoder reuses the encoder's table.
    pub dec_embed: Option<EmbeddingTable>,
    pub decoder: DecoderParams,
}

macro_rules! param_table {
    ($s:ident, $visit:ident, $f:ident, $($amp:tt)+) => {{
        use ParamKind::*;
        let mut $visit = |name, group, kind, t| $f(ParamMeta { name, group, kind }, t);
        $visit("enc_embed.weights", "embedding", Weight, $($amp)+ $s.enc_embed.weights);
        $visit("encoder.w_x", "encoder_lstm", Weight, $($amp)+ $s.encoder.w_x);
        $visit("encoder.w_h", "encoder_lstm", Weight, $($amp)+ $s.encoder.w_h);
        $visit("encoder.bias", "encoder_lstm", Bias, $($amp)+ $s.encoder.bias);
        $visit("bn_phrase.scale", "batchnorm", Norm, $($amp)+ $s.bn_phrase.scale);
        $visit("bn_phrase.shift", "batchnorm", Norm, $($amp)+ $s.bn_phrase.shift);
        $visit("bn_phrase.running_mean", "batchnorm", Buffer, $($amp)+ $s.bn_phrase.running_mean);
        $visit("bn_phrase.running_var", "batchnorm", Buffer, $($amp)+ $s.bn_phrase.running_var);
        $visit("bn_visual.scale", "batchnorm", Norm, $($amp)+ $s.bn_visual.scale);
        $visit("bn_visual.shift", "batchnorm", Norm, $($amp)+ $s.bn_visual.shift);
        $visit("bn_visual.running_mean", "batchnorm", Buffer, $($amp)+ $s.bn_visual.running_mean);
        $visit("bn_visual.running_var", "batchnorm", Buffer, $($amp)+ $s.bn_visual.running_var);
        $visit("attention.w_h", "attention", Weight, $($amp)+ $s.attention.w_h);
        $visit("attention.w_v", "attention", Weight, $($amp)+ $s.attention.w_v);
        $visit("attention.b1", "attention", Bias, $($amp)+ $s.attention.b1);
        $visit("attention.w2", "attention", Weight, $($amp)+ $s.attention.w2);
        $visit("attention.b2", "attention", Bias, $($amp)+ $s.attention.b2);
        $visit("rec_encoder.weight", "rec_encoder", Weight, $($amp)+ $s.rec_encoder.layer.weight);
        $visit("rec_encoder.bias", "rec_encoder", Bias, $($amp)+ $s.rec_encoder.layer.bias);
        if let Some(e) = $($amp)+ $s.dec_embed {
            $visit("dec_embed.weights", "embedding", Weight, $($amp)+ e.weights);
        }
        $visit("decoder.w_x", "decoder", Weight, $($amp)+ $s.decoder.cell.w_x);
        $visit("decoder.w_h", "decoder", Weight, $($amp)+ $s.decoder.cell.w_h);
        $visit("decoder.bias", "decoder", Bias, $($amp)+ $s.decoder.cell.bias);
        $visit("decoder.out_weight", "decoder", Weight, $($amp)+ $s.decoder.output.weight);
        $visit("decoder.out_bias", "decoder", Bias, $($amp)+ $s.decoder.output.bias);
    }};
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let enc_embed = EmbeddingTable::new(c.vocab_size, c.embed_dim, InitScheme::Xavier, &mut rng)?;
        let encoder = LstmCell::new(c.embed_dim, c.hidden_dim, c.lstm_init_scale, &mut rng);
        let attention = AttentionParams::new(c.hidden_dim, c.feature_dim, c.attention_dim, &mut rng);
        let rec_encoder = RecEncoderParams::new(c.feature_dim, c.embed_dim, &mut rng);
        let dec_embed = if c.share_embeddings {
            None
        } else {
            Some(EmbeddingTable::new(c.vocab_size, c.embed_dim, InitScheme::Xavier, &mut rng)?)
        };
        let decoder = DecoderParams::new(c.embed_dim, c.hidden_dim, c.vocab_size, c.lstm_init_scale, &mut rng);
        Ok(ModelParams {
            bn_phrase: BatchNorm::new(c.hidden_dim, c.bn_momentum, c.bn_eps),
            bn_visual: BatchNorm::new(c.feature_dim, c.bn_momentum, c.bn_eps),
            config,
            enc_embed,
            encoder,
            attention,
            rec_encoder,
            dec_embed,
            decoder,
        })
    }

    /// Gradient buffer with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            enc_embed: self.enc_embed.zeros_like(),
            encoder: self.encoder.zeros_like(),
            bn_phrase: self.bn_phrase.zeros_like(),
            bn_visual: self.bn_visual.zeros_like(),
            attention: self.attention.zeros_like(),
            rec_encoder: self.rec_encoder.zeros_like(),
            dec_embed: self.dec_embed.as_ref().map(EmbeddingTable::zeros_like),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(ParamMeta, &'a Tensor)) {
        param_table!(self, visit, f, &);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(ParamMeta, &'a mut Tensor)) {
        param_table!(self, visit, f, &mut);
    }

    pub fn tensors(&self) -> Vec<(ParamMeta, &Tensor)> {
        let mut out = Vec::new();
        self.visit(|m, t| out.push((m, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamMeta, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(|m, t| out.push((m, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|m, t| {
            if m.trainable() {
                n += t.len()
            }
        });
        n
    }

    pub fn dec_embed(&self) -> &EmbeddingTable {
        self.dec_embed.as_ref().unwrap_or(&self.enc_embed)
    }

    /// Adds `other` into `self` tensor by tensor.
    pub fn accumulate(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn zero(&mut self) {
        self.visit_mut(|_, t| t.fill(0.0));
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn commit_batchnorm(&mut self, result: &BatchResult) {
        if let Some((phrase, visual)) = &result.bn_caches {
            self.bn_phrase.update_running(phrase);
            self.bn_visual.update_running(visual);
        }
    }
}

/// One phrase with the proposals of its image.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub phrase: &'a Phrase,
    pub proposals: &'a ProposalSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mode: Mode,
    pub lambda: f64,
    pub att_norm: AttentionNorm,
}

impl Objective {
    pub fn eval() -> Self {
        Objective {
            mode: Mode::Eval,
            lambda: 0.0,
            att_norm: AttentionNorm::Batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub total: Option<f64>,
    pub l_att: Option<f64>,
    pub l_rec: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub losses: Losses,
    pub outputs: Vec<AttentionOutput>,
    /// `dL/dfeatures` per item, when requested.
    pub feature_grads: Option<Vec<Tensor>>,
    bn_caches: Option<(BnCache, BnCache)>,
}

struct Encoded {
    h: Vec<f64>,
    steps: Vec<LstmStepCache>,
}

struct Grounded {
    output: AttentionOutput,
    score_cache: ScoreCache,
    att_nll: Option<f64>,
    rec: Option<Reconstructed>,
}

struct Reconstructed {
    v_att: Vec<f64>,
    pre: Vec<f64>,
    logits: Vec<Vec<f64>>,
    targets: Vec<usize>,
    decode: DecodeCache,
    nll: f64,
}

impl ModelParams {
    fn encode_phrase(&self, phrase: &Phrase) -> Result<Encoded> {
        let inputs = phrase
            .tokens
            .iter()
            .map(|&t| self.enc_embed.lookup(t).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let (mut hs, steps) = self.encoder.run(&inputs)?;
        Ok(Encoded {
            h: hs.pop().expect("non-empty phrase"),
            steps,
        })
    }

    fn check_item(&self, item: &BatchItem) -> Result<()> {
        if item.proposals.feature_dim() != self.config.feature_dim {
            return Err(Error::dim(
                "model features",
                item.proposals.features.shape(),
                &[item.proposals.len(), self.config.feature_dim],
            ));
        }
        if let Some(t) = item.phrase.gt_attention {
            if t >= item.proposals.len() {
                return Err(Error::Index {
                    op: "gt_attention",
                    index: t,
                    len: item.proposals.len(),
                });
            }
        }
        Ok(())
    }

    fn ground_one(
        &self,
        item: &BatchItem,
        h: &[f64],
        features: &Tensor,
        mode: Mode,
    ) -> Result<Grounded> {
        let (scores, score_cache) = score_rows(&self.attention, h, features)?;
        let output = normalize_and_select(&scores)?;
        let att_nll = match (mode.uses_attention_loss(), item.phrase.gt_attention) {
            (true, Some(t)) => Some(log_likelihood_from_logits(&scores, t)?),
            _ => None,
        };
        let rec = if mode.uses_reconstruction() {
            let v_att = aggregate_visual(&output.weights, &item.proposals.features)?;
            let (v_prime, pre) = encode_visual_cached(&self.rec_encoder, &v_att)?;
            let (logits, decode) =
                decode_phrase_logits_cached(&self.decoder, self.dec_embed(), &v_prime, &item.phrase.tokens)?;
            let targets = targets_with_eos(&item.phrase.tokens);
            let nll = phrase_nll(&logits, &targets)?;
            Some(Reconstructed {
                v_att,
                pre,
                logits,
                targets,
                decode,
                nll,
            })
        } else {
            None
        };
        Ok(Grounded {
            output,
            score_cache,
            att_nll,
            rec,
        })
    }

    /// Forward pass over a batch. With `grads`, also backpropagates the
    /// objective and accumulates into it.
    pub fn run_batch(
        &self,
        items: &[BatchItem],
        objective: &Objective,
        bn_mode: BnMode,
        grads: Option<&mut ModelParams>,
        want_feature_grads: bool,
    ) -> Result<BatchResult> {
        if items.is_empty() {
            return Err(Error::pre("run_batch", "empty batch"));
        }
        for item in items {
            self.check_item(item)?;
        }
        let mode = objective.mode;
        let use_bn = self.config.batchnorm;

        // phase 1: phrase encodings
        let encoded: Vec<Encoded> = items
            .par_iter()
            .map(|it| self.encode_phrase(it.phrase))
            .collect::<Result<_>>()?;

        // phase 2: batch normalization
        let mut bn_caches = None;
        let (phrase_rows, feature_rows): (Vec<Vec<f64>>, Vec<Tensor>) = if use_bn {
            let h_mat = Tensor::from_rows(&encoded.iter().map(|e| e.h.clone()).collect::<Vec<_>>())?;
            let mut all_rows = Vec::new();
            for it in items {
                for i in 0..it.proposals.len() {
                    all_rows.push(it.proposals.features.row(i).to_vec());
                }
            }
            let f_mat = Tensor::from_rows(&all_rows)?;
            let (h_norm, f_norm) = match bn_mode {
                BnMode::Train => {
                    let (h_norm, hc) = self.bn_phrase.forward_train(&h_mat)?;
                    let (f_norm, fc) = self.bn_visual.forward_train(&f_mat)?;
                    bn_caches = Some((hc, fc));
                    (h_norm, f_norm)
                }
                BnMode::Infer => (self.bn_phrase.forward_infer(&h_mat)?, self.bn_visual.forward_infer(&f_mat)?),
            };
            let phrase_rows = (0..items.len()).map(|b| h_norm.row(b).to_vec()).collect();
            let mut offset = 0;
            let mut feats = Vec::with_capacity(items.len());
            for it in items {
                let n = it.proposals.len();
                let rows: Vec<Vec<f64>> = (offset..offset + n).map(|r| f_norm.row(r).to_vec()).collect();
                feats.push(Tensor::from_rows(&rows)?);
                offset += n;
            }
            (phrase_rows, feats)
        } else {
            (
                encoded.iter().map(|e| e.h.clone()).collect(),
                items.iter().map(|it| it.proposals.features.clone()).collect(),
            )
        };

        // phase 3: attention and reconstruction
        let grounded: Vec<Grounded> = items
            .par_iter()
            .zip(phrase_rows.par_iter())
            .zip(feature_rows.par_iter())
            .map(|((it, h), f)| self.ground_one(it, h, f, mode))
            .collect::<Result<_>>()?;

        let batch = items.len() as f64;
        let mut losses = Losses::default();
        if mode != Mode::Eval {
            let targets: Vec<Option<usize>> = items.iter().map(|it| it.phrase.gt_attention).collect();
            if mode.uses_attention_loss() {
                let denom = match objective.att_norm {
                    AttentionNorm::Batch => batch,
                    AttentionNorm::Supervised => targets.iter().filter(|t| t.is_some()).count().max(1) as f64,
                };
                let sum: f64 = grounded.iter().filter_map(|g| g.att_nll).sum();
                losses.l_att = Some(sum / denom);
            }
            if mode.uses_reconstruction() {
                let sum: f64 = grounded.iter().filter_map(|g| g.rec.as_ref().map(|r| r.nll)).sum();
                losses.l_rec = Some(sum / batch);
            }
            losses.total = Some(match mode {
                Mode::Unsupervised => losses.l_rec.unwrap_or(0.0),
                Mode::SemiSupervised => {
                    objective.lambda * losses.l_att.unwrap_or(0.0) + losses.l_rec.unwrap_or(0.0)
                }
                _ => losses.l_att.unwrap_or(0.0),
            });
            if !losses.total.unwrap_or(0.0).is_finite() {
                return Err(Error::NonFinite { op: "batch loss" });
            }
        }

        let mut feature_grads = None;
        if let Some(grads) = grads {
            if mode == Mode::Eval {
                return Err(Error::pre("run_batch", "eval mode has no objective to differentiate"));
            }
            let targets: Vec<Option<usize>> = items.iter().map(|it| it.phrase.gt_attention).collect();
            let att_grads = if mode.uses_attention_loss() {
                let raw: Vec<Vec<f64>> = grounded.iter().map(|g| g.output.raw_scores.clone()).collect();
                let lambda = if mode == Mode::SemiSupervised { objective.lambda } else { 1.0 };
                let mut g = attention_loss_backward(&raw, &targets, objective.att_norm)?;
                g.iter_mut().flatten().for_each(|v| *v *= lambda);
                Some(g)
            } else {
                None
            };

            // phase 3 backward, chunk-parallel
            struct Back {
                grads: ModelParams,
                dh: Vec<Vec<f64>>,
                dfeat_norm: Vec<Tensor>,
                dfeat_raw: Vec<Tensor>,
            }
            let idx: Vec<usize> = (0..items.len()).collect();
            let chunks: Vec<Back> = idx
                .par_chunks(CHUNK)
                .map(|chunk| -> Result<Back> {
                    let mut g = self.zeros_like();
                    let mut back = Back {
                        grads: self.zeros_like(),
                        dh: Vec::new(),
                        dfeat_norm: Vec::new(),
                        dfeat_raw: Vec::new(),
                    };
                    for &b in chunk {
                        let gr = &grounded[b];
                        let n = items[b].proposals.len();
                        let mut dscores = att_grads.as_ref().map(|a| a[b].clone()).unwrap_or_else(|| vec![0.0; n]);
                        let mut dfeat_raw = items[b].proposals.features.zeros_like();
                        if let Some(rec) = &gr.rec {
                            let dlogits = phrase_nll_backward(&rec.logits, &rec.targets, 1.0 / batch)?;
                            let embed_g = match g.dec_embed.as_mut() {
                                Some(e) => e,
                                None => &mut g.enc_embed,
                            };
                            let dv_prime =
                                decode_backward(&self.decoder, self.dec_embed(), &rec.decode, &dlogits, &mut g.decoder, embed_g);
                            let dv_att =
                                encode_visual_backward(&self.rec_encoder, &rec.v_att, &rec.pre, &dv_prime, &mut g.rec_encoder);
                            let (dalpha, dfeat) =
                                aggregate_visual_backward(&gr.output.weights, &items[b].proposals.features, &dv_att);
                            dfeat_raw = dfeat;
                            let ds = softmax_backward(&gr.output.weights, &dalpha)?;
                            for (a, v) in dscores.iter_mut().zip(ds) {
                                *a += v;
                            }
                        }
                        let (dh, dfeat_norm) = score_rows_backward(
                            &self.attention,
                            &phrase_rows[b],
                            &feature_rows[b],
                            &gr.score_cache,
                            &dscores,
                            &mut g.attention,
                        );
                        back.dh.push(dh);
                        back.dfeat_norm.push(dfeat_norm);
                        back.dfeat_raw.push(dfeat_raw);
                    }
                    back.grads = g;
                    Ok(back)
                })
                .collect::<Result<_>>()?;

            let mut dh_all = Vec::with_capacity(items.len());
            let mut dfeat_norm_all = Vec::with_capacity(items.len());
            let mut dfeat_raw_all = Vec::with_capacity(items.len());
            for c in chunks {
                grads.accumulate(&c.grads);
                dh_all.extend(c.dh);
                dfeat_norm_all.extend(c.dfeat_norm);
                dfeat_raw_all.extend(c.dfeat_raw);
            }

            // phase 2 backward
            let dh_enc: Vec<Vec<f64>> = if use_bn {
                let dh_mat = Tensor::from_rows(&dh_all)?;
                let mut rows = Vec::new();
                for t in &dfeat_norm_all {
                    for r in 0..t.rows() {
                        rows.push(t.row(r).to_vec());
                    }
                }
                let df_mat = Tensor::from_rows(&rows)?;
                let (hc, fc) = bn_caches
                    .as_ref()
                    .ok_or_else(|| Error::pre("run_batch", "gradients need batchnorm in train mode"))?;
                let dh = self.bn_phrase.backward_train(hc, &dh_mat, &mut grads.bn_phrase);
                let df = self.bn_visual.backward_train(fc, &df_mat, &mut grads.bn_visual);
                let mut offset = 0;
                for (raw, it) in dfeat_raw_all.iter_mut().zip(items) {
                    for r in 0..it.proposals.len() {
                        for (a, v) in raw.row_mut(r).iter_mut().zip(df.row(offset + r)) {
                            *a += v;
                        }
                    }
                    offset += it.proposals.len();
                }
                (0..items.len()).map(|b| dh.row(b).to_vec()).collect()
            } else {
                for (raw, dn) in dfeat_raw_all.iter_mut().zip(&dfeat_norm_all) {
                    raw.axpy(1.0, dn)?;
                }
                dh_all
            };

            // phase 1 backward
            let enc_chunks: Vec<ModelParams> = idx
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = self.zeros_like();
                    for &b in chunk {
                        let enc = &encoded[b];
                        let t = enc.steps.len();
                        let mut dhs = vec![vec![0.0; self.config.hidden_dim]; t];
                        dhs[t - 1] = dh_enc[b].clone();
                        let dxs = self.encoder.run_backward(&enc.steps, &dhs, &mut g.encoder);
                        for (dx, &tok) in dxs.iter().zip(&items[b].phrase.tokens) {
                            self.enc_embed.backward(tok, dx, &mut g.enc_embed);
                        }
                    }
                    g
                })
                .collect();
            for c in &enc_chunks {
                grads.accumulate(c);
            }
            if want_feature_grads {
                feature_grads = Some(dfeat_raw_all);
            }
        }

        Ok(BatchResult {
            losses,
            outputs: grounded.into_iter().map(|g| g.output).collect(),
            feature_grads,
            bn_caches,
        })
    }

    /// Grounding only; batchnorm uses running statistics.
    pub fn ground(&self, items: &[BatchItem]) -> Result<Vec<AttentionOutput>> {
        Ok(self.run_batch(items, &Objective::eval(), BnMode::Infer, None, false)?.outputs)
    }
}

/// Single-sample forward pass. Batchnorm, when enabled, uses the running
/// statistics, so the result does not depend on any other sample. In
/// [`Mode::Eval`] no losses are computed.
pub fn full_forward(
    model: &ModelParams,
    phrase: &Phrase,
    proposals: &ProposalSet,
    objective: &Objective,
) -> Result<(AttentionOutput, Losses)> {
    let item = BatchItem { phrase, proposals };
    let mut r = model.run_batch(&[item], objective, BnMode::Infer, None, false)?;
    Ok((r.outputs.remove(0), r.losses))
}
