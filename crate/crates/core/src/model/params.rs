use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Real};
use crate::features::{Stream, VocabSpec};

/// Embedding tables, `[rows, d_model]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<F> {
    pub question: Array2<F>,
    pub part: Array2<F>,
    pub enc_position: Array2<F>,
    pub explanation: Array2<F>,
    pub dec_position: Array2<F>,
    pub response: Array2<F>,
    pub elapsed: Array2<F>,
    pub lag_s: Array2<F>,
    pub lag_m: Array2<F>,
    pub lag_d: Array2<F>,
}

impl<F: Real> Embeddings<F> {
    pub fn table(&self, stream: Stream) -> &Array2<F> {
        match stream {
            Stream::Question => &self.question,
            Stream::Part => &self.part,
            Stream::Explanation => &self.explanation,
            Stream::Response => &self.response,
            Stream::Elapsed => &self.elapsed,
            Stream::LagSeconds => &self.lag_s,
            Stream::LagMinutes => &self.lag_m,
            Stream::LagDays => &self.lag_d,
        }
    }

    pub fn table_mut(&mut self, stream: Stream) -> &mut Array2<F> {
        match stream {
            Stream::Question => &mut self.question,
            Stream::Part => &mut self.part,
            Stream::Explanation => &mut self.explanation,
            Stream::Response => &mut self.response,
            Stream::Elapsed => &mut self.elapsed,
            Stream::LagSeconds => &mut self.lag_s,
            Stream::LagMinutes => &mut self.lag_m,
            Stream::LagDays => &mut self.lag_d,
        }
    }
}

/// Projections applied as `x · W`; no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<F> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub scale: Array1<F>,
    pub shift: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<F> {
    pub self_attn: AttentionParams<F>,
    pub norm1: LayerNormParams<F>,
    pub ffn: FeedForwardParams<F>,
    pub norm2: LayerNormParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<F> {
    pub self_attn: AttentionParams<F>,
    pub norm1: LayerNormParams<F>,
    pub cross_attn: AttentionParams<F>,
    pub norm2: LayerNormParams<F>,
    pub ffn: FeedForwardParams<F>,
    pub norm3: LayerNormParams<F>,
}

/// Every learnable tensor of the model. Gradients and optimizer moments
/// reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub embeddings: Embeddings<F>,
    pub encoder: Vec<EncoderLayerParams<F>>,
    pub decoder: Vec<DecoderLayerParams<F>>,
    pub head_w: Array1<F>,
    pub head_b: Array1<F>,
}

// Registry order is fixed: initialization draws, checkpoints and the
// optimizer all walk tensors in this order.
macro_rules! registry {
    ($p:expr, $view:ident, $iter:ident) => {{
        let mut out = vec![
            ("emb.question".to_string(), $p.embeddings.question.$view().into_dyn()),
            ("emb.part".to_string(), $p.embeddings.part.$view().into_dyn()),
            ("emb.enc_position".to_string(), $p.embeddings.enc_position.$view().into_dyn()),
            ("emb.explanation".to_string(), $p.embeddings.explanation.$view().into_dyn()),
            ("emb.dec_position".to_string(), $p.embeddings.dec_position.$view().into_dyn()),
            ("emb.response".to_string(), $p.embeddings.response.$view().into_dyn()),
            ("emb.elapsed".to_string(), $p.embeddings.elapsed.$view().into_dyn()),
            ("emb.lag_s".to_string(), $p.embeddings.lag_s.$view().into_dyn()),
            ("emb.lag_m".to_string(), $p.embeddings.lag_m.$view().into_dyn()),
            ("emb.lag_d".to_string(), $p.embeddings.lag_d.$view().into_dyn()),
        ];
        for (i, l) in $p.encoder.$iter().enumerate() {
            let pre = format!("enc.{i}");
            out.push((format!("{pre}.self_attn.w_q"), l.self_attn.w_q.$view().into_dyn()));
            out.push((format!("{pre}.self_attn.w_k"), l.self_attn.w_k.$view().into_dyn()));
            out.push((format!("{pre}.self_attn.w_v"), l.self_attn.w_v.$view().into_dyn()));
            out.push((format!("{pre}.self_attn.w_o"), l.self_attn.w_o.$view().into_dyn()));
            out.push((format!("{pre}.norm1.scale"), l.norm1.scale.$view().into_dyn()));
            out.push((format!("{pre}.norm1.shift"), l.norm1.shift.$view().into_dyn()));
            out.push((format!("{pre}.ffn.w1"), l.ffn.w1.$view().into_dyn()));
            out.push((format!("{pre}.ffn.b1"), l.ffn.b1.$view().into_dyn()));
            out.push((format!("{pre}.ffn.w2"), l.ffn.w2.$view().into_dyn()));
            out.push((format!("{pre}.ffn.b2"), l.ffn.b2.$view().into_dyn()));
            out.push((format!("{pre}.norm2.scale"), l.norm2.scale.$view().into_dyn()));
            out.push((format!("{pre}.norm2.shift"), l.norm2.shift.$view().into_dyn()));
        }
        for (i, l) in $p.decoder.$iter().enumerate() {
            let pre = format!("dec.{i}");
            out.push((format!("{pre}.self_attn.w_q"), l.self_attn.w_q.$view().into_dyn()));
            out.push((format!("{pre}.self_attn.w_k"), l.self_attn.w_k.$view().into_dyn()));
            out.push((format!("{pre}.self_attn.w_v"), l.self_attn.w_v.$view().into_dyn()));
            out.push((format!("{pre}.self_attn.w_o"), l.self_attn.w_o.$view().into_dyn()));
            out.push((format!("{pre}.norm1.scale"), l.norm1.scale.$view().into_dyn()));
            out.push((format!("{pre}.norm1.shift"), l.norm1.shift.$view().into_dyn()));
            out.push((format!("{pre}.cross_attn.w_q"), l.cross_attn.w_q.$view().into_dyn()));
            out.push((format!("{pre}.cross_attn.w_k"), l.cross_attn.w_k.$view().into_dyn()));
            out.push((format!("{pre}.cross_attn.w_v"), l.cross_attn.w_v.$view().into_dyn()));
            out.push((format!("{pre}.cross_attn.w_o"), l.cross_attn.w_o.$view().into_dyn()));
            out.push((format!("{pre}.norm2.scale"), l.norm2.scale.$view().into_dyn()));
            out.push((format!("{pre}.norm2.shift"), l.norm2.shift.$view().into_dyn()));
            out.push((format!("{pre}.ffn.w1"), l.ffn.w1.$view().into_dyn()));
            out.push((format!("{pre}.ffn.b1"), l.ffn.b1.$view().into_dyn()));
            out.push((format!("{pre}.ffn.w2"), l.ffn.w2.$view().into_dyn()));
            out.push((format!("{pre}.ffn.b2"), l.ffn.b2.$view().into_dyn()));
            out.push((format!("{pre}.norm3.scale"), l.norm3.scale.$view().into_dyn()));
            out.push((format!("{pre}.norm3.shift"), l.norm3.shift.$view().into_dyn()));
        }
        out.push(("head.w".to_string(), $p.head_w.$view().into_dyn()));
        out.push(("head.b".to_string(), $p.head_b.$view().into_dyn()));
        out
    }};
}

fn attention_zeros<F: Real>(d: usize) -> AttentionParams<F> {
    AttentionParams {
        w_q: Array2::zeros((d, d)),
        w_k: Array2::zeros((d, d)),
        w_v: Array2::zeros((d, d)),
        w_o: Array2::zeros((d, d)),
    }
}

fn norm_init<F: Real>(d: usize) -> LayerNormParams<F> {
    LayerNormParams {
        scale: Array1::ones(d),
        shift: Array1::zeros(d),
    }
}

fn ffn_zeros<F: Real>(d: usize, d_ff: usize) -> FeedForwardParams<F> {
    FeedForwardParams {
        w1: Array2::zeros((d, d_ff)),
        b1: Array1::zeros(d_ff),
        w2: Array2::zeros((d_ff, d)),
        b2: Array1::zeros(d),
    }
}

impl<F: Real> ModelParams<F> {
    /// Correctly shaped parameters with zero matrices, unit layer-norm scales
    /// and zero shifts.
    pub fn unit(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let v: &VocabSpec = &config.vocab;
        let table = |s| Array2::zeros((v.rows(s), d));
        let embeddings = Embeddings {
            question: table(Stream::Question),
            part: table(Stream::Part),
            enc_position: Array2::zeros((config.max_seq, d)),
            explanation: table(Stream::Explanation),
            dec_position: Array2::zeros((config.max_seq, d)),
            response: table(Stream::Response),
            elapsed: table(Stream::Elapsed),
            lag_s: table(Stream::LagSeconds),
            lag_m: table(Stream::LagMinutes),
            lag_d: table(Stream::LagDays),
        };
        let encoder = (0..config.n_enc_layers)
            .map(|_| EncoderLayerParams {
                self_attn: attention_zeros(d),
                norm1: norm_init(d),
                ffn: ffn_zeros(d, config.d_ff),
                norm2: norm_init(d),
            })
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|_| DecoderLayerParams {
                self_attn: attention_zeros(d),
                norm1: norm_init(d),
                cross_attn: attention_zeros(d),
                norm2: norm_init(d),
                ffn: ffn_zeros(d, config.d_ff),
                norm3: norm_init(d),
            })
            .collect();
        Self {
            config: config.clone(),
            embeddings,
            encoder,
            decoder,
            head_w: Array1::zeros(d),
            head_b: Array1::zeros(1),
        }
    }

    /// Same shapes, every entry zero. Used for gradient accumulators and
    /// optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(F::zero());
        out
    }

    pub fn fill(&mut self, value: F) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        registry!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        registry!(self, view_mut, iter_mut)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .map(|((_, a), (_, b))| {
                let mut m = 0.0f64;
                Zip::from(&a).and(&b).for_each(|&x, &y| m = m.max((x - y).abs().as_f64()));
                m
            })
            .fold(0.0, f64::max)
    }

    pub fn convert<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::unit(&self.config);
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = G::cast(s.as_f64()));
        }
        out
    }

    /// Pad rows of the tables that carry one: question, part, explanation,
    /// response, elapsed and the three lag tables.
    pub fn pad_rows(&self) -> Vec<(Stream, ndarray::ArrayView1<'_, F>)> {
        Stream::ALL
            .iter()
            .map(|&s| (s, self.embeddings.table(s).row(self.config.vocab.pad_id(s) as usize)))
            .collect()
    }
}

/// Seeded initialization: normal entries with standard deviation
/// `1/sqrt(d_model)` for every embedding and weight matrix (head included),
/// zero biases and pad rows, unit layer-norm scale and zero shift.
pub fn init_params<F: Real>(config: &ModelConfig) -> crate::Result<ModelParams<F>> {
    config.validate()?;
    let mut params = ModelParams::<F>::unit(config);
    let std = 1.0 / (config.d_model as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (name, mut t) in params.tensors_mut() {
        if name.starts_with("emb.") || name.contains(".w") {
            for x in t.iter_mut() {
                *x = F::cast(normal.sample(&mut rng));
            }
        }
    }
    let vocab = config.vocab;
    for s in Stream::ALL {
        let pad = vocab.pad_id(s) as usize;
        params.embeddings.table_mut(s).row_mut(pad).fill(F::zero());
    }
    assert_eq!(
        params.num_scalars(),
        config.param_count(),
        "parameter registry disagrees with the closed-form count"
    );
    Ok(params)
}
