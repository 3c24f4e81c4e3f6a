use ndarray::{Array1, Array2, Axis};

use super::layers::{
    decoder_layer_bwd, decoder_layer_fwd, dropout_apply, dropout_back, encoder_layer_bwd, encoder_layer_fwd,
    AttentionMask, DecoderLayerCache, Dropout, EncoderLayerCache,
};
use super::params::ModelParams;
use super::{Mode, Real};
use crate::error::{Error, Result};
use crate::features::{EncodedWindow, Stream};

const ENCODER_STREAMS: [Stream; 3] = [Stream::Question, Stream::Part, Stream::Explanation];
const DECODER_STREAMS: [Stream; 5] = [
    Stream::Response,
    Stream::Elapsed,
    Stream::LagSeconds,
    Stream::LagMinutes,
    Stream::LagDays,
];

#[derive(Clone, Copy)]
enum Side {
    Encoder,
    Decoder,
}

impl Side {
    fn streams(self) -> &'static [Stream] {
        match self {
            Side::Encoder => &ENCODER_STREAMS,
            Side::Decoder => &DECODER_STREAMS,
        }
    }
}

fn position_table<F: Real>(params: &ModelParams<F>, side: Side) -> &Array2<F> {
    match side {
        Side::Encoder => &params.embeddings.enc_position,
        Side::Decoder => &params.embeddings.dec_position,
    }
}

fn embed_rows<F: Real>(
    params: &ModelParams<F>,
    window: &EncodedWindow,
    positions: &[usize],
    side: Side,
) -> Result<Array2<F>> {
    let d = params.config.d_model;
    let pos_table = position_table(params, side);
    let mut out = Array2::zeros((positions.len(), d));
    for (k, &pos) in positions.iter().enumerate() {
        if pos >= pos_table.nrows() {
            return Err(Error::TokenOutOfRange {
                stream: "position",
                id: pos as u32,
                size: pos_table.nrows(),
            });
        }
        let mut row = out.row_mut(k);
        row += &pos_table.row(pos);
        for &s in side.streams() {
            let table = params.embeddings.table(s);
            let id = window.stream(s)[pos];
            if id as usize >= table.nrows() {
                return Err(Error::TokenOutOfRange {
                    stream: s.name(),
                    id,
                    size: table.nrows(),
                });
            }
            row += &table.row(id as usize);
        }
    }
    Ok(out)
}

fn scatter_rows<F: Real>(
    grads: &mut ModelParams<F>,
    window: &EncodedWindow,
    positions: &[usize],
    side: Side,
    d_rows: &Array2<F>,
) {
    for (k, &pos) in positions.iter().enumerate() {
        let g = d_rows.row(k);
        match side {
            Side::Encoder => grads.embeddings.enc_position.row_mut(pos).scaled_add(F::one(), &g),
            Side::Decoder => grads.embeddings.dec_position.row_mut(pos).scaled_add(F::one(), &g),
        }
        for &s in side.streams() {
            let id = window.stream(s)[pos] as usize;
            grads.embeddings.table_mut(s).row_mut(id).scaled_add(F::one(), &g);
        }
    }
}

/// Sum of question, part, encoder-position and explanation embeddings for
/// every position of the window (pads included), followed by dropout.
pub fn embed_encoder<F: Real>(
    params: &ModelParams<F>,
    window: &EncodedWindow,
    dropout: Option<&mut Dropout>,
) -> Result<Array2<F>> {
    let positions: Vec<usize> = (0..window.len()).collect();
    let mut x = embed_rows(params, window, &positions, Side::Encoder)?;
    dropout_apply(&mut x, dropout);
    Ok(x)
}

/// Sum of decoder-position, response, elapsed and the three lag embeddings
/// for every position of the window, followed by dropout.
pub fn embed_decoder<F: Real>(
    params: &ModelParams<F>,
    window: &EncodedWindow,
    dropout: Option<&mut Dropout>,
) -> Result<Array2<F>> {
    let positions: Vec<usize> = (0..window.len()).collect();
    let mut y = embed_rows(params, window, &positions, Side::Decoder)?;
    dropout_apply(&mut y, dropout);
    Ok(y)
}

fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Everything the backward pass needs from one forward pass over a window.
pub struct WindowPass<F> {
    positions: Vec<usize>,
    enc_drop: Option<Array2<F>>,
    enc: Vec<EncoderLayerCache<F>>,
    dec_drop: Option<Array2<F>>,
    dec: Vec<DecoderLayerCache<F>>,
    hidden: Array2<F>,
    logits: Vec<F>,
    probs: Vec<F>,
}

impl<F: Real> WindowPass<F> {
    /// Window positions that were computed, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Logits aligned with [`Self::positions`].
    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    /// Probabilities aligned with [`Self::positions`].
    pub fn probs(&self) -> &[F] {
        &self.probs
    }
}

/// Runs the model over the valid positions of `window`, keeping the caches
/// for [`backward_window`].
pub fn forward_logits<F: Real>(params: &ModelParams<F>, window: &EncodedWindow, mode: Mode) -> Result<WindowPass<F>> {
    let config = &params.config;
    if window.len() != config.max_seq {
        return Err(Error::Invalid(format!(
            "window length {} differs from model max_seq {}",
            window.len(),
            config.max_seq
        )));
    }
    window.validate(&config.vocab)?;
    let positions = window.valid_positions();
    let n = positions.len();
    let d = config.d_model;
    if n == 0 {
        return Ok(WindowPass {
            positions,
            enc_drop: None,
            enc: Vec::new(),
            dec_drop: None,
            dec: Vec::new(),
            hidden: Array2::zeros((0, d)),
            logits: Vec::new(),
            probs: Vec::new(),
        });
    }

    let mut dropout = match mode {
        Mode::Train { dropout_seed } if config.dropout > 0.0 => Some(Dropout::new(config.dropout, dropout_seed)),
        _ => None,
    };
    let mask = AttentionMask::lower_triangular(n);

    let mut x = embed_rows(params, window, &positions, Side::Encoder)?;
    let enc_drop = dropout_apply(&mut x, dropout.as_mut());
    let mut enc = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (next, cache) = encoder_layer_fwd(&x, layer, config.n_heads, &mask, dropout.as_mut())?;
        x = next;
        enc.push(cache);
    }

    let mut y = embed_rows(params, window, &positions, Side::Decoder)?;
    let dec_drop = dropout_apply(&mut y, dropout.as_mut());
    let mut dec = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (next, cache) = decoder_layer_fwd(&y, &x, layer, config.n_heads, &mask, dropout.as_mut())?;
        y = next;
        dec.push(cache);
    }

    let logits: Vec<F> = (y.dot(&params.head_w) + params.head_b[0]).to_vec();
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite logit at position {} of user {}",
            positions[i], window.user_id
        )));
    }
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(WindowPass {
        positions,
        enc_drop,
        enc,
        dec_drop,
        dec,
        hidden: y,
        logits,
        probs,
    })
}

/// Probability of a correct answer at every window position. Pad positions
/// are not computed and report 0.5.
pub fn forward<F: Real>(params: &ModelParams<F>, window: &EncodedWindow, mode: Mode) -> Result<Vec<F>> {
    let pass = forward_logits(params, window, mode)?;
    let mut out = vec![F::cast(0.5); window.len()];
    for (&pos, &p) in pass.positions.iter().zip(&pass.probs) {
        out[pos] = p;
    }
    Ok(out)
}

/// Accumulates into `grads` the gradient of `Σ dlogits[k] · logit[k]`, i.e.
/// back-propagates the loss gradient with respect to each computed logit.
pub fn backward_window<F: Real>(
    params: &ModelParams<F>,
    window: &EncodedWindow,
    pass: &WindowPass<F>,
    dlogits: &[F],
    grads: &mut ModelParams<F>,
) {
    let n = pass.positions.len();
    assert_eq!(dlogits.len(), n, "one logit gradient per computed position");
    if n == 0 {
        return;
    }
    let dl = Array1::from(dlogits.to_vec());
    grads.head_w += &pass.hidden.t().dot(&dl);
    grads.head_b[0] += dl.sum();
    let mut dy = dl.insert_axis(Axis(1)).dot(&params.head_w.view().insert_axis(Axis(0)));

    let mut d_enc = Array2::<F>::zeros((n, params.config.d_model));
    for ((layer, cache), g) in params.decoder.iter().zip(&pass.dec).zip(grads.decoder.iter_mut()).rev() {
        let (d_in, de) = decoder_layer_bwd(&dy, cache, layer, g);
        dy = d_in;
        d_enc += &de;
    }
    let dy = dropout_back(&dy, &pass.dec_drop);
    scatter_rows(grads, window, &pass.positions, Side::Decoder, &dy);

    let mut dx = d_enc;
    for ((layer, cache), g) in params.encoder.iter().zip(&pass.enc).zip(grads.encoder.iter_mut()).rev() {
        dx = encoder_layer_bwd(&dx, cache, layer, g);
    }
    let dx = dropout_back(&dx, &pass.enc_drop);
    scatter_rows(grads, window, &pass.positions, Side::Encoder, &dx);
}
