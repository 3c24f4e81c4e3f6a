use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{AttentionParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams, LayerNormParams};
use super::Real;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Logit assigned to disallowed attention entries before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// `allowed[i][j]`: query `i` may attend to key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allowed: Array2<bool>,
}

impl AttentionMask {
    /// `allowed[i][j] = j <= i && valid[j]`.
    pub fn causal(valid: &[bool]) -> Self {
        let n = valid.len();
        Self {
            allowed: Array2::from_shape_fn((n, n), |(i, j)| j <= i && valid[j]),
        }
    }

    pub fn lower_triangular(n: usize) -> Self {
        Self {
            allowed: Array2::from_shape_fn((n, n), |(i, j)| j <= i),
        }
    }

    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self {
            allowed: Array2::from_elem((n_queries, n_keys), true),
        }
    }

    pub fn from_matrix(allowed: Array2<bool>) -> Self {
        Self { allowed }
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[[query, key]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.allowed.dim()
    }
}

/// Inverted dropout with its own seeded generator.
#[derive(Debug, Clone)]
pub struct Dropout {
    rng: ChaCha8Rng,
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            rate,
        }
    }

    /// Scaling mask with entries `0` or `1 / (1 - rate)`; `None` at rate 0.
    fn mask<F: Real>(&mut self, shape: (usize, usize)) -> Option<Array2<F>> {
        if self.rate <= 0.0 {
            return None;
        }
        let threshold = (self.rate * 4_294_967_296.0) as u64;
        let keep = F::cast(1.0 / (1.0 - self.rate));
        let rng = &mut self.rng;
        Some(Array2::from_shape_simple_fn(shape, || {
            if u64::from(rng.next_u32()) < threshold {
                F::zero()
            } else {
                keep
            }
        }))
    }
}

pub(crate) fn dropout_apply<F: Real>(x: &mut Array2<F>, dropout: Option<&mut Dropout>) -> Option<Array2<F>> {
    let mask = dropout?.mask(x.dim())?;
    *x *= &mask;
    Some(mask)
}

pub(crate) fn dropout_back<F: Real>(dy: &Array2<F>, mask: &Option<Array2<F>>) -> Array2<F> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

// `c += a · b`
fn add_matmul<F: Real>(c: &mut Array2<F>, a: &ArrayView2<F>, b: &ArrayView2<F>) {
    general_mat_mul(F::one(), a, b, F::one(), c);
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

/// `(x - mean) / sqrt(var + 1e-5) * scale + shift` over one row.
pub fn layer_norm<F: Real>(x: ArrayView1<F>, scale: ArrayView1<F>, shift: ArrayView1<F>) -> Array1<F> {
    let n = F::cast(x.len() as f64);
    let mean = x.sum() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv = F::one() / (var + F::cast(LAYER_NORM_EPS)).sqrt();
    Zip::from(&x).and(&scale).and(&shift).map_collect(|&v, &g, &b| (v - mean) * inv * g + b)
}

pub(crate) struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub(crate) fn layer_norm_fwd<F: Real>(x: &Array2<F>, p: &LayerNormParams<F>) -> (Array2<F>, LayerNormCache<F>) {
    let (rows, d) = x.dim();
    let n = F::cast(d as f64);
    let eps = F::cast(LAYER_NORM_EPS);
    let mut xhat = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[i] = inv;
        Zip::from(xhat.row_mut(i)).and(&row).for_each(|h, &v| *h = (v - mean) * inv);
    }
    let y = &xhat * &p.scale + &p.shift;
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_bwd<F: Real>(
    dy: &Array2<F>,
    cache: &LayerNormCache<F>,
    p: &LayerNormParams<F>,
    g: &mut LayerNormParams<F>,
) -> Array2<F> {
    g.scale += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.shift += &dy.sum_axis(Axis(0));
    let n = F::cast(dy.ncols() as f64);
    let dxhat = dy * &p.scale;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / n;
        let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
        let inv = cache.inv_std[i];
        Zip::from(dx.row_mut(i))
            .and(&dh)
            .and(&xh)
            .for_each(|o, &a, &b| *o = inv * (a - mean_dh - b * mean_dh_xh));
    }
    dx
}

/// Row-wise layer norm of a matrix.
pub fn layer_norm_rows<F: Real>(x: &Array2<F>, p: &LayerNormParams<F>) -> Array2<F> {
    layer_norm_fwd(x, p).0
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

pub(crate) struct FeedForwardCache<F> {
    x: Array2<F>,
    hidden: Array2<F>,
}

pub(crate) fn feed_forward_fwd<F: Real>(x: &Array2<F>, p: &FeedForwardParams<F>) -> (Array2<F>, FeedForwardCache<F>) {
    let mut hidden = x.dot(&p.w1) + &p.b1;
    hidden.mapv_inplace(|v| v.max(F::zero()));
    let out = hidden.dot(&p.w2) + &p.b2;
    (out, FeedForwardCache { x: x.clone(), hidden })
}

pub(crate) fn feed_forward_bwd<F: Real>(
    dout: &Array2<F>,
    cache: &FeedForwardCache<F>,
    p: &FeedForwardParams<F>,
    g: &mut FeedForwardParams<F>,
) -> Array2<F> {
    add_matmul(&mut g.w2, &cache.hidden.t(), &dout.view());
    g.b2 += &dout.sum_axis(Axis(0));
    let mut dh = dout.dot(&p.w2.t());
    Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &h| {
        if h <= F::zero() {
            *d = F::zero();
        }
    });
    add_matmul(&mut g.w1, &cache.x.t(), &dh.view());
    g.b1 += &dh.sum_axis(Axis(0));
    dh.dot(&p.w1.t())
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
pub fn feed_forward<F: Real>(x: &Array2<F>, p: &FeedForwardParams<F>) -> Array2<F> {
    feed_forward_fwd(x, p).0
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// `softmax(Q·Kᵀ / sqrt(d_k))` with disallowed logits replaced by
/// [`MASKED_LOGIT`]; disallowed entries come out exactly zero.
pub fn attention_weights<F: Real>(q: &ArrayView2<F>, k: &ArrayView2<F>, mask: &AttentionMask) -> Result<Array2<F>> {
    let (nq, dk) = q.dim();
    let nk = k.nrows();
    if k.ncols() != dk {
        return Err(Error::Invalid(format!("query width {dk} differs from key width {}", k.ncols())));
    }
    if mask.shape() != (nq, nk) {
        return Err(Error::Invalid(format!("mask shape {:?} does not match {nq}x{nk} scores", mask.shape())));
    }
    let scale = F::one() / F::cast(dk as f64).sqrt();
    let mut w = q.dot(&k.t());
    let masked = F::cast(MASKED_LOGIT);
    for (i, mut row) in w.outer_iter_mut().enumerate() {
        let mut max = F::neg_infinity();
        let mut any = false;
        for (j, v) in row.iter_mut().enumerate() {
            if mask.allowed(i, j) {
                *v *= scale;
                max = max.max(*v);
                any = true;
            } else {
                *v = masked;
            }
        }
        if !any {
            return Err(Error::EmptyAttentionRow { row: i });
        }
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            *v = if mask.allowed(i, j) { (*v - max).exp() } else { F::zero() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(w)
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/sqrt(d_k)) · V` under `mask`.
pub fn attention<F: Real>(
    q: &ArrayView2<F>,
    k: &ArrayView2<F>,
    v: &ArrayView2<F>,
    mask: &AttentionMask,
) -> Result<Array2<F>> {
    if v.nrows() != k.nrows() {
        return Err(Error::Invalid("keys and values differ in length".into()));
    }
    Ok(attention_weights(q, k, mask)?.dot(v))
}

pub(crate) struct AttentionCache<F> {
    x_q: Array2<F>,
    x_kv: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    weights: Vec<Array2<F>>,
    drop: Vec<Option<Array2<F>>>,
    concat: Array2<F>,
}

pub(crate) fn mha_fwd<F: Real>(
    x_q: &Array2<F>,
    x_kv: &Array2<F>,
    p: &AttentionParams<F>,
    n_heads: usize,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<(Array2<F>, AttentionCache<F>)> {
    let d = p.w_q.nrows();
    if x_q.ncols() != d || x_kv.ncols() != d {
        return Err(Error::Shape {
            tensor: "attention input".into(),
            expected: vec![x_q.nrows(), d],
            found: vec![x_q.nrows(), x_q.ncols()],
        });
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Invalid(format!("width {d} not divisible by {n_heads} heads")));
    }
    let dk = d / n_heads;
    let q = x_q.dot(&p.w_q);
    let k = x_kv.dot(&p.w_k);
    let v = x_kv.dot(&p.w_v);
    let mut concat = Array2::zeros((x_q.nrows(), d));
    let mut weights = Vec::with_capacity(n_heads);
    let mut drop = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let a = attention_weights(&q.slice(cols), &k.slice(cols), mask)?;
        let mut used = a.clone();
        let m = dropout_apply(&mut used, dropout.as_deref_mut());
        concat.slice_mut(cols).assign(&used.dot(&v.slice(cols)));
        weights.push(a);
        drop.push(m);
    }
    let out = concat.dot(&p.w_o);
    let cache = AttentionCache {
        x_q: x_q.clone(),
        x_kv: x_kv.clone(),
        q,
        k,
        v,
        weights,
        drop,
        concat,
    };
    Ok((out, cache))
}

/// Returns gradients with respect to the query-side and key/value-side inputs.
pub(crate) fn mha_bwd<F: Real>(
    dout: &Array2<F>,
    cache: &AttentionCache<F>,
    p: &AttentionParams<F>,
    g: &mut AttentionParams<F>,
) -> (Array2<F>, Array2<F>) {
    let n_heads = cache.weights.len();
    let d = p.w_q.nrows();
    let dk = d / n_heads;
    let scale = F::one() / F::cast(dk as f64).sqrt();

    add_matmul(&mut g.w_o, &cache.concat.t(), &dout.view());
    let dconcat = dout.dot(&p.w_o.t());

    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk_all = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..n_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let a = &cache.weights[h];
        let d_head = dconcat.slice(cols);
        let used = match &cache.drop[h] {
            Some(m) => a * m,
            None => a.clone(),
        };
        dv.slice_mut(cols).assign(&used.t().dot(&d_head));
        let mut da = d_head.dot(&cache.v.slice(cols).t());
        if let Some(m) = &cache.drop[h] {
            da *= m;
        }
        // Softmax backward: ds = a ⊙ (da - rowsum(da ⊙ a)).
        let mut ds = da;
        for (mut ds_row, a_row) in ds.outer_iter_mut().zip(a.outer_iter()) {
            let dot: F = ds_row.iter().zip(a_row.iter()).map(|(&x, &y)| x * y).sum();
            Zip::from(&mut ds_row).and(&a_row).for_each(|x, &y| *x = y * (*x - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk_all.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }

    add_matmul(&mut g.w_q, &cache.x_q.t(), &dq.view());
    add_matmul(&mut g.w_k, &cache.x_kv.t(), &dk_all.view());
    add_matmul(&mut g.w_v, &cache.x_kv.t(), &dv.view());
    let dx_q = dq.dot(&p.w_q.t());
    let dx_kv = dk_all.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());
    (dx_q, dx_kv)
}

/// Multi-head attention: project, attend per head on disjoint column
/// slices, concatenate, project out, then output dropout.
pub fn multi_head_attention<F: Real>(
    x_q: &Array2<F>,
    x_kv: &Array2<F>,
    p: &AttentionParams<F>,
    n_heads: usize,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<Array2<F>> {
    let (mut out, _) = mha_fwd(x_q, x_kv, p, n_heads, mask, dropout.as_deref_mut())?;
    dropout_apply(&mut out, dropout);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

pub(crate) struct EncoderLayerCache<F> {
    attn: AttentionCache<F>,
    drop1: Option<Array2<F>>,
    ln1: LayerNormCache<F>,
    ffn: FeedForwardCache<F>,
    drop2: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
}

pub(crate) fn encoder_layer_fwd<F: Real>(
    x: &Array2<F>,
    p: &EncoderLayerParams<F>,
    n_heads: usize,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<(Array2<F>, EncoderLayerCache<F>)> {
    let (mut a, attn) = mha_fwd(x, x, &p.self_attn, n_heads, mask, dropout.as_deref_mut())?;
    let drop1 = dropout_apply(&mut a, dropout.as_deref_mut());
    let (y1, ln1) = layer_norm_fwd(&(x + &a), &p.norm1);
    let (mut f, ffn) = feed_forward_fwd(&y1, &p.ffn);
    let drop2 = dropout_apply(&mut f, dropout);
    let (y2, ln2) = layer_norm_fwd(&(&y1 + &f), &p.norm2);
    Ok((
        y2,
        EncoderLayerCache {
            attn,
            drop1,
            ln1,
            ffn,
            drop2,
            ln2,
        },
    ))
}

pub(crate) fn encoder_layer_bwd<F: Real>(
    dy: &Array2<F>,
    c: &EncoderLayerCache<F>,
    p: &EncoderLayerParams<F>,
    g: &mut EncoderLayerParams<F>,
) -> Array2<F> {
    let d_sum2 = layer_norm_bwd(dy, &c.ln2, &p.norm2, &mut g.norm2);
    let mut dy1 = d_sum2.clone();
    dy1 += &feed_forward_bwd(&dropout_back(&d_sum2, &c.drop2), &c.ffn, &p.ffn, &mut g.ffn);
    let d_sum1 = layer_norm_bwd(&dy1, &c.ln1, &p.norm1, &mut g.norm1);
    let (dq, dkv) = mha_bwd(&dropout_back(&d_sum1, &c.drop1), &c.attn, &p.self_attn, &mut g.self_attn);
    d_sum1 + dq + dkv
}

/// Post-norm encoder block: self-attention then feed-forward, each as
/// `x ← LayerNorm(x + Dropout(sublayer(x)))`.
pub fn encoder_layer<F: Real>(
    x: &Array2<F>,
    p: &EncoderLayerParams<F>,
    n_heads: usize,
    mask: &AttentionMask,
    dropout: Option<&mut Dropout>,
) -> Result<Array2<F>> {
    Ok(encoder_layer_fwd(x, p, n_heads, mask, dropout)?.0)
}

pub(crate) struct DecoderLayerCache<F> {
    self_attn: AttentionCache<F>,
    drop1: Option<Array2<F>>,
    ln1: LayerNormCache<F>,
    cross_attn: AttentionCache<F>,
    drop2: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
    ffn: FeedForwardCache<F>,
    drop3: Option<Array2<F>>,
    ln3: LayerNormCache<F>,
}

pub(crate) fn decoder_layer_fwd<F: Real>(
    y: &Array2<F>,
    enc_out: &Array2<F>,
    p: &DecoderLayerParams<F>,
    n_heads: usize,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<(Array2<F>, DecoderLayerCache<F>)> {
    let (mut a, self_attn) = mha_fwd(y, y, &p.self_attn, n_heads, mask, dropout.as_deref_mut())?;
    let drop1 = dropout_apply(&mut a, dropout.as_deref_mut());
    let (y1, ln1) = layer_norm_fwd(&(y + &a), &p.norm1);
    let (mut c, cross_attn) = mha_fwd(&y1, enc_out, &p.cross_attn, n_heads, mask, dropout.as_deref_mut())?;
    let drop2 = dropout_apply(&mut c, dropout.as_deref_mut());
    let (y2, ln2) = layer_norm_fwd(&(&y1 + &c), &p.norm2);
    let (mut f, ffn) = feed_forward_fwd(&y2, &p.ffn);
    let drop3 = dropout_apply(&mut f, dropout);
    let (y3, ln3) = layer_norm_fwd(&(&y2 + &f), &p.norm3);
    Ok((
        y3,
        DecoderLayerCache {
            self_attn,
            drop1,
            ln1,
            cross_attn,
            drop2,
            ln2,
            ffn,
            drop3,
            ln3,
        },
    ))
}

/// Returns `(d_input, d_encoder_output)`.
pub(crate) fn decoder_layer_bwd<F: Real>(
    dy: &Array2<F>,
    c: &DecoderLayerCache<F>,
    p: &DecoderLayerParams<F>,
    g: &mut DecoderLayerParams<F>,
) -> (Array2<F>, Array2<F>) {
    let d_sum3 = layer_norm_bwd(dy, &c.ln3, &p.norm3, &mut g.norm3);
    let mut dy2 = d_sum3.clone();
    dy2 += &feed_forward_bwd(&dropout_back(&d_sum3, &c.drop3), &c.ffn, &p.ffn, &mut g.ffn);
    let d_sum2 = layer_norm_bwd(&dy2, &c.ln2, &p.norm2, &mut g.norm2);
    let (dq_cross, d_enc) = mha_bwd(&dropout_back(&d_sum2, &c.drop2), &c.cross_attn, &p.cross_attn, &mut g.cross_attn);
    let dy1 = d_sum2 + dq_cross;
    let d_sum1 = layer_norm_bwd(&dy1, &c.ln1, &p.norm1, &mut g.norm1);
    let (dq, dkv) = mha_bwd(&dropout_back(&d_sum1, &c.drop1), &c.self_attn, &p.self_attn, &mut g.self_attn);
    (d_sum1 + dq + dkv, d_enc)
}

/// Post-norm decoder block: masked self-attention, cross-attention over the
/// encoder output under the same mask, then feed-forward.
pub fn decoder_layer<F: Real>(
    y: &Array2<F>,
    enc_out: &Array2<F>,
    p: &DecoderLayerParams<F>,
    n_heads: usize,
    mask: &AttentionMask,
    dropout: Option<&mut Dropout>,
) -> Result<Array2<F>> {
    Ok(decoder_layer_fwd(y, enc_out, p, n_heads, mask, dropout)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    // Naive double loop with explicit -inf masking.
    fn attention_oracle(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, mask: &AttentionMask) -> Array2<f64> {
        let (n, dk) = q.dim();
        let m = k.nrows();
        let mut out = Array2::zeros((n, v.ncols()));
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| {
                    if mask.allowed(i, j) {
                        (0..dk).map(|t| q[[i, t]] * k[[j, t]]).sum::<f64>() / (dk as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for c in 0..v.ncols() {
                    out[[i, c]] += e[j] / z * v[[j, c]];
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value() {
        let q = random(1, 4, 1);
        let k = random(1, 4, 2);
        let v = random(1, 3, 3);
        let out = attention(&q.view(), &k.view(), &v.view(), &AttentionMask::full(1, 1)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q: Array2<f64> = array![[0.3, -0.2]];
        let k = array![[1.0, 2.0], [1.0, 2.0]];
        let v = array![[1.0, 5.0], [3.0, -1.0]];
        let out = attention(&q.view(), &k.view(), &v.view(), &AttentionMask::full(1, 2)).unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-12 && (out[[0, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle() {
        let (q, k, v) = (random(4, 6, 4), random(4, 6, 5), random(4, 6, 6));
        let mask = AttentionMask::causal(&[true, false, true, true]);
        let mask = AttentionMask::from_matrix(Array2::from_shape_fn((4, 4), |(i, j)| {
            mask.allowed(i, j) || (i == 1 && j == 0)
        }));
        let ours = attention(&q.view(), &k.view(), &v.view(), &mask).unwrap();
        let oracle = attention_oracle(&q, &k, &v, &mask);
        let diff = (&ours - &oracle).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let q = random(5, 4, 7) * 50.0;
        let k = random(5, 4, 8) * 50.0;
        let w = attention_weights(&q.view(), &k.view(), &AttentionMask::lower_triangular(5)).unwrap();
        for i in 0..5 {
            assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
            for j in i + 1..5 {
                assert_eq!(w[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn empty_row_is_an_error() {
        let q = random(2, 2, 1);
        let err = attention_weights(&q.view(), &q.view(), &AttentionMask::causal(&[false, true])).unwrap_err();
        assert!(matches!(err, Error::EmptyAttentionRow { row: 0 }));
    }

    #[test]
    fn layer_norm_basics() {
        let ones = Array1::<f64>::ones(4);
        let shift: Array1<f64> = array![0.5, -1.0, 2.0, 0.0];
        let y = layer_norm(array![3.0, 3.0, 3.0, 3.0].view(), ones.view(), shift.view());
        assert_eq!(y, shift);

        let x: Array1<f64> = array![0.2, -1.3, 4.0, 0.7, 2.2];
        let y = layer_norm(x.view(), Array1::ones(5).view(), Array1::zeros(5).view());
        let mean = y.sum() / 5.0;
        let var = y.mapv(|v| (v - mean).powi(2)).sum() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);

        let scale = array![1.0, 2.0, 0.5, -1.0, 3.0];
        let bias = array![0.1, 0.2, 0.3, 0.4, 0.5];
        let y = layer_norm(x.view(), scale.view(), bias.view());
        let m = x.sum() / 5.0;
        let v = x.iter().map(|&t| (t - m).powi(2)).sum::<f64>() / 5.0;
        for i in 0..5 {
            let expected = (x[i] - m) / (v + 1e-5).sqrt() * scale[i] + bias[i];
            assert!((y[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn feed_forward_by_hand() {
        let p: FeedForwardParams<f64> = FeedForwardParams {
            w1: array![[1.0, -1.0], [2.0, 0.5]],
            b1: array![0.0, 1.0],
            w2: array![[1.0, 0.0], [0.0, 2.0]],
            b2: array![0.5, -0.5],
        };
        // x=[1,1]: h=[3, 0.5] -> relu same -> [3.5, 0.5]
        // x=[1,-1]: h=[-1, -0.5] -> relu 0 -> b2
        let out = feed_forward(&array![[1.0, 1.0], [1.0, -1.0]], &p);
        assert_eq!(out, array![[3.5, 0.5], [0.5, -0.5]]);

        let zero = FeedForwardParams {
            w1: Array2::zeros((2, 3)),
            b1: Array1::zeros(3),
            w2: Array2::zeros((3, 2)),
            b2: array![1.5, -2.0],
        };
        let out = feed_forward(&random(4, 2, 3), &zero);
        assert!(out.outer_iter().all(|r| r == array![1.5, -2.0]));
    }

    #[test]
    fn dropout_mask_statistics() {
        let mut d = Dropout::new(0.1, 3);
        let m: Array2<f64> = d.mask((100, 100)).unwrap();
        let dropped = m.iter().filter(|&&v| v == 0.0).count();
        assert!((800..1200).contains(&dropped), "{dropped}");
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
        assert!(Dropout::new(0.0, 3).mask::<f64>((2, 2)).is_none());
    }
}
