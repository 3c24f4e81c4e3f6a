#![allow(dead_code)]

use ktformer::features::{EncodedWindow, Stream, VocabSpec, START_TOKEN};
use ktformer::model::{init_params, ModelConfig, ModelParams, Real};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(max_seq: usize, dropout: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_seq,
        dropout,
        vocab: VocabSpec::new(5),
        seed,
    }
}

/// Non-pad id range of each stream.
pub fn id_range(vocab: &VocabSpec, s: Stream) -> u32 {
    vocab.pad_id(s)
}

/// A left-padded window with `n_valid` random events and consistent shifted
/// responses.
pub fn random_window(rng: &mut ChaCha8Rng, vocab: &VocabSpec, max_seq: usize, n_valid: usize, user_id: u64) -> EncodedWindow {
    let mut w = EncodedWindow::padded(vocab, max_seq, user_id, 0);
    let start = max_seq - n_valid;
    for pos in start..max_seq {
        w.valid[pos] = true;
        w.target[pos] = rng.random_range(0..2);
        for s in [
            Stream::Question,
            Stream::Part,
            Stream::Explanation,
            Stream::Elapsed,
            Stream::LagSeconds,
            Stream::LagMinutes,
            Stream::LagDays,
        ] {
            let hi = id_range(vocab, s);
            w.stream_mut(s)[pos] = rng.random_range(0..hi);
        }
        w.response[pos] = if pos == start {
            START_TOKEN
        } else {
            1 + u32::from(w.target[pos - 1])
        };
    }
    w
}

/// Seeded parameters with every bias, shift and scale moved away from its
/// initial constant.
pub fn random_params<F: Real>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams<F> {
    let mut p = init_params::<F>(config).expect("valid config");
    for (name, mut t) in p.tensors_mut() {
        let is_bias = name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".shift") || name == "head.b";
        let is_scale = name.ends_with(".scale");
        if is_bias || is_scale {
            for x in t.iter_mut() {
                *x += F::cast(rng.random_range(-0.3..0.3));
            }
        }
    }
    p
}

pub struct GradCheckReport {
    pub tensors: usize,
    pub compared: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
    pub worst_at: String,
}

fn set_scalar(p: &mut ModelParams<f64>, tensor: usize, index: usize, value: f64) {
    let mut all = p.tensors_mut();
    all[tensor].1.as_slice_mut().expect("contiguous tensor")[index] = value;
}

/// Compares analytic gradients of the mean training loss (dropout active
/// with a fixed seed) against central differences with step `h`.
///
/// Every element of every tensor is compared, except embedding rows whose
/// analytic gradient is exactly zero: those are rows no window refers to,
/// and three of them per table are spot-checked instead.
pub fn gradient_check(
    params: &ModelParams<f64>,
    batch: &[&EncodedWindow],
    dropout_seed: u64,
    h: f64,
    rel_tol: f64,
) -> GradCheckReport {
    use ktformer::train::batch_gradients;

    let loss = |p: &ModelParams<f64>| batch_gradients(p, batch, Some(dropout_seed)).expect("loss").mean_loss();
    let analytic = batch_gradients(params, batch, Some(dropout_seed)).expect("gradients").grads;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut report = GradCheckReport {
        tensors: names.len(),
        compared: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
        worst_at: String::new(),
    };
    let mut work = params.clone();
    for (ti, name) in names.iter().enumerate() {
        let grad_t = analytic.tensors()[ti].1.to_owned();
        let base_t = params.tensors()[ti].1.to_owned();
        let grads = grad_t.as_slice().expect("contiguous");
        let base = base_t.as_slice().expect("contiguous");
        let shape = grad_t.shape().to_vec();
        let mut indices: Vec<usize> = Vec::new();
        if name.starts_with("emb.") && shape.len() == 2 {
            let cols = shape[1];
            let mut zero_rows = Vec::new();
            for r in 0..shape[0] {
                let row = &grads[r * cols..(r + 1) * cols];
                if row.iter().all(|&g| g == 0.0) {
                    zero_rows.push(r);
                } else {
                    indices.extend(r * cols..(r + 1) * cols);
                }
            }
            let picks = [0, zero_rows.len() / 2, zero_rows.len().saturating_sub(1)];
            for &k in picks.iter().filter(|_| !zero_rows.is_empty()) {
                indices.extend(zero_rows[k] * cols..(zero_rows[k] + 1) * cols);
            }
            indices.sort_unstable();
            indices.dedup();
        } else {
            indices.extend(0..grads.len());
        }
        for i in indices {
            set_scalar(&mut work, ti, i, base[i] + h);
            let up = loss(&work);
            set_scalar(&mut work, ti, i, base[i] - h);
            let down = loss(&work);
            set_scalar(&mut work, ti, i, base[i]);
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i];
            let scale = a.abs().max(numeric.abs());
            if scale <= 1e-8 {
                continue;
            }
            report.compared += 1;
            let rel = (a - numeric).abs() / scale;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_at = format!("{name}[{i}]");
            }
            if rel > rel_tol {
                report.failures.push(format!("{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}"));
            }
        }
    }
    report
}
