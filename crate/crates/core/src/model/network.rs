//! Forward pass, CTC loss and hand-written backpropagation.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{LayerParams, ModelError, ModelParams, Positional, Result};
use crate::ctc::{marginal_log_prob_with_grad, CtcError};
use crate::lattice::LogProbLattice;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sinusoidal(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 10000f64.powf((i / 2 * 2) as f64 / dim as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *is);
    }
    let y = &xhat * gain + bias;
    (y, NormCache { xhat, inv_std })
}

/// Returns d input; accumulates gain and bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let is = cache.inv_std[r];
        for c in 0..dy.ncols() {
            dx[[r, c]] = is * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn add_row(x: &mut Array2<f64>, bias: ArrayView1<f64>) {
    for mut r in x.rows_mut() {
        r += &bias;
    }
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
    ln1: NormCache,
    abar: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ln2: NormCache,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    top: Array2<f64>,
    log_probs: Array2<f64>,
}

fn check_ids(params: &ModelParams, ids: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if ids.len() > cfg.max_len {
        return Err(ModelError::SequenceTooLong { len: ids.len(), max_len: cfg.max_len });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.output_dim()) {
        return Err(ModelError::TokenOutOfRange(bad));
    }
    Ok(())
}

fn layer_forward(p: &LayerParams, x: Array2<f64>, heads: usize, dk: usize) -> (Array2<f64>, LayerCache) {
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = Array2::zeros((x.nrows(), heads * dk));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let z1 = &x + &concat.dot(&p.wo);
    let (abar, ln1) = layer_norm(&z1, &p.ln1_gain, &p.ln1_bias);
    let mut pre_act = abar.dot(&p.w1);
    add_row(&mut pre_act, p.b1.view());
    let act = pre_act.mapv(gelu);
    let mut mlp = act.dot(&p.w2);
    add_row(&mut mlp, p.b2.view());
    let z2 = &abar + &mlp;
    let (out, ln2) = layer_norm(&z2, &p.ln2_gain, &p.ln2_bias);
    let cache = LayerCache { input: x, q, k, v, probs, heads: concat, ln1, abar, pre_act, act, ln2 };
    (out, cache)
}

fn run(params: &ModelParams, ids: &[usize]) -> Result<ForwardCache> {
    check_ids(params, ids)?;
    let cfg = &params.config;
    let mut x = params.embed.select(Axis(0), ids);
    match cfg.positional {
        Positional::Sinusoidal => x += &sinusoidal(ids.len(), cfg.model_dim),
        Positional::Learned => x += &params.pos.as_ref().expect("learned positions").slice(s![..ids.len(), ..]),
        Positional::None => {}
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for p in &params.layers {
        let (next, cache) = layer_forward(p, x, cfg.heads, cfg.attn_dim);
        layers.push(cache);
        x = next;
    }
    let mut log_probs = x.dot(&params.out);
    for mut row in log_probs.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    Ok(ForwardCache { layers, top: x, log_probs })
}

/// Per-slot log-softmax output over words and the blank.
pub fn forward(params: &ModelParams, ids: &[usize]) -> Result<LogProbLattice> {
    let cache = run(params, ids)?;
    let (slots, width) = cache.log_probs.dim();
    let data = cache.log_probs.into_raw_vec_and_offset().0;
    Ok(LogProbLattice::from_raw(slots, width, data))
}

/// Slots a CTC alignment needs: one per word plus a blank between adjacent repeats.
pub fn required_slots(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn layer_backward(p: &LayerParams, c: &LayerCache, dout: Array2<f64>, g: &mut LayerParams, heads: usize, dk: usize) -> Array2<f64> {
    let dz2 = layer_norm_backward(&dout, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    // z2 = abar + act W2 + b2
    g.w2 += &c.act.t().dot(&dz2);
    g.b2 += &dz2.sum_axis(Axis(0));
    let mut dpre = dz2.dot(&p.w2.t());
    dpre.zip_mut_with(&c.pre_act, |d, &u| *d *= gelu_grad(u));
    g.w1 += &c.abar.t().dot(&dpre);
    g.b1 += &dpre.sum_axis(Axis(0));
    let dabar = dz2 + dpre.dot(&p.w1.t());

    let dz1 = layer_norm_backward(&dabar, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    // z1 = x + heads Wo
    g.wo += &c.heads.t().dot(&dz1);
    let dheads = dz1.dot(&p.wo.t());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk_mat = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let a = &c.probs[h];
        let dh = dheads.slice(cols);
        let da = dh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dh));
        let mut dscores = da;
        for (mut drow, arow) in dscores.rows_mut().into_iter().zip(a.rows()) {
            let inner = drow.dot(&arow);
            drow.zip_mut_with(&arow, |d, &p| *d = p * (*d - inner));
        }
        dscores *= scale;
        dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
        dk_mat.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
    }
    g.wq += &c.input.t().dot(&dq);
    g.wk += &c.input.t().dot(&dk_mat);
    g.wv += &c.input.t().dot(&dv);
    dz1 + dq.dot(&p.wq.t()) + dk_mat.dot(&p.wk.t()) + dv.dot(&p.wv.t())
}

/// Negative CTC log-likelihood of `target` and its exact gradient with respect to
/// every parameter.
pub fn loss_and_grad(params: &ModelParams, ids: &[usize], target: &[usize]) -> Result<(f64, ModelParams)> {
    let needed = required_slots(target);
    if needed > ids.len() {
        return Err(ModelError::TargetTooLong { needed, slots: ids.len() });
    }
    let cfg = &params.config;
    if target.iter().any(|&y| y >= cfg.vocab_size) {
        return Err(CtcError::TargetContainsBlank.into());
    }
    let cache = run(params, ids)?;
    let (slots, width) = cache.log_probs.dim();
    let lattice = LogProbLattice::from_raw(slots, width, cache.log_probs.iter().copied().collect());
    let (logp, dlp) = marginal_log_prob_with_grad(&lattice, target)?;
    let nll = -logp;

    // d nll / d logits through log-softmax.
    let mut dlogits = Array2::from_shape_vec((slots, width), dlp).expect("lattice shape");
    dlogits.mapv_inplace(|g| -g);
    for (mut drow, lrow) in dlogits.rows_mut().into_iter().zip(cache.log_probs.rows()) {
        let total = drow.sum();
        drow.zip_mut_with(&lrow, |d, &lp| *d -= lp.exp() * total);
    }

    let mut grads = params.zeros_like();
    grads.out = cache.top.t().dot(&dlogits);
    let mut dx = dlogits.dot(&params.out.t());
    for (i, (p, c)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        dx = layer_backward(p, c, dx, &mut grads.layers[i], cfg.heads, cfg.attn_dim);
    }
    for (s, &id) in ids.iter().enumerate() {
        let mut row = grads.embed.row_mut(id);
        row += &dx.row(s);
    }
    if let Some(pos) = &mut grads.pos {
        let mut head = pos.slice_mut(s![..ids.len(), ..]);
        head += &dx;
    }
    Ok((nll, grads))
}
