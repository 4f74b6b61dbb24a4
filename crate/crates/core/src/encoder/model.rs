use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Batch, EncoderParams, Example, LayerParams};
use crate::constrained::VisibleMatrix;
use crate::error::{Error, Result};

/// Additive pre-softmax logit for invisible pairs.
pub const MASK_VALUE: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
const PROB_FLOOR: f64 = 1e-12;
/// Examples per gradient accumulator. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 4;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let m1 = dxhat.mean_axis(Axis(1)).expect("non-empty rows").insert_axis(Axis(1));
    let m2 = (&dxhat * &cache.xhat)
        .mean_axis(Axis(1))
        .expect("non-empty rows")
        .insert_axis(Axis(1));
    (dxhat - m1 - &cache.xhat * &m2) * cache.inv_std.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn additive_mask(visible: &VisibleMatrix, n: usize) -> Array2<f64> {
    assert!(visible.len() >= n, "visible matrix smaller than the sequence");
    Array2::from_shape_fn((n, n), |(i, j)| if visible.get(i, j) { 0.0 } else { MASK_VALUE })
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

struct Dropout<'r> {
    rng: &'r mut ChaCha8Rng,
    rate: f64,
}

struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    dropped: Vec<Array2<f64>>,
    masks: Option<Vec<Array2<f64>>>,
    ctx: Array2<f64>,
    ln: LnCache,
}

fn attention_forward(
    h: &Array2<f64>,
    mask: &Array2<f64>,
    lp: &LayerParams,
    n_heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<f64>, AttentionCache) {
    let (n, d) = h.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = h.dot(&lp.wq) + &lp.bq;
    let k = h.dot(&lp.wk) + &lp.bk;
    let v = h.dot(&lp.wv) + &lp.bv;
    let mut ctx = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    let mut dropped = Vec::with_capacity(n_heads);
    let mut masks = dropout.as_ref().map(|_| Vec::with_capacity(n_heads));
    for head in 0..n_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale + mask;
        softmax_rows(&mut scores);
        let used = match dropout.as_deref_mut() {
            Some(dr) => {
                let m = dropout_mask(dr.rng, (n, n), dr.rate);
                let out = &scores * &m;
                masks.as_mut().expect("masks exist with dropout").push(m);
                out
            }
            None => scores.clone(),
        };
        ctx.slice_mut(cols).assign(&used.dot(&v.slice(cols)));
        probs.push(scores);
        dropped.push(used);
    }
    let out = ctx.dot(&lp.wo) + &lp.bo;
    let (h1, ln) = layer_norm(&(h + &out), &lp.ln1_g, &lp.ln1_b);
    (
        h1,
        AttentionCache {
            q,
            k,
            v,
            probs,
            dropped,
            masks,
            ctx,
            ln,
        },
    )
}

/// One attention sub-block on an unpadded hidden state: per-head masked
/// scaled dot-product attention, output projection, residual and layer norm.
pub fn masked_attention(
    hidden: &Array2<f64>,
    visible: &VisibleMatrix,
    layer: &LayerParams,
    n_heads: usize,
) -> Array2<f64> {
    let mask = additive_mask(visible, hidden.nrows());
    attention_forward(hidden, &mask, layer, n_heads, None).0
}

struct LayerCache {
    input: Array2<f64>,
    attn: AttentionCache,
    h1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ln2: LnCache,
}

struct Trace {
    ln0: LnCache,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    cls: Array1<f64>,
    probs: [f64; 2],
}

fn raw_embedding(params: &EncoderParams, ex: &Example<'_>) -> Result<Array2<f64>> {
    let cfg = &params.config;
    let n = ex.len();
    let mut e = Array2::zeros((n, cfg.d_model));
    for i in 0..n {
        let id = ex.ids[i] as usize;
        let pos = ex.soft_positions[i];
        if id >= cfg.vocab_size {
            return Err(Error::Domain(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
        }
        if pos >= cfg.max_position {
            return Err(Error::Domain(format!("soft position {pos} >= max_position {}", cfg.max_position)));
        }
        let mut row = e.row_mut(i);
        row += &params.tok_emb.row(id);
        row += &params.pos_emb.row(pos);
        if cfg.use_segments {
            row += &params.seg_emb.row(usize::from(ex.segments[i].min(1)));
        }
    }
    Ok(e)
}

/// Layer-normalized embedding of one example (no dropout).
pub fn embed_example(params: &EncoderParams, ex: &Example<'_>) -> Result<Array2<f64>> {
    let e = raw_embedding(params, ex)?;
    Ok(layer_norm(&e, &params.emb_ln_g, &params.emb_ln_b).0)
}

/// Token + soft-position + segment embedding with layer norm, `B x L x d`.
/// Padding rows are embedded like any other token.
pub fn embed(batch: &Batch, params: &EncoderParams) -> Result<Array3<f64>> {
    let (b, l) = batch.ids.dim();
    let mut out = Array3::zeros((b, l, params.config.d_model));
    for i in 0..b {
        let ex = Example {
            ids: batch.ids.row(i).to_vec(),
            soft_positions: batch.soft_positions.row(i).to_vec(),
            segments: batch.segments.row(i).to_vec(),
            visible: &batch.visible[i],
            label: batch.labels[i],
        };
        out.slice_mut(s![i, .., ..]).assign(&embed_example(params, &ex)?);
    }
    Ok(out)
}

fn forward_trace(params: &EncoderParams, ex: &Example<'_>, rng: Option<&mut ChaCha8Rng>) -> Result<Trace> {
    let cfg = &params.config;
    if ex.is_empty() {
        return Err(Error::Domain("empty sequence".into()));
    }
    let mut dropout = rng
        .filter(|_| cfg.dropout_rate > 0.0)
        .map(|rng| Dropout {
            rng,
            rate: cfg.dropout_rate,
        });
    let e = raw_embedding(params, ex)?;
    let (mut h, ln0) = layer_norm(&e, &params.emb_ln_g, &params.emb_ln_b);
    let emb_mask = dropout.as_mut().map(|dr| {
        let m = dropout_mask(dr.rng, h.dim(), dr.rate);
        h *= &m;
        m
    });
    let mask = additive_mask(ex.visible, ex.len());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (h1, attn) = attention_forward(&h, &mask, lp, cfg.n_heads, dropout.as_mut());
        let pre_act = h1.dot(&lp.w1) + &lp.b1;
        let act = pre_act.mapv(gelu);
        let ff = act.dot(&lp.w2) + &lp.b2;
        let (h2, ln2) = layer_norm(&(&h1 + &ff), &lp.ln2_g, &lp.ln2_b);
        layers.push(LayerCache {
            input: std::mem::replace(&mut h, h2),
            attn,
            h1,
            pre_act,
            act,
            ln2,
        });
    }
    let cls = h.row(0).to_owned();
    let logits = cls.dot(&params.cls_w) + &params.cls_b;
    let max = logits[0].max(logits[1]);
    let (e0, e1) = ((logits[0] - max).exp(), (logits[1] - max).exp());
    let probs = [e0 / (e0 + e1), e1 / (e0 + e1)];
    if !probs.iter().all(|p| p.is_finite()) {
        return Err(Error::Numerical(format!("non-finite class probabilities {probs:?}")));
    }
    Ok(Trace {
        ln0,
        emb_mask,
        layers,
        cls,
        probs,
    })
}

fn backward(params: &EncoderParams, ex: &Example<'_>, trace: &Trace, scale: f64, grads: &mut EncoderParams) {
    let cfg = &params.config;
    let (n, d) = (ex.len(), cfg.d_model);
    let dh_size = cfg.head_dim();
    let attn_scale = 1.0 / (dh_size as f64).sqrt();

    let y = usize::from(ex.label.min(1));
    let mut dz = Array1::from(vec![trace.probs[0], trace.probs[1]]);
    dz[y] -= 1.0;
    dz *= scale;
    for i in 0..d {
        for j in 0..2 {
            grads.cls_w[[i, j]] += trace.cls[i] * dz[j];
        }
    }
    grads.cls_b += &dz;
    let mut dh = Array2::zeros((n, d));
    dh.row_mut(0).assign(&params.cls_w.dot(&dz));

    for (l, cache) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let lg = &mut grads.layers[l];
        let du2 = layer_norm_backward(&dh, &cache.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
        lg.w2 += &cache.act.t().dot(&du2);
        lg.b2 += &du2.sum_axis(Axis(0));
        let mut dpre = du2.dot(&lp.w2.t());
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre_act)
            .for_each(|g, &x| *g *= gelu_grad(x));
        lg.w1 += &cache.h1.t().dot(&dpre);
        lg.b1 += &dpre.sum_axis(Axis(0));
        let dh1 = du2 + dpre.dot(&lp.w1.t());

        let a = &cache.attn;
        let du1 = layer_norm_backward(&dh1, &a.ln, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        lg.wo += &a.ctx.t().dot(&du1);
        lg.bo += &du1.sum_axis(Axis(0));
        let dctx = du1.dot(&lp.wo.t());
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dh_size..(head + 1) * dh_size];
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&a.dropped[head].t().dot(&dctx_h));
            let mut dprobs = dctx_h.dot(&a.v.slice(cols).t());
            if let Some(masks) = &a.masks {
                dprobs *= &masks[head];
            }
            let p = &a.probs[head];
            let row_dot = (&dprobs * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = (dprobs - &row_dot) * p * attn_scale;
            dq.slice_mut(cols).assign(&dscores.dot(&a.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&a.q.slice(cols)));
        }
        let x = &cache.input;
        lg.wq += &x.t().dot(&dq);
        lg.bq += &dq.sum_axis(Axis(0));
        lg.wk += &x.t().dot(&dk);
        lg.bk += &dk.sum_axis(Axis(0));
        lg.wv += &x.t().dot(&dv);
        lg.bv += &dv.sum_axis(Axis(0));
        dh = du1 + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
    }

    if let Some(m) = &trace.emb_mask {
        dh *= m;
    }
    let de = layer_norm_backward(&dh, &trace.ln0, &params.emb_ln_g, &mut grads.emb_ln_g, &mut grads.emb_ln_b);
    for i in 0..n {
        let row = de.row(i);
        let mut t = grads.tok_emb.row_mut(ex.ids[i] as usize);
        t += &row;
        let mut p = grads.pos_emb.row_mut(ex.soft_positions[i]);
        p += &row;
        if cfg.use_segments {
            let mut sg = grads.seg_emb.row_mut(usize::from(ex.segments[i].min(1)));
            sg += &row;
        }
    }
}

/// Class probabilities `[p(non-match), p(match)]` per example, `B x 2`.
pub fn forward(batch: &Batch, params: &EncoderParams) -> Result<Array2<f64>> {
    let rows: Vec<[f64; 2]> = (0..batch.len())
        .into_par_iter()
        .map(|b| forward_trace(params, &batch.example(b), None).map(|t| t.probs))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), 2));
    for (i, r) in rows.iter().enumerate() {
        out[[i, 0]] = r[0];
        out[[i, 1]] = r[1];
    }
    Ok(out)
}

/// Attention probabilities of every layer and head for one example, before
/// dropout.
pub fn attention_weights(params: &EncoderParams, ex: &Example<'_>) -> Result<Vec<Vec<Array2<f64>>>> {
    let trace = forward_trace(params, ex, None)?;
    Ok(trace.layers.into_iter().map(|l| l.attn.probs).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: f64,
    /// Some target probability was below the 1e-12 floor.
    pub clamped: bool,
}

/// Mean negative log-likelihood of the labels, natural log.
pub fn loss(probs: &Array2<f64>, labels: &[u8]) -> Loss {
    assert_eq!(probs.nrows(), labels.len(), "one label per probability row");
    let mut clamped = false;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs[[i, usize::from(y.min(1))]];
            if p < PROB_FLOOR {
                clamped = true;
            }
            -p.max(PROB_FLOOR).ln()
        })
        .sum();
    if clamped {
        log::warn!("target probability below {PROB_FLOOR:e}; loss clamped");
    }
    Loss {
        value: total / labels.len().max(1) as f64,
        clamped,
    }
}

fn example_seed(step_seed: u64, index: usize) -> u64 {
    step_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// Batch loss and its exact gradient with respect to every parameter.
///
/// `dropout_seed` enables dropout with the configured rate; `None` runs the
/// deterministic evaluation-mode network.
pub fn gradients(batch: &Batch, params: &EncoderParams, dropout_seed: Option<u64>) -> Result<(Loss, EncoderParams)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let starts: Vec<usize> = (0..batch.len()).step_by(GRAD_CHUNK).collect();
    let partials: Vec<(Vec<[f64; 2]>, EncoderParams)> = starts
        .par_iter()
        .map(|&start| {
            let mut grads = params.zeros_like();
            let mut probs = Vec::with_capacity(GRAD_CHUNK);
            for b in start..(start + GRAD_CHUNK).min(batch.len()) {
                let ex = batch.example(b);
                let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(example_seed(s, b)));
                let trace = forward_trace(params, &ex, rng.as_mut())?;
                backward(params, &ex, &trace, scale, &mut grads);
                probs.push(trace.probs);
            }
            Ok((probs, grads))
        })
        .collect::<Result<_>>()?;

    let mut total = params.zeros_like();
    let mut all_probs = Array2::zeros((batch.len(), 2));
    let mut row = 0;
    for (probs, g) in &partials {
        total.add_scaled(g, 1.0);
        for p in probs {
            all_probs[[row, 0]] = p[0];
            all_probs[[row, 1]] = p[1];
            row += 1;
        }
    }
    Ok((loss(&all_probs, &batch.labels), total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constrained::InjectedSequence;
    use crate::encoder::EncoderConfig;

    fn config(n_layers: usize, d: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            d_model: d,
            n_heads: 2,
            n_layers,
            d_ff: 2 * d,
            max_position: 16,
            dropout_rate: 0.0,
            use_segments: true,
            seed: 7,
        }
    }

    fn seq(tokens: &[u32], visible: VisibleMatrix, label: u8) -> InjectedSequence {
        let n = tokens.len();
        InjectedSequence {
            tokens: tokens.to_vec(),
            soft_positions: (0..n).collect(),
            visible,
            segments: (0..n).map(|i| u8::from(i >= n / 2)).collect(),
            trunk_mask: vec![true; n],
            label: Some(label),
        }
    }

    #[test]
    fn rows_sum_to_one_and_batch_rows_are_independent() {
        let p = EncoderParams::init(&config(2, 8)).unwrap();
        let a = seq(&[0, 6, 7, 1, 8, 9, 1], VisibleMatrix::ones(7), 1);
        let b = seq(&[0, 10, 1, 11, 1], VisibleMatrix::ones(5), 0);
        let batch = Batch::from_sequences(&[&a, &b, &a]).unwrap();
        let probs = forward(&batch, &p).unwrap();
        for r in probs.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(probs.row(0), probs.row(2));
        // padding does not leak: the short row equals its own unpadded run
        let alone = forward(&Batch::from_sequences(&[&b]).unwrap(), &p).unwrap();
        assert_eq!(alone.row(0), probs.row(1));
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut p = EncoderParams::init(&config(1, 8)).unwrap();
        p.cls_w.fill(0.0);
        let a = seq(&[0, 6, 1], VisibleMatrix::ones(3), 1);
        let probs = forward(&Batch::from_sequences(&[&a]).unwrap(), &p).unwrap();
        assert_eq!(probs.row(0).to_vec(), [0.5, 0.5]);
    }

    #[test]
    fn zero_tables_embed_to_bias() {
        let mut p = EncoderParams::init(&config(1, 8)).unwrap();
        p.tok_emb.fill(0.0);
        p.pos_emb.fill(0.0);
        p.seg_emb.fill(0.0);
        p.emb_ln_b.fill(0.25);
        let a = seq(&[0, 6, 1], VisibleMatrix::ones(3), 1);
        let e = embed_example(&p, &Example::from_sequence(&a)).unwrap();
        assert!(e.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn equal_soft_positions_share_position_embedding() {
        let mut p = EncoderParams::init(&config(1, 8)).unwrap();
        p.seg_emb.fill(0.0);
        let mut a = seq(&[6, 6], VisibleMatrix::ones(2), 0);
        a.soft_positions = vec![3, 3];
        a.segments = vec![0, 0];
        let e = embed_example(&p, &Example::from_sequence(&a)).unwrap();
        assert_eq!(e.row(0), e.row(1));
        a.soft_positions = vec![3, 16];
        assert!(matches!(embed_example(&p, &Example::from_sequence(&a)), Err(Error::Domain(_))));
    }

    #[test]
    fn self_only_token_attends_to_itself() {
        let p = EncoderParams::init(&config(1, 8)).unwrap();
        let mut v = VisibleMatrix::ones(4);
        for j in 0..4 {
            if j != 2 {
                v.set(2, j, false);
                v.set(j, 2, false);
            }
        }
        let a = seq(&[0, 6, 7, 1], v, 0);
        let maps = attention_weights(&p, &Example::from_sequence(&a)).unwrap();
        for head in &maps[0] {
            assert_eq!(head[[2, 2]], 1.0);
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            assert!(head[[0, 2]] < 1e-30);
        }
    }

    #[test]
    fn loss_values() {
        let uniform = Array2::from_elem((1, 2), 0.5);
        assert!((loss(&uniform, &[1]).value - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = ndarray::arr2(&[[0.0, 1.0]]);
        assert_eq!(loss(&perfect, &[1]).value, 0.0);
        let mixed = ndarray::arr2(&[[0.9, 0.1], [0.2, 0.8]]);
        assert!((loss(&mixed, &[0, 1]).value - 0.164_252_033_486_018).abs() < 1e-9);
        let l = loss(&perfect, &[0]);
        assert!(l.clamped);
        assert!((l.value - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn unused_vocabulary_rows_get_zero_gradient() {
        let p = EncoderParams::init(&config(2, 8)).unwrap();
        let a = seq(&[0, 6, 7, 1, 8, 1], VisibleMatrix::ones(6), 1);
        let (_, g) = gradients(&Batch::from_sequences(&[&a]).unwrap(), &p, None).unwrap();
        for id in [2, 3, 4, 5, 9, 10, 19] {
            assert!(g.tok_emb.row(id).iter().all(|&x| x == 0.0), "row {id}");
        }
        assert!(g.tok_emb.row(6).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gradients_are_deterministic_with_dropout() {
        let mut cfg = config(2, 8);
        cfg.dropout_rate = 0.2;
        let p = EncoderParams::init(&cfg).unwrap();
        let seqs: Vec<InjectedSequence> = (0..6).map(|i| seq(&[0, 6 + i, 7, 1, 8, 1], VisibleMatrix::ones(6), (i % 2) as u8)).collect();
        let refs: Vec<&InjectedSequence> = seqs.iter().collect();
        let batch = Batch::from_sequences(&refs).unwrap();
        let (l1, g1) = gradients(&batch, &p, Some(3)).unwrap();
        let (l2, g2) = gradients(&batch, &p, Some(3)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        let (l3, _) = gradients(&batch, &p, Some(4)).unwrap();
        assert_ne!(l1.value, l3.value);
    }
}
