//! Pre-norm decoder blocks shared by the reference model and the selector.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, MacCategory, Tape, Tensor, Var};
use crate::weights::ParamMap;

/// Parameters of a [`ParamMap`] recorded as tape leaves.
pub(crate) struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }
}

pub(crate) fn bind(tape: &mut Tape, params: &ParamMap) -> Bound {
    let vars = params
        .iter()
        .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
        .collect();
    Bound { vars }
}

/// Gradients for every bound parameter, zeros where nothing flowed.
pub(crate) fn collect_grads(bound: &Bound, grads: &Gradients, params: &ParamMap) -> ParamMap {
    let mut out = ParamMap::new();
    for (name, t) in params.iter() {
        let v = bound.vars[name];
        out.insert(name.clone(), grads.get_or_zeros(v, t.shape()));
    }
    out
}

pub(crate) fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub(crate) fn init_linear(
    params: &mut ParamMap,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    params.insert(
        format!("{name}.w"),
        randn(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
    );
    params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_norm(params: &mut ParamMap, name: &str, d: usize) {
    params.insert(format!("{name}.g"), Tensor::filled(&[d], 1.0));
    params.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub(crate) fn init_block(
    params: &mut ParamMap,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
    ffn: usize,
) {
    init_norm(params, &format!("{prefix}.ln1"), d);
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(
            format!("{prefix}.attn.{w}"),
            randn(rng, &[d, d], 1.0 / (d as f64).sqrt()),
        );
    }
    init_norm(params, &format!("{prefix}.ln2"), d);
    init_linear(params, rng, &format!("{prefix}.ffn.up"), d, ffn);
    init_linear(params, rng, &format!("{prefix}.ffn.down"), ffn, d);
}

pub(crate) fn check_block(params: &ParamMap, prefix: &str, d: usize, ffn: usize) -> Result<()> {
    for n in ["ln1", "ln2"] {
        params.expect_shape(&format!("{prefix}.{n}.g"), &[d])?;
        params.expect_shape(&format!("{prefix}.{n}.b"), &[d])?;
    }
    for w in ["wq", "wk", "wv", "wo"] {
        params.expect_shape(&format!("{prefix}.attn.{w}"), &[d, d])?;
    }
    params.expect_shape(&format!("{prefix}.ffn.up.w"), &[d, ffn])?;
    params.expect_shape(&format!("{prefix}.ffn.up.b"), &[ffn])?;
    params.expect_shape(&format!("{prefix}.ffn.down.w"), &[ffn, d])?;
    params.expect_shape(&format!("{prefix}.ffn.down.b"), &[d])?;
    Ok(())
}

pub(crate) fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, bias)
}

pub(crate) fn norm(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = b.get(&format!("{name}.g"))?;
    let bias = b.get(&format!("{name}.b"))?;
    tape.layer_norm(x, g, bias)
}

/// Output of one block: the residual stream and the post-softmax attention
/// matrix of every head (`[n×n]`).
pub(crate) struct BlockOut {
    pub x: Var,
    pub attention: Vec<Var>,
}

/// One pre-norm block. With `attention_only` the feed-forward half is
/// skipped and `x` is the post-attention residual.
pub(crate) fn block(
    tape: &mut Tape,
    b: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: &Rc<[bool]>,
    attention_only: bool,
) -> Result<BlockOut> {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let h = norm(tape, b, &format!("{prefix}.ln1"), x)?;

    tape.set_mac_category(Some(MacCategory::Projection));
    let q = tape.matmul(h, b.get(&format!("{prefix}.attn.wq"))?)?;
    let k = tape.matmul(h, b.get(&format!("{prefix}.attn.wk"))?)?;
    let v = tape.matmul(h, b.get(&format!("{prefix}.attn.wv"))?)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(heads);
    let mut contexts = Vec::with_capacity(heads);
    tape.set_mac_category(Some(MacCategory::Attention));
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax_rows_masked(scores, mask)?;
        contexts.push(tape.matmul(p, vh)?);
        attention.push(p);
    }
    let ctx = if heads == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    tape.set_mac_category(Some(MacCategory::Projection));
    let o = tape.matmul(ctx, b.get(&format!("{prefix}.attn.wo"))?)?;
    let x = tape.add(x, o)?;
    if attention_only {
        tape.set_mac_category(None);
        return Ok(BlockOut { x, attention });
    }

    let h2 = norm(tape, b, &format!("{prefix}.ln2"), x)?;
    tape.set_mac_category(Some(MacCategory::FeedForward));
    let up = linear(tape, b, &format!("{prefix}.ffn.up"), h2)?;
    let act = tape.gelu(up);
    let down = linear(tape, b, &format!("{prefix}.ffn.down"), act)?;
    tape.set_mac_category(None);
    let x = tape.add(x, down)?;
    Ok(BlockOut { x, attention })
}

/// Causal mask over `n` positions.
pub(crate) fn causal_mask(n: usize) -> Rc<[bool]> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}

/// Visual positions `0..visual` attend to each other without order; query
/// positions attend to every visual position and causally to the query.
pub(crate) fn selector_mask(visual: usize, n: usize) -> Rc<[bool]> {
    (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            j < visual || (i >= visual && j <= i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks() {
        let c = causal_mask(3);
        assert_eq!(
            &c[..],
            &[true, false, false, true, true, false, true, true, true]
        );
        let s = selector_mask(2, 4);
        // visual rows see only visual columns
        assert_eq!(&s[0..4], &[true, true, false, false]);
        // first query row sees visual + itself
        assert_eq!(&s[8..12], &[true, true, true, false]);
        assert_eq!(&s[12..16], &[true, true, true, true]);
    }
}
