use crate::grammar::{encode, MoleculeString, Special, Vocabulary};
use crate::numerics::{softmax_rows, Axis, Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::{EncoderError, EncoderParams};

pub(crate) const LN_EPS: f64 = 1e-5;
const LAYER_STRIDE: usize = 15;
const EMB_FIELDS: usize = 4;

/// Tape handles of every parameter tensor, in canonical order.
#[derive(Clone, Debug)]
pub(crate) struct ParamVars {
    vars: Vec<Var>,
    layers: usize,
}

impl ParamVars {
    fn bind<T: Scalar>(tape: &mut Tape<T>, params: &EncoderParams<T>) -> Self {
        let vars = params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        Self {
            vars,
            layers: params.layers.len(),
        }
    }

    pub(crate) fn all(&self) -> &[Var] {
        &self.vars
    }

    fn token_emb(&self) -> Var {
        self.vars[0]
    }

    fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    fn emb_ln(&self) -> (Var, Var) {
        (self.vars[2], self.vars[3])
    }

    /// Field `f` (in `LAYER_FIELDS` order) of layer `l`.
    fn layer(&self, l: usize, f: usize) -> Var {
        self.vars[EMB_FIELDS + l * LAYER_STRIDE + f]
    }

    fn head(&self, f: usize) -> Var {
        self.vars[EMB_FIELDS + self.layers * LAYER_STRIDE + f]
    }

    fn mlm_bias(&self) -> Var {
        self.head(4)
    }
}

/// Everything one forward pass recorded.
///
/// Only valid (non-PAD) positions are evaluated: rows of every state and
/// attention matrix correspond to [`valid_positions`](Self::valid_positions).
/// Restricting the computation this way is exact, since PAD keys receive zero
/// attention and no valid row reads a PAD row.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub(crate) tape: Tape<T>,
    pub(crate) params: ParamVars,
    ids: Vec<usize>,
    validity: Vec<u8>,
    rows: Vec<usize>,
    pool_rows: Vec<usize>,
    pub(crate) h: Vec<Var>,
    pub(crate) attn: Vec<Vec<Var>>,
    alpha: Var,
    pooled: Var,
    pub(crate) logits: Var,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn layers(&self) -> usize {
        self.h.len() - 1
    }

    pub fn heads(&self) -> usize {
        self.attn.first().map_or(0, Vec::len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn validity(&self) -> &[u8] {
        &self.validity
    }

    /// Encoded positions of the evaluated rows, ascending.
    pub fn valid_positions(&self) -> &[usize] {
        &self.rows
    }

    /// Id at each evaluated row.
    pub fn row_ids(&self) -> Vec<usize> {
        self.rows.iter().map(|&p| self.ids[p]).collect()
    }

    /// Token states after layer `l` (`0` is the embedding output).
    pub fn state(&self, l: usize) -> &Tensor<T> {
        self.tape.value(self.h[l])
    }

    /// Attention probabilities of layer `l` (1-based) and head `head`.
    pub fn attention(&self, l: usize, head: usize) -> &Tensor<T> {
        self.tape.value(self.attn[l - 1][head])
    }

    /// Pooling weights per evaluated row, zero on CLS/SEP.
    pub fn alpha(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows.len()];
        let a = self.tape.value(self.alpha);
        for (k, &r) in self.pool_rows.iter().enumerate() {
            out[r] = a.data()[k];
        }
        out
    }

    /// Rows that take part in pooling.
    pub fn pool_rows(&self) -> &[usize] {
        &self.pool_rows
    }

    pub fn pooled(&self) -> &Tensor<T> {
        self.tape.value(self.pooled)
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }
}

fn layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    l: usize,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>), EncoderError> {
    let p = |f: usize| pv.layer(l, f);
    let d = tape.value(x).cols();
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();

    let q = tape.matmul(x, p(0))?;
    let q = tape.add(q, p(1))?;
    let k = tape.matmul(x, p(2))?;
    let v = tape.matmul(x, p(3))?;
    let v = tape.add(v, p(4))?;

    let mut probs = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, Axis::Cols, lo, hi)?;
        let kh = tape.slice(k, Axis::Cols, lo, hi)?;
        let vh = tape.slice(v, Axis::Cols, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scalar_mul(scores, scale)?;
        let a = tape.softmax(scores)?;
        outs.push(tape.matmul(a, vh)?);
        probs.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat(&outs, Axis::Cols)? };
    let o = tape.matmul(cat, p(5))?;
    let o = tape.add(o, p(6))?;
    let r = tape.add(x, o)?;
    let y = tape.layer_norm(r, p(7), p(8), T::of(LN_EPS))?;

    let f = tape.matmul(y, p(9))?;
    let f = tape.add(f, p(10))?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, p(11))?;
    let f = tape.add(f, p(12))?;
    let r = tape.add(y, f)?;
    let out = tape.layer_norm(r, p(13), p(14), T::of(LN_EPS))?;
    Ok((out, probs))
}

/// Pooling over `pool_rows` with head-averaged CLS-query attention of the
/// last layer, then the MLP head. Returns `(alpha, pooled, logits)`.
fn pool_and_head<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    last_attn: &[Var],
    last_state: Var,
    pool_rows: &[usize],
) -> Result<(Var, Var, Var), EncoderError> {
    let mut cls = Vec::with_capacity(last_attn.len());
    for &a in last_attn {
        cls.push(tape.slice(a, Axis::Rows, 0, 1)?);
    }
    let mut acc = cls[0];
    for &c in &cls[1..] {
        acc = tape.add(acc, c)?;
    }
    let avg = tape.scalar_mul(acc, T::one() / T::of_usize(cls.len()))?;
    let col = tape.transpose(avg)?;
    let picked = tape.gather(col, pool_rows.to_vec())?;
    let picked = tape.transpose(picked)?;
    let alpha = tape.normalize_rows(picked)?;
    let states = tape.gather(last_state, pool_rows.to_vec())?;
    let pooled = tape.matmul(alpha, states)?;

    let hid = tape.matmul(pooled, pv.head(0))?;
    let hid = tape.add(hid, pv.head(1))?;
    let hid = tape.relu(hid)?;
    let logits = tape.matmul(hid, pv.head(2))?;
    let logits = tape.add(logits, pv.head(3))?;
    Ok((alpha, pooled, logits))
}

fn is_pooled(id: usize) -> bool {
    id != Special::Cls.id() && id != Special::Sep.id() && id != Special::Pad.id()
}

fn check_inputs<T: Scalar>(params: &EncoderParams<T>, ids: &[usize], validity: &[u8]) -> Result<(), EncoderError> {
    let cfg = &params.config;
    if ids.len() != cfg.max_len || validity.len() != cfg.max_len {
        return Err(EncoderError::LengthMismatch {
            expected: cfg.max_len,
            got: ids.len().max(validity.len()),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(EncoderError::UnknownId(bad));
    }
    Ok(())
}

/// Embeddings and transformer blocks on a fresh tape.
pub(crate) fn run_layers<T: Scalar>(
    params: &EncoderParams<T>,
    ids: &[usize],
    validity: &[u8],
) -> Result<(Tape<T>, ParamVars, Vec<usize>, Vec<Var>, Vec<Vec<Var>>), EncoderError> {
    run_layers_offset(params, ids, validity, &[])
}

/// As [`run_layers`], adding `offsets[l-1]` (valid rows × d_model) to the
/// output of layer `l`. Missing offsets count as zero.
fn run_layers_offset<T: Scalar>(
    params: &EncoderParams<T>,
    ids: &[usize],
    validity: &[u8],
    offsets: &[Tensor<T>],
) -> Result<(Tape<T>, ParamVars, Vec<usize>, Vec<Var>, Vec<Vec<Var>>), EncoderError> {
    check_inputs(params, ids, validity)?;
    let rows: Vec<usize> = (0..ids.len()).filter(|&p| validity[p] == 1).collect();
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params);

    let row_ids: Vec<usize> = rows.iter().map(|&p| ids[p]).collect();
    let tok = tape.gather(pv.token_emb(), row_ids)?;
    let pos = tape.gather(pv.pos_emb(), rows.clone())?;
    let x = tape.add(tok, pos)?;
    let (g, b) = pv.emb_ln();
    let mut x = tape.layer_norm(x, g, b, T::of(LN_EPS))?;

    let mut h = vec![x];
    let mut attn = Vec::with_capacity(params.layers.len());
    for l in 0..params.layers.len() {
        let (mut out, probs) = layer_forward(&mut tape, &pv, l, x, params.config.heads)?;
        if let Some(off) = offsets.get(l) {
            let o = tape.leaf(off.clone());
            out = tape.add(out, o)?;
        }
        x = out;
        h.push(out);
        attn.push(probs);
    }
    Ok((tape, pv, rows, h, attn))
}

/// Runs the classifier on one encoded input.
pub fn forward<T: Scalar>(params: &EncoderParams<T>, ids: &[usize], validity: &[u8]) -> Result<ForwardTrace<T>, EncoderError> {
    forward_offset(params, ids, validity, &[])
}

/// [`forward`] with additive offsets on the layer outputs; see [`run_layers_offset`].
pub(crate) fn forward_offset<T: Scalar>(
    params: &EncoderParams<T>,
    ids: &[usize],
    validity: &[u8],
    offsets: &[Tensor<T>],
) -> Result<ForwardTrace<T>, EncoderError> {
    let (mut tape, pv, rows, h, attn) = run_layers_offset(params, ids, validity, offsets)?;
    if rows.first().map(|&p| ids[p]) != Some(Special::Cls.id()) {
        return Err(EncoderError::MissingCls);
    }
    let pool_rows: Vec<usize> = (0..rows.len()).filter(|&r| is_pooled(ids[rows[r]])).collect();
    if pool_rows.is_empty() {
        return Err(EncoderError::PoolingDegenerate);
    }
    let last = *h.last().expect("at least one state");
    let (alpha, pooled, logits) = pool_and_head(&mut tape, &pv, attn.last().expect("layers > 0"), last, &pool_rows)?;
    Ok(ForwardTrace {
        tape,
        params: pv,
        ids: ids.to_vec(),
        validity: validity.to_vec(),
        rows,
        pool_rows,
        h,
        attn,
        alpha,
        pooled,
        logits,
    })
}

/// Re-runs layers `l+1..=L` and the head from replacement states `h_l`
/// (rows as in `trace`) and returns the logits.
pub fn forward_suffix<T: Scalar>(
    params: &EncoderParams<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    h_l: &Tensor<T>,
) -> Result<Tensor<T>, EncoderError> {
    let layers = params.layers.len();
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params);
    let mut x = tape.leaf(h_l.clone());
    let mut last_attn = Vec::new();
    for layer in l..layers {
        let (out, probs) = layer_forward(&mut tape, &pv, layer, x, params.config.heads)?;
        x = out;
        last_attn = probs;
    }
    if l == layers {
        // Pooling weights come from the last layer's attention, which does not
        // depend on h^(L); reuse them as constants.
        last_attn = trace.attn[layers - 1]
            .iter()
            .map(|&a| tape.leaf(trace.tape.value(a).clone()))
            .collect();
    }
    let (_, _, logits) = pool_and_head(&mut tape, &pv, &last_attn, x, &trace.pool_rows)?;
    Ok(tape.value(logits).clone())
}

/// Class probabilities, or the single output in regression mode.
pub fn classify<T: Scalar>(params: &EncoderParams<T>, trace: &ForwardTrace<T>) -> Vec<T> {
    if params.config.is_regression() {
        trace.logits().data().to_vec()
    } else {
        softmax_rows(trace.logits()).into_data()
    }
}

/// `∂z_c / ∂h^(l)` for every layer `l = 1..=L`; rows as in the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients<T> {
    per_layer: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerGradients<T> {
    pub fn new(per_layer: Vec<Tensor<T>>) -> Self {
        Self { per_layer }
    }

    /// Gradient at layer `l` (1-based).
    pub fn layer(&self, l: usize) -> &Tensor<T> {
        &self.per_layer[l - 1]
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.per_layer.iter()
    }
}

/// Gradient of the pre-softmax logit of `target_class` with respect to every
/// hidden state. In regression mode the target must be 0.
pub fn layer_gradients<T: Scalar>(
    params: &EncoderParams<T>,
    trace: &ForwardTrace<T>,
    target_class: usize,
) -> Result<LayerGradients<T>, EncoderError> {
    let n = params.config.n_classes;
    if target_class >= n {
        return Err(EncoderError::InvalidTarget { target: target_class, classes: n });
    }
    let mut seed = Tensor::zeros(&[1, n]);
    seed.data_mut()[target_class] = T::one();
    let grads = trace.tape.backward_with(trace.logits, seed)?;
    Ok(LayerGradients::new(trace.h[1..].iter().map(|&v| grads.wrt(v)).collect()))
}

/// Default explanation target: the label class when known, else the argmax.
pub fn explanation_target<T: Scalar>(params: &EncoderParams<T>, trace: &ForwardTrace<T>, label: Option<usize>) -> usize {
    if params.config.is_regression() {
        return 0;
    }
    label.unwrap_or_else(|| argmax(trace.logits().data()))
}

pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `encode → forward → classify`.
pub fn predict<T: Scalar>(
    params: &EncoderParams<T>,
    molecule: &MoleculeString,
    vocab: &Vocabulary,
) -> Result<(Vec<T>, ForwardTrace<T>), EncoderError> {
    let enc = encode(molecule, vocab, params.config.max_len)?;
    let trace = forward(params, &enc.ids, &enc.validity)?;
    Ok((classify(params, &trace), trace))
}

/// Row of molecule token `index` in a trace built from `encode`, if it survived truncation.
pub fn token_row<T: Scalar>(trace: &ForwardTrace<T>, index: usize) -> Option<usize> {
    trace.valid_positions().binary_search(&(index + 1)).ok()
}

/// Masked-token logits for the given rows of the final states, via the tied embedding.
pub(crate) fn mlm_logits<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    last: Var,
    rows: &[usize],
) -> Result<Var, EncoderError> {
    let picked = tape.gather(last, rows.to_vec())?;
    let emb_t = tape.transpose(pv.token_emb())?;
    let logits = tape.matmul(picked, emb_t)?;
    Ok(tape.add(logits, pv.mlm_bias())?)
}
