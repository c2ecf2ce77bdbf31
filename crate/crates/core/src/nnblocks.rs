//! Attention, encoder blocks, encodings and the per-view feature extractor.
//!
//! Blocks are descriptors holding parameter names and widths; the values live
//! in a [`ParamStore`] and are pulled onto a [`Tape`] on each forward pass.
//! Token tensors are batched as `[batch, tokens, width]`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorgrad::{ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W` of shape `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: format!("{prefix}.W"),
            bias: format!("{prefix}.b"),
            d_in,
            d_out,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        store.insert_uniform(rng, &self.weight, &[self.d_in, self.d_out], self.d_in)?;
        store.insert_uniform(rng, &self.bias, &[self.d_out], self.d_in)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let b = tape.param(store, &self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Layer norm gain and bias, initialized to one and zero.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: String,
    pub bias: String,
    pub width: usize,
}

impl Norm {
    pub fn new(prefix: &str, width: usize) -> Self {
        Norm {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            width,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(&self.gain, Tensor::full(&[self.width], T::one()))?;
        store.insert(&self.bias, Tensor::zeros(&[self.width]))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, &self.gain)?;
        let b = tape.param(store, &self.bias)?;
        tape.layer_norm(x, g, b, T::of(LN_EPS))
    }
}

/// Multi-head scaled dot-product attention.
///
/// Head `h` projects queries, keys and values with `Wq.h{h}`, `Wk.h{h}` and
/// `Wv.h{h}` to width `d_h`; heads are concatenated and mapped back to `d_k`
/// by `Wo`. Scores are divided by `√d_k`, the model width, rather than the
/// per-head width.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub heads: usize,
    pub d_k: usize,
    pub d_h: usize,
    /// Key input width.
    pub d_key: usize,
    /// Value input width.
    pub d_v: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, heads: usize, d_k: usize, d_key: usize, d_v: usize) -> Result<Self> {
        if heads == 0 || d_k % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_k} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            prefix: prefix.to_string(),
            heads,
            d_k,
            d_h: d_k / heads,
            d_key,
            d_v,
        })
    }

    fn name(&self, w: &str, h: usize) -> String {
        format!("{}.{w}.h{h}", self.prefix)
    }

    pub fn output_weight(&self) -> String {
        format!("{}.Wo", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for h in 0..self.heads {
            store.insert_uniform(rng, self.name("Wq", h), &[self.d_k, self.d_h], self.d_k)?;
            store.insert_uniform(rng, self.name("Wk", h), &[self.d_key, self.d_h], self.d_key)?;
            store.insert_uniform(rng, self.name("Wv", h), &[self.d_v, self.d_h], self.d_v)?;
        }
        let cat = self.heads * self.d_h;
        store.insert_uniform(rng, self.output_weight(), &[cat, self.d_k], cat)
    }

    /// `q: [B, Nq, d_k]`, `k: [B, Nkv, d_key]`, `v: [B, Nkv, d_v]`.
    /// `key_mask` has one flag per key token (`B·Nkv`); masked keys receive
    /// no attention and a query with no admissible key outputs zeros before
    /// the output projection.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sk[0] != sq[0] || sv[0] != sq[0] {
            return Err(Error::Shape {
                op: "multi_head_attention",
                left: sq,
                right: sk,
            });
        }
        if sk[1] != sv[1] {
            return Err(Error::Contract(format!(
                "attention needs as many keys as values, got {} and {}",
                sk[1], sv[1]
            )));
        }
        let (batch, nq, nkv) = (sq[0], sq[1], sk[1]);
        let full_mask = match key_mask {
            Some(m) if m.len() != batch * nkv => {
                return Err(Error::Contract(format!(
                    "key mask has {} flags for {} keys",
                    m.len(),
                    batch * nkv
                )))
            }
            Some(m) => Some(
                (0..batch * nq * nkv)
                    .map(|i| m[(i / (nq * nkv)) * nkv + i % nkv])
                    .collect::<Vec<_>>(),
            ),
            None => None,
        };
        let inv_sqrt = T::one() / T::of(self.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = tape.param(store, &self.name("Wq", h))?;
            let wk = tape.param(store, &self.name("Wk", h))?;
            let wv = tape.param(store, &self.name("Wv", h))?;
            let qh = tape.matmul(q, wq)?;
            let kh = tape.matmul(k, wk)?;
            let vh = tape.matmul(v, wv)?;
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.masked_softmax_rows(scores, full_mask.as_deref())?;
            heads.push(tape.batch_matmul(attn, vh, false)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        let wo = tape.param(store, &self.output_weight())?;
        tape.matmul(cat, wo)
    }
}

/// Attention followed by a two-layer ReLU feed-forward network, each with a
/// residual connection and layer norm:
/// `X̃ = Norm(Attn + X)`, `out = Norm(FFN(X̃) + X̃)`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm1: Norm,
    pub norm2: Norm,
}

impl EncoderBlock {
    /// Self-attention block of width `d_k`.
    pub fn new(prefix: &str, heads: usize, d_k: usize, d_ffn: usize) -> Result<Self> {
        Self::cross(prefix, heads, d_k, d_ffn, d_k, d_k)
    }

    /// Block whose attention reads keys of width `d_key` and values of width
    /// `d_v` from an external sequence.
    pub fn cross(prefix: &str, heads: usize, d_k: usize, d_ffn: usize, d_key: usize, d_v: usize) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), heads, d_k, d_key, d_v)?,
            ffn1: Linear::new(&format!("{prefix}.ffn1"), d_k, d_ffn),
            ffn2: Linear::new(&format!("{prefix}.ffn2"), d_ffn, d_k),
            norm1: Norm::new(&format!("{prefix}.norm1"), d_k),
            norm2: Norm::new(&format!("{prefix}.norm2"), d_k),
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.attn.init(store, rng)?;
        self.ffn1.init(store, rng)?;
        self.ffn2.init(store, rng)?;
        self.norm1.init(store)?;
        self.norm2.init(store)
    }

    /// Self-attention when `cross` is `None`, otherwise queries from `x` and
    /// keys/values from `cross`. `key_mask` flags the key tokens.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cross: Option<(Var, Var)>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (k, v) = cross.unwrap_or((x, x));
        let a = self.attn.forward(tape, store, x, k, v, key_mask)?;
        let r = tape.add(a, x)?;
        let xt = self.norm1.forward(tape, store, r)?;
        let h = self.ffn1.forward(tape, store, xt)?;
        let h = tape.relu(h)?;
        let f = self.ffn2.forward(tape, store, h)?;
        let r = tape.add(f, xt)?;
        self.norm2.forward(tape, store, r)
    }
}

/// Sinusoid table: entry `(pos, 2i)` is `sin(pos·scale / 10000^(2i/d))` and
/// `(pos, 2i+1)` the matching cosine.
pub fn positional_encoding<T: Scalar>(count: usize, d: usize, scale: f64) -> Result<Tensor<T>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Contract(format!("positional encoding width must be even, got {d}")));
    }
    Ok(Tensor::from_fn(&[count, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let i = j / 2;
        let angle = pos as f64 * scale / 10000f64.powf(2.0 * i as f64 / d as f64);
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Per coordinate: `sin(2⁰πx), cos(2⁰πx), …, sin(2^(L−1)πx), cos(2^(L−1)πx)`.
pub fn frequency_embedding<T: Scalar>(x: &[T], levels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * levels * x.len());
    for &v in x {
        for l in 0..levels {
            let a = T::of(std::f64::consts::PI * (1u64 << l) as f64) * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// View-shared encoder of three same-resolution 3×3 convolutions with ReLU
/// between them: `[H, W, 3] -> [H, W, C_f]`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub layers: Vec<(String, String, usize, usize)>,
}

impl FeatureExtractor {
    pub fn new(prefix: &str, hidden: usize, c_f: usize) -> Self {
        let dims = [(3, hidden), (hidden, hidden), (hidden, c_f)];
        FeatureExtractor {
            layers: dims
                .iter()
                .enumerate()
                .map(|(i, &(cin, cout))| (format!("{prefix}.conv{i}.W"), format!("{prefix}.conv{i}.b"), cin, cout))
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.3)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for (w, b, cin, cout) in &self.layers {
            store.insert_uniform(rng, w, &[9 * cin, *cout], 9 * cin)?;
            store.insert_uniform(rng, b, &[*cout], 9 * cin)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Contract(format!("feature extractor expects an [H, W, 3] image, got {s:?}")));
        }
        let mut x = image;
        for (i, (w, b, _, _)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            let wv = tape.param(store, w)?;
            let bv = tape.param(store, b)?;
            x = tape.conv2d(x, wv, bv)?;
        }
        Ok(x)
    }
}
