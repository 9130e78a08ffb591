//! Spatio-temporal self-attention.
//!
//! Per-frame seed features are first aligned along time: for every temporal
//! window and every seed `j`, the features of seed `j` in the window's frames
//! are concatenated and linearly mapped to one token. All tokens then attend
//! to each other with single-head scaled dot-product attention:
//!
//! ```text
//! Q, K, V = F·W_q, F·W_k, F·W_v
//! A1 = Q·Kᵀ,  A2 = A1 / √d,  A3 = softmax_rows(A2)
//! F_sa = A3·V
//! F_out = LayerNorm(FeedForward(F_sa + F))
//! ```
//!
//! There is no positional encoding, so the block is equivariant to any
//! permutation of its tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct StsaConfig {
    /// Width of the per-frame input features.
    pub in_dim: usize,
    /// Token width `d`.
    pub dim: usize,
    /// Temporal window in frames.
    pub window: usize,
    pub stride: usize,
    /// Hidden width of the feed-forward network (usually `2d`).
    pub ffn_hidden: usize,
}

impl StsaConfig {
    pub fn new(in_dim: usize, dim: usize, window: usize, stride: usize) -> Self {
        Self { in_dim, dim, window, stride, ffn_hidden: 2 * dim }
    }

    /// Number of window positions over `frames` frames.
    pub fn num_windows(&self, frames: usize) -> usize {
        if self.window == 0 || self.stride == 0 || frames < self.window {
            return 0;
        }
        (frames - self.window) / self.stride + 1
    }
}

#[derive(Clone, Debug)]
pub struct StsaParams {
    pub cfg: StsaConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `[window · in_dim, dim]` temporal patch kernel.
    pub temporal_conv: ParamId,
    pub ffn: Mlp,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl StsaParams {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: StsaConfig, rng: &mut R) -> Result<Self> {
        if cfg.dim == 0 || cfg.in_dim == 0 || cfg.window == 0 || cfg.stride == 0 || cfg.ffn_hidden == 0 {
            return Err(Error::Config(format!("invalid attention config {cfg:?}")));
        }
        let d = cfg.dim;
        let w_q = store.add_uniform(format!("{name}.w_q"), &[d, d], d, rng)?;
        let w_k = store.add_uniform(format!("{name}.w_k"), &[d, d], d, rng)?;
        let w_v = store.add_uniform(format!("{name}.w_v"), &[d, d], d, rng)?;
        let fan = cfg.window * cfg.in_dim;
        let temporal_conv = store.add_uniform(format!("{name}.temporal_conv"), &[fan, d], fan, rng)?;
        let ffn = Mlp::new(store, &format!("{name}.ffn"), d, &[cfg.ffn_hidden, d], Activation::Identity, rng)?;
        let ln_gain = store.add(format!("{name}.ln_gain"), Tensor::full([d], F::one()))?;
        let ln_bias = store.add(format!("{name}.ln_bias"), Tensor::zeros([d]))?;
        Ok(Self { cfg, w_q, w_k, w_v, temporal_conv, ffn, ln_gain, ln_bias })
    }
}

/// Aligned spatio-temporal tokens.
#[derive(Clone, Debug)]
pub struct PatchSet {
    /// `[N, d]` tokens, window-major and seed-minor.
    pub tokens: Var,
    /// Token index to `(seed, window)`.
    pub index_map: Vec<(usize, usize)>,
    pub frames: usize,
    pub seeds: usize,
    pub window: usize,
    pub stride: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    pub fn num_windows(&self) -> usize {
        self.len() / self.seeds.max(1)
    }

    /// Frames read by window `w`.
    pub fn window_frames(&self, w: usize) -> std::ops::Range<usize> {
        w * self.stride..w * self.stride + self.window
    }
}

/// Attention matrices of one pass, each `[N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// Raw scores `Q·Kᵀ`.
    pub a1: Var,
    /// Scores divided by `√d`.
    pub a2: Var,
    /// Row-wise softmax of `a2`.
    pub a3: Var,
}

/// Builds one token per (window, seed) from the same seed's features across
/// the window's frames.
pub fn patch_division<F: Real>(g: &mut Graph<'_, F>, frame_feats: &[Var], params: &StsaParams) -> Result<PatchSet> {
    let cfg = &params.cfg;
    let frames = frame_feats.len();
    if cfg.window < 1 || cfg.window > frames {
        return Err(Error::contract(format!("window {} must lie in [1, {frames}]", cfg.window)));
    }
    let base = g.shape(frame_feats[0]).to_vec();
    if base.len() != 2 {
        return Err(Error::dimension(format!("frame features must be [m, d], got {base:?}")));
    }
    for (t, &f) in frame_feats.iter().enumerate() {
        let s = g.shape(f);
        if s.len() != 2 || s[0] != base[0] {
            return Err(Error::Alignment(format!(
                "frame {t} has shape {s:?} but frame 0 has {base:?}; frames must share seeds"
            )));
        }
        if s[1] != cfg.in_dim {
            return Err(Error::dimension(format!("frame {t} width {} != {}", s[1], cfg.in_dim)));
        }
    }
    let m = base[0];
    let windows = cfg.num_windows(frames);
    let mut rows = Vec::with_capacity(windows);
    let mut index_map = Vec::with_capacity(windows * m);
    for w in 0..windows {
        let start = w * cfg.stride;
        let stacked = if cfg.window == 1 {
            frame_feats[start]
        } else {
            g.concat(&frame_feats[start..start + cfg.window], 1)?
        };
        rows.push(stacked);
        index_map.extend((0..m).map(|j| (j, w)));
    }
    let stacked = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
    let kernel = g.param(params.temporal_conv);
    let tokens = g.matmul(stacked, kernel)?;
    Ok(PatchSet { tokens, index_map, frames, seeds: m, window: cfg.window, stride: cfg.stride })
}

/// Scaled dot-product self-attention over all tokens; returns `F_sa`.
pub fn self_attention<F: Real>(g: &mut Graph<'_, F>, patches: &PatchSet, params: &StsaParams) -> Result<(Var, AttentionTrace)> {
    let x = patches.tokens;
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::contract(format!("self-attention needs [N >= 1, d] tokens, got {s:?}")));
    }
    if s[1] != params.cfg.dim {
        return Err(Error::dimension(format!("token width {} != {}", s[1], params.cfg.dim)));
    }
    let (wq, wk, wv) = (g.param(params.w_q), g.param(params.w_k), g.param(params.w_v));
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let kt = g.transpose_last2(k)?;
    let a1 = g.matmul(q, kt)?;
    let a2 = g.div_scalar(a1, F::of(params.cfg.dim as f64).sqrt())?;
    let a3 = g.softmax_rows(a2)?;
    let out = g.matmul(a3, v)?;
    Ok((out, AttentionTrace { a1, a2, a3 }))
}

/// Full block: attention, residual, feed-forward, then layer normalisation.
pub fn stsa_forward<F: Real>(g: &mut Graph<'_, F>, patches: &PatchSet, params: &StsaParams) -> Result<(Var, AttentionTrace)> {
    let (sa, trace) = self_attention(g, patches, params)?;
    let residual = g.add(sa, patches.tokens)?;
    let ff = params.ffn.forward(g, residual)?;
    let (gain, bias) = (g.param(params.ln_gain), g.param(params.ln_bias));
    let out = g.layer_norm(ff, gain, bias, F::of(LAYER_NORM_EPS))?;
    Ok((out, trace))
}

/// Maps token outputs back onto frames: frame `t` receives, for each seed,
/// the mean of the outputs of every window that reads frame `t`. Frames no
/// window reads get `None`.
pub fn tokens_to_frames<F: Real>(g: &mut Graph<'_, F>, out: Var, patches: &PatchSet) -> Result<Vec<Option<Var>>> {
    let m = patches.seeds;
    let windows = patches.num_windows();
    let mut result = Vec::with_capacity(patches.frames);
    for t in 0..patches.frames {
        let covering: Vec<usize> = (0..windows).filter(|&w| patches.window_frames(w).contains(&t)).collect();
        if covering.is_empty() {
            result.push(None);
            continue;
        }
        let mut acc = g.slice(out, 0, covering[0] * m, m)?;
        for &w in &covering[1..] {
            let part = g.slice(out, 0, w * m, m)?;
            acc = g.add(acc, part)?;
        }
        if covering.len() > 1 {
            acc = g.scale(acc, F::one() / F::of(covering.len() as f64))?;
        }
        result.push(Some(acc));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(store: &mut ParamStore<f64>, in_dim: usize, d: usize, window: usize, stride: usize) -> StsaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        StsaParams::new(store, "stsa", StsaConfig::new(in_dim, d, window, stride), &mut rng).unwrap()
    }

    fn frames(g: &mut Graph<'_, f64>, t: usize, m: usize, d: usize) -> Vec<Var> {
        (0..t)
            .map(|f| g.constant(Tensor::from_fn([m, d], |i| ((i + 31 * f) as f64 * 0.13).sin())).unwrap())
            .collect()
    }

    #[test]
    fn single_frame_identity_conv_passes_features() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 4, 4, 1, 1);
        store.set_value(p.temporal_conv, Tensor::eye(4)).unwrap();
        let mut g = Graph::new(&store);
        let f = frames(&mut g, 1, 5, 4);
        let patches = patch_division(&mut g, &f, &p).unwrap();
        assert_eq!(g.value(patches.tokens), g.value(f[0]));
    }

    #[test]
    fn window_covering_all_frames_gives_one_token_per_seed() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 3, 3, 1);
        let mut g = Graph::new(&store);
        let f = frames(&mut g, 3, 64, 2);
        let patches = patch_division(&mut g, &f, &p).unwrap();
        assert_eq!(patches.len(), 64);
        assert_eq!(g.shape(patches.tokens), &[64, 3]);
    }

    #[test]
    fn overlapping_windows_draw_only_from_their_seed() {
        // index-map audit: token (j, w) must equal conv applied to [f_w[j], f_{w+1}[j]]
        let mut store = ParamStore::new();
        let (m, din, d) = (6, 2, 3);
        let p = params(&mut store, din, d, 2, 1);
        let kernel = store.value(p.temporal_conv).clone();
        let mut g = Graph::new(&store);
        let f = frames(&mut g, 3, m, din);
        let patches = patch_division(&mut g, &f, &p).unwrap();
        assert_eq!(patches.len(), 2 * m);
        for (token, &(j, w)) in patches.index_map.iter().enumerate() {
            assert_eq!(token, w * m + j);
            let mut input = Vec::new();
            for t in patches.window_frames(w) {
                input.extend_from_slice(g.value(f[t]).row(j));
            }
            for c in 0..d {
                let expect: f64 = input.iter().enumerate().map(|(r, x)| x * kernel.at(&[r, c])).sum();
                assert!((g.value(patches.tokens).at(&[token, c]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_seed_counts_are_an_alignment_error() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 2, 2, 1);
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros([4, 2])).unwrap();
        let b = g.constant(Tensor::zeros([5, 2])).unwrap();
        assert!(matches!(patch_division(&mut g, &[a, b], &p), Err(Error::Alignment(_))));
        assert!(patch_division(&mut g, &[a], &p).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 3, 1, 1);
        let mut g = Graph::new(&store);
        let f = frames(&mut g, 1, 1, 3);
        let patches = patch_division(&mut g, &f, &p).unwrap();
        let (out, trace) = self_attention(&mut g, &patches, &p).unwrap();
        assert_eq!(g.value(trace.a3).data(), &[1.0]);
        let wv = g.param(p.w_v);
        let v = g.matmul(patches.tokens, wv).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(v)).unwrap() < 1e-15);
    }

    #[test]
    fn identical_tokens_split_attention_evenly() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 2, 1, 1);
        store.set_value(p.temporal_conv, Tensor::eye(2)).unwrap();
        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::from_f64([2, 2], &[0.3, -0.7, 0.3, -0.7]).unwrap()).unwrap();
        let patches = patch_division(&mut g, &[f], &p).unwrap();
        let (out, trace) = self_attention(&mut g, &patches, &p).unwrap();
        assert_eq!(g.value(trace.a3).data(), &[0.5; 4]);
        assert_eq!(g.value(out).row(0), g.value(out).row(1));
    }

    #[test]
    fn two_tokens_by_hand() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 2, 1, 1);
        store.set_value(p.temporal_conv, Tensor::eye(2)).unwrap();
        let wq = [1.0, 0.5, -0.5, 1.0];
        let wk = [0.2, 0.0, 0.3, -1.0];
        let wv = [1.0, 2.0, 0.0, -1.0];
        store.set_value(p.w_q, Tensor::from_f64([2, 2], &wq).unwrap()).unwrap();
        store.set_value(p.w_k, Tensor::from_f64([2, 2], &wk).unwrap()).unwrap();
        store.set_value(p.w_v, Tensor::from_f64([2, 2], &wv).unwrap()).unwrap();
        let x = [[1.0, 2.0], [-1.0, 0.5]];
        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, -1.0, 0.5]).unwrap()).unwrap();
        let patches = patch_division(&mut g, &[f], &p).unwrap();
        let (out, trace) = self_attention(&mut g, &patches, &p).unwrap();

        let mm = |a: [f64; 2], w: &[f64; 4]| [a[0] * w[0] + a[1] * w[2], a[0] * w[1] + a[1] * w[3]];
        let q: Vec<[f64; 2]> = x.iter().map(|&r| mm(r, &wq)).collect();
        let k: Vec<[f64; 2]> = x.iter().map(|&r| mm(r, &wk)).collect();
        let v: Vec<[f64; 2]> = x.iter().map(|&r| mm(r, &wv)).collect();
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            let a: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
            for j in 0..2 {
                assert!((g.value(trace.a3).at(&[i, j]) - a[j]).abs() < 1e-12);
            }
            for c in 0..2 {
                let expect = a[0] * v[0][c] + a[1] * v[1][c];
                assert!((g.value(out).at(&[i, c]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention_and_mean_value() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 4, 1, 1);
        store.set_value(p.w_q, Tensor::zeros([4, 4])).unwrap();
        store.set_value(p.w_k, Tensor::zeros([4, 4])).unwrap();
        let mut g = Graph::new(&store);
        let f = frames(&mut g, 1, 5, 3);
        let patches = patch_division(&mut g, &f, &p).unwrap();
        let (out, trace) = stsa_forward(&mut g, &patches, &p).unwrap();
        assert!(g.value(trace.a3).data().iter().all(|&a| a == 0.2));
        assert_eq!(g.shape(out), &[5, 4]);

        // LN(FFN(mean(V) + F)) computed off the attention path
        let wv = g.param(p.w_v);
        let v = g.matmul(patches.tokens, wv).unwrap();
        let mean = g.mean_over_axis(v, 0).unwrap();
        let res = g.add(patches.tokens, mean).unwrap();
        let ff = p.ffn.forward(&mut g, res).unwrap();
        let (ga, bi) = (g.param(p.ln_gain), g.param(p.ln_bias));
        let expect = g.layer_norm(ff, ga, bi, LAYER_NORM_EPS).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)).unwrap() < 1e-6);
    }

    #[test]
    fn scatter_averages_covering_windows() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 1, 1, 2, 1);
        let mut g = Graph::new(&store);
        let f = frames(&mut g, 3, 2, 1);
        let patches = patch_division(&mut g, &f, &p).unwrap();
        let out = g.constant(Tensor::from_f64([4, 1], &[1., 2., 3., 4.]).unwrap()).unwrap();
        let per_frame = tokens_to_frames(&mut g, out, &patches).unwrap();
        let vals: Vec<Vec<f64>> = per_frame.iter().map(|v| g.value(v.unwrap()).data().to_vec()).collect();
        assert_eq!(vals, vec![vec![1., 2.], vec![2., 3.], vec![3., 4.]]);
    }
}
