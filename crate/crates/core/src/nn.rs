//! Parameterized building blocks shared by the encoders, fusion and heads.

use std::sync::Arc;

use findkit_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const GROUP_IMAGE: &str = "image_encoder";
pub const GROUP_TEXT: &str = "text_encoder";
pub const GROUP_FUSION: &str = "fusion";
pub const GROUP_DETECTOR: &str = "detector";
pub const GROUPS: [&str; 4] = [GROUP_IMAGE, GROUP_TEXT, GROUP_FUSION, GROUP_DETECTOR];

const NORM_EPS: f64 = 1e-5;

/// Parameter factory: registers tensors in a store under a name prefix and group.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub group: &'static str,
    pub prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: &'static str, prefix: &str) -> Self {
        Init { store, rng, group, prefix: prefix.to_string() }
    }

    /// Re-scoped factory sharing the same store and rng.
    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        Init { store: self.store, rng: self.rng, group: self.group, prefix: format!("{}.{name}", self.prefix) }
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64_lossy(dist.sample(self.rng))).collect();
        let full = self.full_name(name);
        self.store.add(full, self.group, decay, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, self.group, false, Tensor::full(shape, T::from_f64_lossy(value)))
    }

    pub fn uniform_f64(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }
}

/// `y = x W + b` over rows of `x` (`[N, in]`); `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self::with_std(init, name, in_dim, out_dim, bias, std)
    }

    pub fn with_std<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = init.normal(&format!("{name}.weight"), &[in_dim, out_dim], std, true);
        let b = bias.then(|| init.constant(&format!("{name}.bias"), &[out_dim], 0.0));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_last(y, b)
            }
            None => y,
        }
    }

    /// Applies the layer as a 1×1 convolution to a `[C, H, W]` map.
    pub fn forward_map<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
        let wt = g.param(self.w);
        let xm = x_as_matrix(g, x);
        let y = g.matmul_t(wt, xm, true, false);
        let y = match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_first(y, b)
            }
            None => y,
        };
        g.reshape(y, &[self.out_dim, h, w])
    }
}

fn x_as_matrix<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1] * s[2]])
}

/// Square-kernel convolution with optional bias over `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self::with_std(init, name, cin, cout, kernel, stride, bias, (2.0 / fan_in as f64).sqrt())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = init.normal(&format!("{name}.weight"), &[cout, cin * kernel * kernel], std, true);
        let b = bias.then(|| init.constant(&format!("{name}.bias"), &[cout], 0.0));
        Conv { w, b, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.conv2d(x, w, self.kernel, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_first(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, groups: usize, gamma0: f64) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        GroupNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], gamma0),
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups, NORM_EPS)
    }
}

/// Largest group count ≤ 8 dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, NORM_EPS)
    }
}

/// T5 bucket for the relative offset `memory - query` in a bidirectional encoder.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let mut bucket = if offset > 0 { half } else { 0 };
    let n = offset.unsigned_abs() as usize;
    let max_exact = half / 2;
    bucket += if n < max_exact {
        n
    } else {
        let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
        let large = max_exact + (ratio * (half - max_exact) as f64) as usize;
        large.min(half - 1)
    };
    bucket
}

/// Learned per-head bias over bucketed 1-D offsets.
#[derive(Clone, Debug)]
pub struct RelativeBias {
    pub table: ParamId,
    pub heads: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl RelativeBias {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        heads: usize,
        num_buckets: usize,
        max_distance: usize,
    ) -> Self {
        RelativeBias { table: init.normal(name, &[heads, num_buckets], 0.02, false), heads, num_buckets, max_distance }
    }

    pub fn buckets(&self, seq: usize) -> Arc<[u32]> {
        (0..seq * seq)
            .map(|k| {
                let (i, j) = ((k / seq) as i64, (k % seq) as i64);
                relative_bucket(j - i, self.num_buckets, self.max_distance) as u32
            })
            .collect()
    }

    /// `[heads, seq, seq]` bias tensor.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, seq: usize) -> Var {
        let table = g.param(self.table);
        g.rel_bias(table, self.buckets(seq), seq)
    }
}

/// Pre-norm encoder layer: self-attention then a GELU MLP, both residual.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        let mut s = init.sub(name);
        let hidden = dim * mlp_ratio;
        let out_std = (1.0 / dim as f64).sqrt() * 0.5;
        TransformerLayer {
            ln1: LayerNorm::new(&mut s, "ln1", dim),
            q: Linear::new(&mut s, "q", dim, dim, false),
            k: Linear::new(&mut s, "k", dim, dim, false),
            v: Linear::new(&mut s, "v", dim, dim, false),
            o: Linear::with_std(&mut s, "o", dim, dim, true, out_std),
            ln2: LayerNorm::new(&mut s, "ln2", dim),
            fc1: Linear::new(&mut s, "fc1", dim, hidden, true),
            fc2: Linear::with_std(&mut s, "fc2", hidden, dim, true, (1.0 / hidden as f64).sqrt() * 0.5),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, bias: Option<Var>, key_mask: &[bool]) -> Var {
        let h = self.ln1.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let a = g.attention(q, k, v, bias, self.heads, key_mask);
        let a = self.o.forward(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.fc1.forward(g, h);
        let m = g.gelu(m);
        let m = self.fc2.forward(g, m);
        g.add(x, m)
    }
}
