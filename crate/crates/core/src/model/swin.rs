//! Swin-Unet forward graph and the window index arithmetic it relies on.
//! Token tensors are [rows * cols, dim] in row-major token order.

use num_traits::Float;

use super::tape::{Tape, Var};
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

/// Additive attention mask for token pairs from different shift regions.
pub const MASK_VALUE: f64 = -1e9;

fn check_windows(h: usize, w: usize, win: usize) -> Result<()> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::Shape(format!("{h}x{w} grid is not divisible by window {win}")));
    }
    Ok(())
}

/// Source token of each (window, slot) after a cyclic shift by `-shift`.
/// Windows and slots are both row-major.
fn window_sources(h: usize, w: usize, win: usize, shift: usize) -> Vec<usize> {
    let (nh, nw) = (h / win, w / win);
    let mut out = Vec::with_capacity(h * w);
    for wr in 0..nh {
        for wc in 0..nw {
            for i in 0..win {
                for j in 0..win {
                    let r = (wr * win + i + shift) % h;
                    let c = (wc * win + j + shift) % w;
                    out.push(r * w + c);
                }
            }
        }
    }
    out
}

/// [h*w, c] tokens to [nW, win*win, c] windows.
pub fn window_partition<T: Copy>(x: &[T], h: usize, w: usize, c: usize, win: usize) -> Result<Vec<T>> {
    check_windows(h, w, win)?;
    if x.len() != h * w * c {
        return Err(Error::Shape(format!("expected {} values, got {}", h * w * c, x.len())));
    }
    let mut out = Vec::with_capacity(x.len());
    for src in window_sources(h, w, win, 0) {
        out.extend_from_slice(&x[src * c..(src + 1) * c]);
    }
    Ok(out)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Copy + Default>(x: &[T], h: usize, w: usize, c: usize, win: usize) -> Result<Vec<T>> {
    check_windows(h, w, win)?;
    if x.len() != h * w * c {
        return Err(Error::Shape(format!("expected {} values, got {}", h * w * c, x.len())));
    }
    let mut out = vec![T::default(); x.len()];
    for (k, src) in window_sources(h, w, win, 0).into_iter().enumerate() {
        out[src * c..(src + 1) * c].copy_from_slice(&x[k * c..(k + 1) * c]);
    }
    Ok(out)
}

/// Region id of each position in the shifted frame: three bands per axis
/// split at `dim - win` and `dim - shift`.
fn shift_regions(h: usize, w: usize, win: usize, shift: usize) -> Vec<usize> {
    let band = |x: usize, dim: usize| {
        if x < dim - win {
            0
        } else if x < dim - shift {
            1
        } else {
            2
        }
    };
    (0..h * w).map(|p| band(p / w, h) * 3 + band(p % w, w)).collect()
}

/// Additive mask [nW, N, N]: 0 within a region, [`MASK_VALUE`] across.
pub fn shifted_attention_mask(h: usize, w: usize, win: usize, shift: usize) -> Result<Vec<f32>> {
    check_windows(h, w, win)?;
    if shift >= win {
        return Err(Error::invalid(format!("shift {shift} must be smaller than window {win}")));
    }
    let n = win * win;
    let nw = (h / win) * (w / win);
    if shift == 0 {
        return Ok(vec![0.0; nw * n * n]);
    }
    let region = shift_regions(h, w, win, shift);
    let slots = window_sources(h, w, win, 0);
    let mut out = Vec::with_capacity(nw * n * n);
    for wi in 0..nw {
        let ids = &slots[wi * n..(wi + 1) * n];
        for &a in ids {
            for &b in ids {
                out.push(if region[a] == region[b] { 0.0 } else { MASK_VALUE as f32 });
            }
        }
    }
    Ok(out)
}

/// Row of the relative-position bias table for each (query, key) pair of a
/// `win`-wide window, with the table sized for `table_win`.
pub fn relative_position_index(win: usize, table_win: usize) -> Vec<usize> {
    let n = win * win;
    let span = 2 * table_win - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dr = (i / win) as isize - (j / win) as isize + table_win as isize - 1;
            let dc = (i % win) as isize - (j % win) as isize + table_win as isize - 1;
            out.push(dr as usize * span + dc as usize);
        }
    }
    out
}

struct Cursor<'a> {
    vars: &'a [Var],
    names: &'a [String],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self, name: &str) -> Var {
        assert_eq!(self.names[self.next], name, "parameter layout out of sync");
        self.next += 1;
        self.vars[self.next - 1]
    }

    fn norm(&mut self, prefix: &str) -> (Var, Var) {
        (self.take(&format!("{prefix}.g")), self.take(&format!("{prefix}.b")))
    }

    fn linear(&mut self, prefix: &str, bias: bool) -> (Var, Option<Var>) {
        let w = self.take(&format!("{prefix}.w"));
        (w, bias.then(|| self.take(&format!("{prefix}.b"))))
    }
}

fn u32s(v: impl IntoIterator<Item = usize>) -> Vec<u32> {
    v.into_iter().map(|i| i as u32).collect()
}

fn as_t<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

struct AttnVars {
    qkv: (Var, Option<Var>),
    rel: Var,
    proj: (Var, Option<Var>),
}

/// Multi-head attention over windows. `xw` is [nW * N, d] in window order;
/// returns the projected output in the same order plus the attention
/// weights [nW * heads, N, N].
#[allow(clippy::too_many_arguments)]
fn attention<T: Float>(
    t: &mut Tape<T>,
    xw: Var,
    a: &AttnVars,
    heads: usize,
    n_windows: usize,
    win: usize,
    table_win: usize,
    mask: Option<&[f32]>,
) -> (Var, Var) {
    let d = *t.shape(xw).last().unwrap();
    let n = win * win;
    let hd = d / heads;
    let qkv = t.linear(xw, a.qkv.0, a.qkv.1);
    let split = |which: usize| {
        let mut idx = Vec::with_capacity(n_windows * n * d);
        for w in 0..n_windows {
            for h in 0..heads {
                for tok in 0..n {
                    let base = (w * n + tok) * 3 * d + which * d + h * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        u32s(idx)
    };
    let shape = [n_windows * heads, n, hd];
    let q = t.gather(qkv, split(0), &shape);
    let k = t.gather(qkv, split(1), &shape);
    let v = t.gather(qkv, split(2), &shape);
    let q = t.scale(q, as_t::<T>(1.0 / (hd as f64).sqrt()));
    let mut s = t.bmm(q, k, true);
    let rel = relative_position_index(win, table_win);
    let mut bidx = Vec::with_capacity(n_windows * heads * n * n);
    for _ in 0..n_windows {
        for h in 0..heads {
            bidx.extend(rel.iter().map(|&r| r * heads + h));
        }
    }
    let bias = t.gather(a.rel, u32s(bidx), &[n_windows * heads, n, n]);
    s = t.add(s, bias);
    if let Some(m) = mask {
        let mut full = Vec::with_capacity(n_windows * heads * n * n);
        for w in 0..n_windows {
            for _ in 0..heads {
                full.extend(m[w * n * n..(w + 1) * n * n].iter().map(|&v| as_t::<T>(v as f64)));
            }
        }
        s = t.add_const(s, &full);
    }
    let attn = t.softmax(s);
    let o = t.bmm(attn, v, false);
    // heads back into channels: [nW, N, heads * hd]
    let mut midx = Vec::with_capacity(n_windows * n * d);
    for w in 0..n_windows {
        for tok in 0..n {
            for h in 0..heads {
                let base = ((w * heads + h) * n + tok) * hd;
                midx.extend(base..base + hd);
            }
        }
    }
    let merged = t.gather(o, u32s(midx), &[n_windows * n, d]);
    let out = t.linear(merged, a.proj.0, a.proj.1);
    (out, attn)
}

/// Parameters for a standalone window-attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    /// [dim, 3 * dim] and [3 * dim].
    pub qkv_w: Vec<f64>,
    pub qkv_b: Vec<f64>,
    /// [(2 * window - 1)^2, heads].
    pub rel_bias: Vec<f64>,
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
}

/// softmax(QKᵀ/√d + bias + mask)·V per head, heads concatenated, then the
/// output projection. `tokens` is [nW * win², dim] in window order and
/// `mask` is [nW, win², win²]. Returns (output, attention weights).
pub fn window_attention(
    tokens: &[f64],
    win: usize,
    p: &AttentionParams,
    mask: Option<&[f32]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, n) = (p.dim, win * win);
    if d == 0 || p.heads == 0 || d % p.heads != 0 || tokens.len() % (n * d) != 0 {
        return Err(Error::Shape("attention tokens do not match dim/heads/window".into()));
    }
    let span = 2 * win - 1;
    if p.qkv_w.len() != 3 * d * d
        || p.qkv_b.len() != 3 * d
        || p.proj_w.len() != d * d
        || p.proj_b.len() != d
        || p.rel_bias.len() != span * span * p.heads
    {
        return Err(Error::Shape("attention parameter shapes are inconsistent".into()));
    }
    let nw = tokens.len() / (n * d);
    if mask.is_some_and(|m| m.len() != nw * n * n) {
        return Err(Error::Shape("mask does not match the window count".into()));
    }
    let mut t = Tape::<f64>::new();
    let x = t.leaf(tokens.to_vec(), &[nw * n, d]);
    let vars = AttnVars {
        qkv: (t.leaf(p.qkv_w.clone(), &[d, 3 * d]), Some(t.leaf(p.qkv_b.clone(), &[3 * d]))),
        rel: t.leaf(p.rel_bias.clone(), &[span * span, p.heads]),
        proj: (t.leaf(p.proj_w.clone(), &[d, d]), Some(t.leaf(p.proj_b.clone(), &[d]))),
    };
    let (out, attn) = attention(&mut t, x, &vars, p.heads, nw, win, win, mask);
    Ok((t.value(out).to_vec(), t.value(attn).to_vec()))
}

struct Graph<'c, 'p, T: Float> {
    t: Tape<T>,
    p: Cursor<'p>,
    cfg: &'c ModelConfig,
}

impl<T: Float> Graph<'_, '_, T> {
    /// One Swin block on an r_h x r_w token grid.
    fn block(&mut self, x: Var, prefix: &str, rh: usize, rw: usize, heads: usize, odd: bool) -> Var {
        let d = *self.t.shape(x).last().unwrap();
        let win = self.cfg.window.min(rh).min(rw);
        let shift = if odd && rh > self.cfg.window && rw > self.cfg.window { win / 2 } else { 0 };
        let (g1, b1) = self.p.norm(&format!("{prefix}.norm1"));
        let vars = AttnVars {
            qkv: self.p.linear(&format!("{prefix}.qkv"), true),
            rel: self.p.take(&format!("{prefix}.rel_bias")),
            proj: self.p.linear(&format!("{prefix}.proj"), true),
        };
        let xn = self.t.layer_norm(x, g1, b1);
        let src = window_sources(rh, rw, win, shift);
        let part: Vec<u32> = src.iter().flat_map(|&s| (s * d..(s + 1) * d).map(|i| i as u32)).collect();
        let xw = self.t.gather(xn, part, &[rh * rw, d]);
        let mask = (shift > 0).then(|| shifted_attention_mask(rh, rw, win, shift).unwrap());
        let nw = (rh / win) * (rw / win);
        let (y, _) = attention(&mut self.t, xw, &vars, heads, nw, win, self.cfg.window, mask.as_deref());
        let mut inv = vec![0usize; rh * rw];
        for (k, &s) in src.iter().enumerate() {
            inv[s] = k;
        }
        let back: Vec<u32> = inv.iter().flat_map(|&k| (k * d..(k + 1) * d).map(|i| i as u32)).collect();
        let y = self.t.gather(y, back, &[rh * rw, d]);
        let x = self.t.add(x, y);
        let (g2, b2) = self.p.norm(&format!("{prefix}.norm2"));
        let fc1 = self.p.linear(&format!("{prefix}.fc1"), true);
        let fc2 = self.p.linear(&format!("{prefix}.fc2"), true);
        let h = self.t.layer_norm(x, g2, b2);
        let h = self.t.linear(h, fc1.0, fc1.1);
        let h = self.t.gelu(h);
        let h = self.t.linear(h, fc2.0, fc2.1);
        self.t.add(x, h)
    }

    /// 2x2 neighbourhoods concatenated as (0,0), (1,0), (0,1), (1,1) in
    /// (row, col) offsets, normalised, then projected 4d -> 2d.
    fn merge(&mut self, x: Var, prefix: &str, rh: usize, rw: usize) -> Var {
        let d = *self.t.shape(x).last().unwrap();
        let (oh, ow) = (rh / 2, rw / 2);
        let mut idx = Vec::with_capacity(rh * rw * d);
        for r in 0..oh {
            for c in 0..ow {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let s = (2 * r + dr) * rw + 2 * c + dc;
                    idx.extend(s * d..(s + 1) * d);
                }
            }
        }
        let x = self.t.gather(x, u32s(idx), &[oh * ow, 4 * d]);
        let (g, b) = self.p.norm(&format!("{prefix}.norm"));
        let (w, _) = self.p.linear(prefix, false);
        let x = self.t.layer_norm(x, g, b);
        self.t.linear(x, w, None)
    }

    /// Linear to f²·out_dim channels, then channel-to-space by factor `f`.
    #[allow(clippy::too_many_arguments)]
    fn expand(&mut self, x: Var, prefix: &str, rh: usize, rw: usize, f: usize, out_dim: usize, norm: &str) -> Var {
        let (w, _) = self.p.linear(prefix, false);
        let y = self.t.linear(x, w, None);
        let e = f * f * out_dim;
        let (oh, ow) = (rh * f, rw * f);
        let mut idx = Vec::with_capacity(oh * ow * out_dim);
        for r in 0..oh {
            for c in 0..ow {
                let src = (r / f) * rw + c / f;
                let sub = (r % f) * f + c % f;
                let base = src * e + sub * out_dim;
                idx.extend(base..base + out_dim);
            }
        }
        let y = self.t.gather(y, u32s(idx), &[oh * ow, out_dim]);
        let (g, b) = self.p.norm(norm);
        self.t.layer_norm(y, g, b)
    }
}

fn build<T: Float, V: Copy + Into<f64>>(
    params: &ModelParams,
    values: &[Vec<V>],
    x: &[f32],
    h: usize,
    w: usize,
) -> Result<(Tape<T>, Vec<Var>, Var)> {
    let cfg = &params.config;
    if values.len() != params.specs.len() || values.iter().zip(&params.specs).any(|(v, s)| v.len() != s.len()) {
        return Err(Error::Shape("parameter values do not match the layout".into()));
    }
    cfg.check_input(h, w)?;
    let cin = cfg.in_channels;
    if x.len() != cin * h * w {
        return Err(Error::Shape(format!("expected {cin}x{h}x{w} input, got {} values", x.len())));
    }
    let mut t = Tape::<T>::new();
    let vars: Vec<Var> = values
        .iter()
        .zip(&params.specs)
        .map(|(v, s)| t.leaf(v.iter().map(|&a| as_t::<T>(a.into())).collect(), &s.shape))
        .collect();
    let names: Vec<String> = params.specs.iter().map(|s| s.name.clone()).collect();
    let input = t.leaf(x.iter().map(|&a| as_t::<T>(a as f64)).collect(), &[cin, h, w]);
    let mut g = Graph { t, p: Cursor { vars: &vars, names: &names, next: 0 }, cfg };

    let p = cfg.patch_size;
    let (mut rh, mut rw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(cin * h * w);
    for tr in 0..rh {
        for tc in 0..rw {
            for ch in 0..cin {
                for dr in 0..p {
                    for dc in 0..p {
                        idx.push(ch * h * w + (tr * p + dr) * w + tc * p + dc);
                    }
                }
            }
        }
    }
    let mut xv = g.t.gather(input, u32s(idx), &[rh * rw, p * p * cin]);
    let (pw, pb) = g.p.linear("patch_embed", true);
    xv = g.t.linear(xv, pw, pb);
    let (ng, nb) = g.p.norm("patch_embed.norm");
    xv = g.t.layer_norm(xv, ng, nb);

    let mut skips = Vec::new();
    for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
        skips.push(xv);
        for j in 0..depth {
            xv = g.block(xv, &format!("enc{i}.block{j}"), rh, rw, heads, j % 2 == 1);
        }
        xv = g.merge(xv, &format!("enc{i}.merge"), rh, rw);
        rh /= 2;
        rw /= 2;
    }
    for j in 0..cfg.bottleneck_depth {
        xv = g.block(xv, &format!("bottleneck.block{j}"), rh, rw, cfg.bottleneck_heads, j % 2 == 1);
    }
    let (ng, nb) = g.p.norm("bottleneck.norm");
    xv = g.t.layer_norm(xv, ng, nb);
    for i in (0..cfg.depths.len()).rev() {
        let d = cfg.stage_dim(i);
        xv = g.expand(xv, &format!("dec{i}.expand"), rh, rw, 2, d, &format!("dec{i}.expand.norm"));
        rh *= 2;
        rw *= 2;
        xv = g.t.concat(xv, skips[i]);
        let (rdw, rdb) = g.p.linear(&format!("dec{i}.reduce"), true);
        xv = g.t.linear(xv, rdw, rdb);
        for j in 0..cfg.depths[i] {
            xv = g.block(xv, &format!("dec{i}.block{j}"), rh, rw, cfg.heads[i], j % 2 == 1);
        }
    }
    let (ng, nb) = g.p.norm("norm_up");
    xv = g.t.layer_norm(xv, ng, nb);
    xv = g.expand(xv, "final_expand", rh, rw, p, cfg.embed_dim, "final_expand.norm");
    let (hw, hb) = g.p.linear("head", true);
    xv = g.t.linear(xv, hw, hb);
    debug_assert_eq!(g.p.next, vars.len());
    Ok((g.t, vars, xv))
}

/// Graph for one input; logits are [h * w, n_classes].
pub(crate) fn build_graph<T: Float, V: Copy + Into<f64>>(
    params: &ModelParams,
    values: &[Vec<V>],
    x: &[f32],
    h: usize,
    w: usize,
) -> Result<(Tape<T>, Vec<Var>, Var)> {
    build(params, values, x, h, w)
}

fn to_channel_major<T: Float>(logits: &[T], k: usize) -> Vec<f32> {
    let n = logits.len() / k;
    let mut out = vec![0.0; logits.len()];
    for p in 0..n {
        for c in 0..k {
            out[c * n + p] = logits[p * k + c].to_f32().unwrap();
        }
    }
    out
}

/// Logits [n_classes, h, w] for a channel-major [in_channels, h, w] input.
pub fn forward(params: &ModelParams, x: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    let (t, _, out) = build::<f32, f32>(params, &params.values, x, h, w)?;
    Ok(to_channel_major(t.value(out), params.config.n_classes))
}

/// [`forward`] evaluated in 64-bit arithmetic.
pub fn forward_f64(params: &ModelParams, x: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    let (t, _, out) = build::<f64, f32>(params, &params.values, x, h, w)?;
    Ok(to_channel_major(t.value(out), params.config.n_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{prng, unit_f64};
    use proptest::prelude::*;

    #[test]
    fn partition_shape_and_slots() {
        let x: Vec<u32> = (0..64).collect();
        let p = window_partition(&x, 8, 8, 1, 4).unwrap();
        assert_eq!(p.len(), 4 * 16);
        for r in 0..8 {
            for c in 0..8 {
                let wi = (r / 4) * 2 + c / 4;
                let slot = (r % 4) * 4 + c % 4;
                assert_eq!(p[wi * 16 + slot], (r * 8 + c) as u32);
            }
        }
        assert!(window_partition(&x, 8, 8, 1, 3).is_err());
    }

    proptest! {
        #[test]
        fn reverse_inverts_partition(nh in 1usize..4, nw in 1usize..4, win in 1usize..5, c in 1usize..4) {
            let (h, w) = (nh * win, nw * win);
            let x: Vec<u32> = (0..(h * w * c) as u32).collect();
            let p = window_partition(&x, h, w, c, win).unwrap();
            prop_assert_eq!(window_reverse(&p, h, w, c, win).unwrap(), x);
        }
    }

    /// Region of each original position, from its own definition: three
    /// bands per axis in the unshifted frame, rolled by `shift`.
    fn oracle_region(r: usize, c: usize, h: usize, w: usize, win: usize, s: usize) -> (usize, usize) {
        let b = |x: usize, dim: usize| {
            let y = (x + dim - s) % dim;
            if y < dim - win {
                0
            } else if y < dim - s {
                1
            } else {
                2
            }
        };
        (b(r, h), b(c, w))
    }

    #[test]
    fn mask_blocks_cross_region_pairs() {
        let (h, w, win, s) = (8, 8, 4, 2);
        let m = shifted_attention_mask(h, w, win, s).unwrap();
        let mut regions_in_corner = std::collections::BTreeSet::new();
        for wi in 0..4 {
            for i in 0..16 {
                for j in 0..16 {
                    let pos = |k: usize| {
                        let (wr, wc) = (wi / 2, wi % 2);
                        ((wr * 4 + k / 4 + s) % h, (wc * 4 + k % 4 + s) % w)
                    };
                    let (a, b) = (pos(i), pos(j));
                    let same = oracle_region(a.0, a.1, h, w, win, s) == oracle_region(b.0, b.1, h, w, win, s);
                    let v = m[wi * 256 + i * 16 + j];
                    assert_eq!(v == 0.0, same);
                    assert_eq!(v, m[wi * 256 + j * 16 + i]);
                    if wi == 3 {
                        regions_in_corner.insert(oracle_region(a.0, a.1, h, w, win, s));
                    }
                }
            }
        }
        assert_eq!(regions_in_corner.len(), 4);
        assert!(shifted_attention_mask(8, 8, 4, 0).unwrap().iter().all(|&v| v == 0.0));
        assert!(shifted_attention_mask(8, 8, 4, 4).is_err());
    }

    fn rand(seed: u64, n: usize, scale: f64) -> Vec<f64> {
        let mut r = prng(seed);
        (0..n).map(|_| (unit_f64(&mut r) * 2.0 - 1.0) * scale).collect()
    }

    fn attn_params(d: usize, heads: usize, win: usize) -> AttentionParams {
        let span = 2 * win - 1;
        AttentionParams {
            dim: d,
            heads,
            qkv_w: rand(1, 3 * d * d, 0.5),
            qkv_b: rand(2, 3 * d, 0.1),
            rel_bias: rand(3, span * span * heads, 0.3),
            proj_w: rand(4, d * d, 0.5),
            proj_b: rand(5, d, 0.1),
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_suppresses() {
        let p = attn_params(4, 2, 2);
        let x = rand(6, 2 * 4 * 4, 1.0);
        let mut mask = vec![0.0f32; 2 * 16];
        mask[1] = MASK_VALUE as f32;
        let (_, a) = window_attention(&x, 2, &p, Some(&mask)).unwrap();
        for row in a.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(a[1] < 1e-8 && a[16 + 1] < 1e-8);
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let d = 4;
        let p = attn_params(d, 2, 1);
        let x = rand(7, d, 1.0);
        let (out, a) = window_attention(&x, 1, &p, None).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        // v = x·Wv + bv, out = v·Wo + bo
        let v: Vec<f64> = (0..d)
            .map(|j| p.qkv_b[2 * d + j] + (0..d).map(|i| x[i] * p.qkv_w[i * 3 * d + 2 * d + j]).sum::<f64>())
            .collect();
        for j in 0..d {
            let want = p.proj_b[j] + (0..d).map(|i| v[i] * p.proj_w[i * d + j]).sum::<f64>();
            assert!((out[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_index_is_centered() {
        let r = relative_position_index(2, 2);
        assert_eq!(r[0], 4);
        assert_eq!(r.len(), 16);
        assert!(r.iter().all(|&v| v < 9));
        let small = relative_position_index(1, 4);
        assert_eq!(small, vec![3 * 7 + 3]);
    }

    #[test]
    fn toy_forward_shape_and_degenerate_params() {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let x: Vec<f32> = rand(8, 28 * 64 * 64, 1.0).into_iter().map(|v| v as f32).collect();
        let y = forward(&params, &x, 64, 64).unwrap();
        assert_eq!(y.len(), 9 * 64 * 64);
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(forward(&params, &x, 64, 64).unwrap(), y);
        assert!(forward(&params, &x[..28 * 48 * 64], 48, 64).is_err());

        let mut zero = ModelParams::zeros(&cfg).unwrap();
        zero.get_mut("head.b").unwrap().copy_from_slice(&[0.5, -1.0, 0.0, 2.0, 0.1, 0.2, 0.3, 0.4, 0.6]);
        let y = forward(&zero, &x, 64, 64).unwrap();
        let n = 64 * 64;
        for c in 0..9 {
            let b = zero.get("head.b").unwrap()[c];
            assert!(y[c * n..(c + 1) * n].iter().all(|&v| v == b));
        }
        let all_zero = ModelParams::zeros(&cfg).unwrap();
        assert!(forward(&all_zero, &x, 64, 64).unwrap().iter().all(|&v| v == 0.0));
    }
}
