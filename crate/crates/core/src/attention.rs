//! Attention kernels: plain self-attention and the content/style fusions
//! (naive style-cross, simple addition, cross-attention reweighting, the
//! offset-constant form of simple addition, masked and multi-style control).
//!
//! Every fusion is a single softmax over a row-concatenation of logit
//! blocks, each block pairing a key matrix with its value matrix.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, MASKED_LOGIT};

/// Style scaling factor used when none is configured.
pub const DEFAULT_LAMBDA: f64 = 1.2;

/// One key/value source inside a fused softmax.
#[derive(Clone, Copy)]
pub struct LogitBlock<'a> {
    pub keys: &'a Tensor,
    pub values: &'a Tensor,
    /// Multiplier applied to `Q K^T / sqrt(d)`.
    pub scale: f64,
    /// Added to each scaled logit of this block (per query row).
    pub row_offset: Option<&'a [f64]>,
    pub mask: Option<&'a StyleMask>,
}

impl<'a> LogitBlock<'a> {
    pub fn new(keys: &'a Tensor, values: &'a Tensor) -> Self {
        Self { keys, values, scale: 1.0, row_offset: None, mask: None }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn offset(mut self, row_offset: &'a [f64]) -> Self {
        self.row_offset = Some(row_offset);
        self
    }

    pub fn masked(mut self, mask: &'a StyleMask) -> Self {
        self.mask = Some(mask);
        self
    }
}

/// Row-stochastic attention weights over the stacked blocks and the
/// resulting output rows.
#[derive(Clone, Debug)]
pub struct Fused {
    pub weights: Tensor,
    pub output: Tensor,
}

impl Fused {
    /// Total weight each row assigns to columns `range`.
    pub fn block_mass(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|i| self.weights.row(i)[range.clone()].iter().sum())
            .collect()
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<usize> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::Dimension("attention inputs must be rank-2".into()));
    }
    let d = q.cols();
    if d == 0 {
        return Err(Error::Domain("attention head dimension is zero".into()));
    }
    if k.cols() != d {
        return Err(Error::Dimension(format!(
            "query/key channel extents differ: {} vs {}",
            d,
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "key/value token extents differ: {} vs {}",
            k.rows(),
            v.rows()
        )));
    }
    Ok(d)
}

/// `Q K^T / sqrt(d)` with `d` the query channel extent.
pub fn scaled_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.cols();
    if d == 0 {
        return Err(Error::Domain("attention head dimension is zero".into()));
    }
    Ok(q.matmul_t(k)?.scale(1.0 / (d as f64).sqrt()))
}

/// Softmax over the concatenated logits of all blocks, applied to the
/// stacked values.
pub fn fused_attention(q: &Tensor, blocks: &[LogitBlock<'_>]) -> Result<Fused> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Config("fused attention needs at least one block".into()))?;
    let value_dim = first.values.cols();
    let mut total_cols = 0;
    for b in blocks {
        check_qkv(q, b.keys, b.values)?;
        if b.values.cols() != value_dim {
            return Err(Error::Dimension("value channel extents differ across blocks".into()));
        }
        if let Some(off) = b.row_offset {
            if off.len() != q.rows() {
                return Err(Error::Dimension("row offset length must equal query count".into()));
            }
        }
        if let Some(m) = b.mask {
            m.check(q.rows(), b.keys.rows())?;
        }
        total_cols += b.keys.rows();
    }
    let n = q.rows();
    let mut weights = vec![0.0; n * total_cols];
    let mut col = 0;
    let mut spans = Vec::with_capacity(blocks.len());
    for b in blocks {
        let logits = scaled_logits(q, b.keys)?;
        let m = b.keys.rows();
        for i in 0..n {
            let shift = b.row_offset.map_or(0.0, |o| o[i]);
            let dst = &mut weights[i * total_cols + col..i * total_cols + col + m];
            for (j, (w, &x)) in dst.iter_mut().zip(logits.row(i)).enumerate() {
                let raw = b.scale * x + shift;
                *w = match b.mask {
                    Some(mask) => mask.apply(i, j, raw),
                    None => raw,
                };
            }
        }
        spans.push(col..col + m);
        col += m;
    }
    for i in 0..n {
        softmax_blocks(&mut weights[i * total_cols..(i + 1) * total_cols], &spans, i)?;
    }
    let weights = Tensor::matrix(n, total_cols, weights)?;
    // Per-block products summed in block order: identical blocks then
    // contribute identical partial results.
    let mut output: Option<Tensor> = None;
    for (b, span) in blocks.iter().zip(&spans) {
        let part_w: Vec<f64> = (0..n).flat_map(|i| weights.row(i)[span.clone()].to_vec()).collect();
        let part = Tensor::matrix(n, span.len(), part_w)?.matmul(b.values)?;
        output = Some(match output {
            Some(acc) => acc.add(&part)?,
            None => part,
        });
    }
    Ok(Fused { weights, output: output.expect("at least one block") })
}

/// Row softmax whose normalizer is accumulated block by block.
fn softmax_blocks(row: &mut [f64], spans: &[std::ops::Range<usize>], index: usize) -> Result<()> {
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Domain(format!("softmax row {index} has non-finite logits")));
    }
    if row.iter().all(|&v| v <= MASKED_LOGIT) {
        return Err(Error::DegenerateRow(index));
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for span in spans {
        let mut partial = 0.0;
        for v in &mut row[span.clone()] {
            *v = (*v - max).exp();
            partial += *v;
        }
        total += partial;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// `Softmax(Q K^T / sqrt(d)) V`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(fused_attention(q, &[LogitBlock::new(k, v)])?.output)
}

/// Content queries against style keys and values only.
pub fn style_cross_naive(qc: &Tensor, ks: &Tensor, vs: &Tensor) -> Result<Tensor> {
    attend(qc, ks, vs)
}

/// `lambda * Attn(Qc, Ks, Vs) + (1 - lambda) * Attn(Qc, Kc, Vc)`, `lambda` in `[0, 1]`.
pub fn simple_addition(
    qc: &Tensor,
    kc: &Tensor,
    vc: &Tensor,
    ks: &Tensor,
    vs: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("simple addition needs lambda in [0, 1], got {lambda}")));
    }
    let cross = attend(qc, ks, vs)?;
    let own = attend(qc, kc, vc)?;
    cross.lincomb(lambda, &own, 1.0 - lambda)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("reweighting needs lambda > 0, got {lambda}")));
    }
    Ok(())
}

/// Softmax over `[lambda Qc Ks^T / sqrt(d), Qc Kc^T / sqrt(d)]` applied to `[Vs; Vc]`.
pub fn reweighted_attention(
    qc: &Tensor,
    kc: &Tensor,
    vc: &Tensor,
    ks: &Tensor,
    vs: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    Ok(reweighted_fused(qc, kc, vc, ks, vs, lambda)?.output)
}

/// Weights and output of [`reweighted_attention`]; style columns come first.
pub fn reweighted_fused(
    qc: &Tensor,
    kc: &Tensor,
    vc: &Tensor,
    ks: &Tensor,
    vs: &Tensor,
    lambda: f64,
) -> Result<Fused> {
    check_lambda(lambda)?;
    fused_attention(qc, &[LogitBlock::new(ks, vs).scaled(lambda), LogitBlock::new(kc, vc)])
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row `ln(sum_j exp(cc_ij) / sum_j exp(cs_ij))` for already scaled logits.
pub fn offset_constant(content_logits: &Tensor, style_logits: &Tensor) -> Result<Vec<f64>> {
    if content_logits.rank() != 2
        || style_logits.rank() != 2
        || content_logits.rows() != style_logits.rows()
    {
        return Err(Error::Dimension("offset constant needs logits with equal row counts".into()));
    }
    Ok((0..content_logits.rows())
        .map(|i| log_sum_exp(content_logits.row(i)) - log_sum_exp(style_logits.row(i)))
        .collect())
}

/// Equal-weight simple addition written as one softmax with the style block
/// shifted by the offset constant `C`. Returns the output and `C`.
pub fn offset_c_fusion(
    qc: &Tensor,
    kc: &Tensor,
    vc: &Tensor,
    ks: &Tensor,
    vs: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    check_qkv(qc, kc, vc)?;
    check_qkv(qc, ks, vs)?;
    let c = offset_constant(&scaled_logits(qc, kc)?, &scaled_logits(qc, ks)?)?;
    let fused = fused_attention(qc, &[LogitBlock::new(ks, vs).offset(&c), LogitBlock::new(kc, vc)])?;
    Ok((fused.output, c))
}

/// Restriction of which style tokens a content query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum StyleMask {
    /// `allowed[i * cols + j]` for content token `i` and style token `j`.
    Pairs { rows: usize, cols: usize, allowed: Vec<bool> },
    /// Per style token logit offset in `[MASKED_LOGIT, 0]`; `MASKED_LOGIT`
    /// marks tokens outside the region.
    Columns(Vec<f64>),
}

impl StyleMask {
    pub fn full(style_tokens: usize) -> Self {
        StyleMask::Columns(vec![0.0; style_tokens])
    }

    pub fn empty(style_tokens: usize) -> Self {
        StyleMask::Columns(vec![MASKED_LOGIT; style_tokens])
    }

    /// Region `inside` on a `grid_h x grid_w` token grid with a linear ramp
    /// `ramp` tokens wide outside it. A token at Chebyshev distance `k` from
    /// the region (`1 <= k <= ramp`) gets offset `MASKED_LOGIT * k / (ramp + 1)`.
    pub fn from_region(grid_h: usize, grid_w: usize, inside: &[bool], ramp: usize) -> Result<Self> {
        if inside.len() != grid_h * grid_w {
            return Err(Error::Dimension(format!(
                "region has {} cells, grid is {grid_h}x{grid_w}",
                inside.len()
            )));
        }
        let cells: Vec<(usize, usize)> = (0..inside.len())
            .filter(|&k| inside[k])
            .map(|k| (k / grid_w, k % grid_w))
            .collect();
        let offsets = (0..inside.len())
            .map(|k| {
                let (r, c) = (k / grid_w, k % grid_w);
                let dist = cells
                    .iter()
                    .map(|&(ir, ic)| r.abs_diff(ir).max(c.abs_diff(ic)))
                    .min();
                match dist {
                    Some(0) => 0.0,
                    Some(d) if d <= ramp => MASKED_LOGIT * d as f64 / (ramp + 1) as f64,
                    _ => MASKED_LOGIT,
                }
            })
            .collect();
        Ok(StyleMask::Columns(offsets))
    }

    /// Per style token coverage in `[0, 1]` (1 inside, 0 outside,
    /// intermediate values on the ramp), interpolated linearly in logit space.
    pub fn from_coverage(coverage: &[f64]) -> Result<Self> {
        if coverage.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain("mask coverage must lie in [0, 1]".into()));
        }
        Ok(StyleMask::Columns(
            coverage
                .iter()
                .map(|&c| if c <= 0.0 { MASKED_LOGIT } else { (1.0 - c) * MASKED_LOGIT })
                .collect(),
        ))
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        let ok = match self {
            StyleMask::Pairs { rows: r, cols: c, allowed } => {
                *r == rows && *c == cols && allowed.len() == rows * cols
            }
            StyleMask::Columns(off) => off.len() == cols,
        };
        if !ok {
            return Err(Error::Dimension(format!(
                "style mask does not match {rows} content x {cols} style tokens"
            )));
        }
        Ok(())
    }

    fn apply(&self, i: usize, j: usize, logit: f64) -> f64 {
        match self {
            StyleMask::Pairs { cols, allowed, .. } => {
                if allowed[i * cols + j] {
                    logit
                } else {
                    MASKED_LOGIT
                }
            }
            StyleMask::Columns(off) => {
                if off[j] <= MASKED_LOGIT {
                    MASKED_LOGIT
                } else {
                    logit + off[j]
                }
            }
        }
    }
}

/// [`reweighted_attention`] with the style logits passed through the mask.
pub fn masked_reweighted(
    qc: &Tensor,
    kc: &Tensor,
    vc: &Tensor,
    ks: &Tensor,
    vs: &Tensor,
    lambda: f64,
    mask: &StyleMask,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let blocks = [LogitBlock::new(ks, vs).scaled(lambda).masked(mask), LogitBlock::new(kc, vc)];
    Ok(fused_attention(qc, &blocks)?.output)
}

/// One softmax over every style block (each scaled by `lambda`) and the
/// content block, applied to `[Vs_1; ...; Vs_N; Vc]`.
pub fn multi_style_reweighted(
    qc: &Tensor,
    kc: &Tensor,
    vc: &Tensor,
    styles: &[(&Tensor, &Tensor)],
    lambda: f64,
) -> Result<Tensor> {
    if styles.is_empty() {
        return Err(Error::Config("multi-style fusion needs at least one style".into()));
    }
    check_lambda(lambda)?;
    let mut blocks: Vec<LogitBlock<'_>> = styles
        .iter()
        .map(|&(k, v)| LogitBlock::new(k, v).scaled(lambda))
        .collect();
    blocks.push(LogitBlock::new(kc, vc));
    Ok(fused_attention(qc, &blocks)?.output)
}
