//! Multi-head scaled dot-product attention over packed sequences.
//!
//! Queries, keys and values of many independent sequences are stacked row-wise
//! into single matrices. A [`AttnLayout`] lists which query rows attend to which
//! key rows, so one kernel call serves a whole batch (or a whole beam, where
//! several query blocks may point at the same key block).

use std::rc::Rc;

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Visibility of keys from queries inside one segment, in segment-relative
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum SegmentMask {
    /// Every key visible.
    Full,
    /// Key `j` visible from query `i` iff `j <= i`.
    Inclusive,
    /// Key `j` visible from query `i` iff `j < i`.
    Strict,
    /// Row-major `q_len × k_len` visibility matrix.
    Explicit(Rc<[bool]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub mask: SegmentMask,
}

impl Segment {
    #[inline]
    fn visible(&self, i: usize, j: usize) -> bool {
        match &self.mask {
            SegmentMask::Full => true,
            SegmentMask::Inclusive => j <= i,
            SegmentMask::Strict => j < i,
            SegmentMask::Explicit(m) => m[i * self.k_len + j],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub segments: Vec<Segment>,
    /// Per key row; `false` hides the row from every query (padding).
    pub key_valid: Option<Vec<bool>>,
    /// When set, a query with no visible key yields a zero row instead of an error.
    pub allow_empty_rows: bool,
}

impl AttnLayout {
    /// One query block against one key block, all keys visible.
    pub fn dense(q_len: usize, k_len: usize) -> Self {
        AttnLayout {
            segments: vec![Segment {
                q_start: 0,
                q_len,
                k_start: 0,
                k_len,
                mask: SegmentMask::Full,
            }],
            key_valid: None,
            allow_empty_rows: false,
        }
    }

    fn validate(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        for s in &self.segments {
            if s.q_start + s.q_len > q_rows || s.k_start + s.k_len > k_rows {
                return Err(Error::Dimension(format!(
                    "segment {s:?} out of bounds for {q_rows} query and {k_rows} key rows"
                )));
            }
            if let SegmentMask::Explicit(m) = &s.mask {
                if m.len() != s.q_len * s.k_len {
                    return Err(Error::Dimension("explicit mask size mismatch".into()));
                }
            }
        }
        if let Some(kv) = &self.key_valid {
            if kv.len() != k_rows {
                return Err(Error::Dimension(format!(
                    "key validity mask has {} entries for {k_rows} key rows",
                    kv.len()
                )));
            }
        }
        Ok(())
    }
}

/// Saved softmax weights, one dense `q_len × k_len` block per (segment, head).
pub(crate) struct AttnCache {
    pub probs: Vec<f64>,
    pub offsets: Vec<usize>,
}

fn check_shapes(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<()> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::Dimension("attention expects matrices".into()));
    }
    if q.cols() != k.cols() {
        return Err(Error::Dimension(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if heads == 0 || q.cols() % heads != 0 || v.cols() % heads != 0 {
        return Err(Error::Dimension(format!(
            "widths {}/{} not divisible into {heads} heads",
            q.cols(),
            v.cols()
        )));
    }
    Ok(())
}

pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
) -> Result<(Tensor, AttnCache)> {
    check_shapes(q, k, v, heads)?;
    layout.validate(q.rows(), k.rows())?;
    let dk = q.cols();
    let dv = v.cols();
    let hk = dk / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hk as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let mut out = vec![0.0; q.rows() * dv];
    let mut offsets = Vec::with_capacity(layout.segments.len() * heads);
    let total: usize = layout.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
    let mut probs = vec![0.0; total];
    let mut off = 0;
    let mut scores = Vec::new();

    for s in &layout.segments {
        for h in 0..heads {
            offsets.push(off);
            for i in 0..s.q_len {
                let qi = s.q_start + i;
                let qrow = &qd[qi * dk + h * hk..qi * dk + (h + 1) * hk];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..s.k_len {
                    let kj = s.k_start + j;
                    let ok = s.visible(i, j)
                        && layout.key_valid.as_ref().is_none_or(|kv| kv[kj]);
                    if ok {
                        let krow = &kd[kj * dk + h * hk..kj * dk + (h + 1) * hk];
                        let sc = dot(qrow, krow) * scale;
                        max = max.max(sc);
                        scores.push(Some(sc));
                    } else {
                        scores.push(None);
                    }
                }
                if max == f64::NEG_INFINITY {
                    if layout.allow_empty_rows {
                        continue;
                    }
                    return Err(Error::DegenerateMask { row: qi });
                }
                let prow = &mut probs[off + i * s.k_len..off + (i + 1) * s.k_len];
                let mut z = 0.0;
                for (p, sc) in prow.iter_mut().zip(&scores) {
                    if let Some(sc) = sc {
                        *p = (sc - max).exp();
                        z += *p;
                    }
                }
                for p in prow.iter_mut() {
                    *p /= z;
                }
                let orow = &mut out[qi * dv + h * hv..qi * dv + (h + 1) * hv];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let kj = s.k_start + j;
                    let vrow = &vd[kj * dv + h * hv..kj * dv + (h + 1) * hv];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
            off += s.q_len * s.k_len;
        }
    }
    Ok((
        Tensor::from_parts(vec![q.rows(), dv], out),
        AttnCache { probs, offsets },
    ))
}

/// Gradients with respect to `(q, k, v)` given the output gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttnLayout,
    cache: &AttnCache,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dk = q.cols();
    let dv = v.cols();
    let hk = dk / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hk as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dkv = vec![0.0; kd.len()];
    let mut dvv = vec![0.0; vd.len()];
    let mut dp = Vec::new();

    let mut idx = 0;
    for s in &layout.segments {
        for h in 0..heads {
            let off = cache.offsets[idx];
            idx += 1;
            for i in 0..s.q_len {
                let qi = s.q_start + i;
                let prow = &cache.probs[off + i * s.k_len..off + (i + 1) * s.k_len];
                let dorow = &dout[qi * dv + h * hv..qi * dv + (h + 1) * hv];
                dp.clear();
                let mut acc = 0.0;
                for (j, &p) in prow.iter().enumerate() {
                    let kj = s.k_start + j;
                    if p == 0.0 {
                        dp.push(0.0);
                        continue;
                    }
                    let vrow = &vd[kj * dv + h * hv..kj * dv + (h + 1) * hv];
                    let g = dot(dorow, vrow);
                    dp.push(g);
                    acc += p * g;
                    let dvrow = &mut dvv[kj * dv + h * hv..kj * dv + (h + 1) * hv];
                    for (d, o) in dvrow.iter_mut().zip(dorow) {
                        *d += p * o;
                    }
                }
                let qrow = &qd[qi * dk + h * hk..qi * dk + (h + 1) * hk];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let kj = s.k_start + j;
                    let ds = p * (dp[j] - acc) * scale;
                    let krow = &kd[kj * dk + h * hk..kj * dk + (h + 1) * hk];
                    let dqrow = &mut dq[qi * dk + h * hk..qi * dk + (h + 1) * hk];
                    for (d, x) in dqrow.iter_mut().zip(krow) {
                        *d += ds * x;
                    }
                    let dkrow = &mut dkv[kj * dk + h * hk..kj * dk + (h + 1) * hk];
                    for (d, x) in dkrow.iter_mut().zip(qrow) {
                        *d += ds * x;
                    }
                }
            }
        }
    }
    (dq, dkv, dvv)
}

/// Single-head `softmax(Q Kᵀ / √d_k) V` with an optional `m × n` visibility mask.
///
/// Masked entries get zero weight; a query row with no visible key is rejected.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[Vec<bool>]>,
) -> Result<Tensor> {
    check_shapes(q, k, v, 1)?;
    let (m, n) = (q.rows(), k.rows());
    let seg_mask = match mask {
        None => SegmentMask::Full,
        Some(rows) => {
            if rows.len() != m || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Dimension(format!("mask must be {m}×{n}")));
            }
            SegmentMask::Explicit(rows.iter().flatten().copied().collect())
        }
    };
    let layout = AttnLayout {
        segments: vec![Segment {
            q_start: 0,
            q_len: m,
            k_start: 0,
            k_len: n,
            mask: seg_mask,
        }],
        key_valid: None,
        allow_empty_rows: false,
    };
    forward(q, k, v, 1, &layout).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[vec![0.3, -1.2], vec![5.0, 2.0]]);
        let k = t(&[vec![0.7, 0.1], vec![0.7, 0.1]]);
        let v = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[0.5, 0.5]);
        }
    }

    #[test]
    fn single_visible_key_copies_value() {
        let q = t(&[vec![1.0, 2.0]]);
        let k = t(&[vec![3.0, -1.0], vec![0.5, 0.5], vec![-2.0, 4.0]]);
        let v = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mask = vec![vec![false, true, false]];
        let out = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn hand_computed_two_key_case() {
        // weights softmax(1/√2, 0) over values 1 and 2
        let q = t(&[vec![1.0, 0.0]]);
        let k = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = t(&[vec![1.0], vec![2.0]]);
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let a = (1.0 / 2f64.sqrt()).exp();
        let expected = (a * 1.0 + 2.0) / (a + 1.0);
        assert!((out.item() - expected).abs() < 1e-12);
        assert!((out.item() - 1.33024).abs() < 1e-5);
    }

    #[test]
    fn all_masked_row_is_rejected() {
        let q = t(&[vec![1.0], vec![1.0]]);
        let k = t(&[vec![1.0]]);
        let v = t(&[vec![1.0]]);
        let mask = vec![vec![true], vec![false]];
        assert!(matches!(
            scaled_dot_attention(&q, &k, &v, Some(&mask)),
            Err(Error::DegenerateMask { row: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let q = t(&[vec![1.0, 0.0]]);
        let k = t(&[vec![1.0]]);
        let v = t(&[vec![1.0]]);
        assert!(matches!(
            scaled_dot_attention(&q, &k, &v, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn empty_rows_allowed_when_requested() {
        let q = t(&[vec![1.0], vec![2.0]]);
        let k = t(&[vec![1.0], vec![3.0]]);
        let v = t(&[vec![4.0], vec![5.0]]);
        let layout = AttnLayout {
            segments: vec![Segment {
                q_start: 0,
                q_len: 2,
                k_start: 0,
                k_len: 2,
                mask: SegmentMask::Strict,
            }],
            key_valid: None,
            allow_empty_rows: true,
        };
        let (out, _) = forward(&q, &k, &v, 1, &layout).unwrap();
        assert_eq!(out.row(0), &[0.0]);
        assert_eq!(out.row(1), &[4.0]);
    }
}
