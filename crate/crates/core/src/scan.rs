//! Numeric primitives for the diagonal linear recurrence
//! `s_t = a_t ⊙ s_{t-1} + b_t` with complex state stored as separate
//! real and imaginary planes.
//!
//! The recurrence is evaluated with a work-efficient inclusive tree scan
//! (up-sweep then Brent-Kung down-sweep) over a power-of-two padded
//! sequence. Padding uses the identity element `a = 1, b = 0`, so the
//! reduction tree shape depends only on the padded length and results are
//! bit-for-bit reproducible.

use crate::error::{dim, Result};

/// A complex vector in split re/im layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexVec {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexVec {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(dim(format!("re has {} entries, im has {}", re.len(), im.len())));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(len: usize) -> Self {
        Self { re: vec![0.0; len], im: vec![0.0; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { re: vec![1.0; len], im: vec![0.0; len] }
    }

    pub fn from_real(re: Vec<f64>) -> Self {
        let im = vec![0.0; re.len()];
        Self { re, im }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }
}

/// One step of the recurrence: the map `s ↦ a ⊙ s + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement {
    pub a: ComplexVec,
    pub b: ComplexVec,
}

impl ScanElement {
    pub fn new(a: ComplexVec, b: ComplexVec) -> Result<Self> {
        if a.len() != b.len() {
            return Err(dim(format!("transition has {} states, drive has {}", a.len(), b.len())));
        }
        Ok(Self { a, b })
    }

    pub fn identity(len: usize) -> Self {
        Self { a: ComplexVec::ones(len), b: ComplexVec::zeros(len) }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Composes two steps, `left` applied first: returns
/// `(right.a ⊙ left.a, right.a ⊙ left.b + right.b)`.
pub fn scan_op(left: &ScanElement, right: &ScanElement) -> Result<ScanElement> {
    let p = left.len();
    if right.len() != p || left.b.len() != p || right.b.len() != p {
        return Err(dim(format!("cannot compose elements of length {} and {}", p, right.len())));
    }
    let mut out = ScanElement::identity(p);
    for i in 0..p {
        let (ar, ai) = (right.a.re[i], right.a.im[i]);
        out.a.re[i] = ar * left.a.re[i] - ai * left.a.im[i];
        out.a.im[i] = ar * left.a.im[i] + ai * left.a.re[i];
        out.b.re[i] = ar * left.b.re[i] - ai * left.b.im[i] + right.b.re[i];
        out.b.im[i] = ar * left.b.im[i] + ai * left.b.re[i] + right.b.im[i];
    }
    Ok(out)
}

/// Flat scan buffers: `len` elements of `p` complex lanes each, row-major.
struct ScanBuffers {
    p: usize,
    a_re: Vec<f64>,
    a_im: Vec<f64>,
    b_re: Vec<f64>,
    b_im: Vec<f64>,
}

impl ScanBuffers {
    fn with_padded_len(p: usize, len: usize) -> Self {
        let n = len.next_power_of_two();
        Self {
            p,
            a_re: vec![1.0; n * p],
            a_im: vec![0.0; n * p],
            b_re: vec![0.0; n * p],
            b_im: vec![0.0; n * p],
        }
    }

    /// `elem[dst] = elem[src] ∘ elem[dst]` (src applied first).
    #[inline]
    fn combine_into(&mut self, src: usize, dst: usize) {
        let p = self.p;
        let (s, d) = (src * p, dst * p);
        for i in 0..p {
            let (ar, ai) = (self.a_re[d + i], self.a_im[d + i]);
            let (lar, lai) = (self.a_re[s + i], self.a_im[s + i]);
            let (lbr, lbi) = (self.b_re[s + i], self.b_im[s + i]);
            self.a_re[d + i] = ar * lar - ai * lai;
            self.a_im[d + i] = ar * lai + ai * lar;
            self.b_re[d + i] += ar * lbr - ai * lbi;
            self.b_im[d + i] += ar * lbi + ai * lbr;
        }
    }

    fn run(&mut self) {
        let n = self.a_re.len() / self.p.max(1);
        if n <= 1 {
            return;
        }
        let levels = n.trailing_zeros() as usize;
        // up-sweep: each right child absorbs its left sibling subtree
        for d in 0..levels {
            let stride = 1 << (d + 1);
            let half = stride >> 1;
            let mut i = stride - 1;
            while i < n {
                self.combine_into(i - half, i);
                i += stride;
            }
        }
        // down-sweep: propagate completed prefixes into the gaps
        for d in (0..levels.saturating_sub(1)).rev() {
            let stride = 1 << (d + 1);
            let half = stride >> 1;
            let mut i = stride + half - 1;
            while i < n {
                self.combine_into(i - half, i);
                i += stride;
            }
        }
    }
}

/// Inclusive tree scan over arbitrary (time-varying) elements. Output `k`
/// is the state after `k + 1` steps starting from `s_0 = 0`.
pub fn parallel_scan(elements: &[ScanElement]) -> Result<Vec<ComplexVec>> {
    let Some(first) = elements.first() else {
        return Ok(Vec::new());
    };
    let p = first.len();
    let mut buf = ScanBuffers::with_padded_len(p, elements.len());
    for (t, e) in elements.iter().enumerate() {
        if e.a.len() != p || e.b.len() != p {
            return Err(dim(format!("element {t} has length {}, expected {p}", e.a.len())));
        }
        let o = t * p;
        buf.a_re[o..o + p].copy_from_slice(&e.a.re);
        buf.a_im[o..o + p].copy_from_slice(&e.a.im);
        buf.b_re[o..o + p].copy_from_slice(&e.b.re);
        buf.b_im[o..o + p].copy_from_slice(&e.b.im);
    }
    buf.run();
    Ok((0..elements.len())
        .map(|t| {
            let o = t * p;
            ComplexVec { re: buf.b_re[o..o + p].to_vec(), im: buf.b_im[o..o + p].to_vec() }
        })
        .collect())
}

/// Tree scan for a time-invariant diagonal transition `a` and a drive given
/// as flat `len × p` planes. Returns the state planes, same layout.
pub fn scan_diag(a: &ComplexVec, b_re: &[f64], b_im: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = a.len();
    check_drive(p, b_re, b_im)?;
    if p == 0 || b_re.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let len = b_re.len() / p;
    let mut buf = ScanBuffers::with_padded_len(p, len);
    for t in 0..len {
        let o = t * p;
        buf.a_re[o..o + p].copy_from_slice(&a.re);
        buf.a_im[o..o + p].copy_from_slice(&a.im);
    }
    buf.b_re[..len * p].copy_from_slice(b_re);
    buf.b_im[..len * p].copy_from_slice(b_im);
    buf.run();
    buf.b_re.truncate(len * p);
    buf.b_im.truncate(len * p);
    Ok((buf.b_re, buf.b_im))
}

/// Plain left-to-right evaluation of the same recurrence as [`scan_diag`].
pub fn scan_diag_sequential(
    a: &ComplexVec,
    b_re: &[f64],
    b_im: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = a.len();
    check_drive(p, b_re, b_im)?;
    let mut s_re = b_re.to_vec();
    let mut s_im = b_im.to_vec();
    if p == 0 {
        return Ok((s_re, s_im));
    }
    let len = b_re.len() / p;
    for t in 1..len {
        let (prev, cur) = ((t - 1) * p, t * p);
        for i in 0..p {
            let (pr, pi) = (s_re[prev + i], s_im[prev + i]);
            s_re[cur + i] += a.re[i] * pr - a.im[i] * pi;
            s_im[cur + i] += a.re[i] * pi + a.im[i] * pr;
        }
    }
    Ok((s_re, s_im))
}

fn check_drive(p: usize, b_re: &[f64], b_im: &[f64]) -> Result<()> {
    if b_re.len() != b_im.len() {
        return Err(dim("drive re/im planes differ in length"));
    }
    if p == 0 && !b_re.is_empty() {
        return Err(dim("zero-width transition with non-empty drive"));
    }
    if p > 0 && !b_re.len().is_multiple_of(p) {
        return Err(dim(format!("drive length {} is not a multiple of {p}", b_re.len())));
    }
    Ok(())
}

/// Running sum with Neumaier compensation.
pub fn cumulative_sum(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in x {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
        out.push(sum + comp);
    }
    out
}
