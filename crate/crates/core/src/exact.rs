//! Error-free running sums of floats.
//!
//! An [`Expansion`] stores a sum as non-overlapping floats ordered by
//! increasing magnitude, so the represented value is exact and its sign is
//! the sign of the largest component.

/// `a + b = s + e` exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    let av = s - bv;
    (s, (a - av) + (b - bv))
}

/// `two_sum` for `|a| >= |b|`.
#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Components kept before the expansion is compressed.
const COMPRESS_AT: usize = 6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Expansion {
    parts: Vec<f64>,
}

impl Expansion {
    pub fn new(x: f64) -> Self {
        let mut e = Expansion::default();
        e.add(x);
        e
    }

    /// Adds `b` without rounding.
    pub fn add(&mut self, b: f64) {
        if b == 0.0 {
            return;
        }
        let mut q = b;
        let mut out = Vec::with_capacity(self.parts.len() + 1);
        for &p in &self.parts {
            let (s, e) = two_sum(q, p);
            if e != 0.0 {
                out.push(e);
            }
            q = s;
        }
        if q != 0.0 {
            out.push(q);
        }
        self.parts = out;
        if self.parts.len() > COMPRESS_AT {
            self.compress();
        }
    }

    pub fn add_expansion(&mut self, other: &Expansion) {
        for &p in &other.parts {
            self.add(p);
        }
    }

    pub fn sub_expansion(&mut self, other: &Expansion) {
        for &p in &other.parts {
            self.add(-p);
        }
    }

    fn compress(&mut self) {
        let e = &self.parts;
        if e.len() < 2 {
            return;
        }
        let n = e.len();
        let mut g = vec![0.0; n];
        let mut bottom = n - 1;
        let mut q = e[n - 1];
        for i in (0..n - 1).rev() {
            let (big, small) = fast_two_sum(q, e[i]);
            if small != 0.0 {
                g[bottom] = big;
                bottom -= 1;
                q = small;
            } else {
                q = big;
            }
        }
        g[bottom] = q;
        let mut h = Vec::with_capacity(n - bottom);
        for &gi in &g[bottom + 1..] {
            let (big, small) = fast_two_sum(gi, q);
            if small != 0.0 {
                h.push(small);
            }
            q = big;
        }
        if q != 0.0 {
            h.push(q);
        }
        self.parts = h;
    }

    /// Nearest-float estimate; has the same sign as the exact value.
    pub fn value(&self) -> f64 {
        self.parts.iter().sum()
    }

    /// Exact sign, `0.0` for an exact zero.
    pub fn signum(&self) -> f64 {
        match self.parts.last() {
            None => 0.0,
            Some(&p) if p > 0.0 => 1.0,
            Some(_) => -1.0,
        }
    }
}
