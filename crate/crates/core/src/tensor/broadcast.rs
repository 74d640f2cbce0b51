use super::strides;
use crate::error::{Error, Result};

/// Right-aligned broadcast of `a` against `b`.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Index walker mapping every output element of a broadcast binary op to the
/// flat positions of both operands.
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    same: bool,
}

fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = strides(shape);
    let mut s = vec![0; rank];
    for i in 0..shape.len() {
        let o = i + rank - shape.len();
        s[o] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let out = broadcast_shape(op, a, b)?;
        let same = a == b;
        Ok(Self { sa: aligned_strides(a, &out), sb: aligned_strides(b, &out), out, same })
    }

    pub fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out.len();
        let inner = self.out[rank - 1];
        let (ia_step, ib_step) = (self.sa[rank - 1], self.sb[rank - 1]);
        let mut counter = vec![0usize; rank];
        let (mut base_a, mut base_b) = (0usize, 0usize);
        let mut o = 0;
        while o < n {
            let (mut ia, mut ib) = (base_a, base_b);
            for _ in 0..inner {
                f(o, ia, ib);
                o += 1;
                ia += ia_step;
                ib += ib_step;
            }
            // advance the outer counter
            let mut d = rank - 1;
            while d > 0 {
                d -= 1;
                counter[d] += 1;
                base_a += self.sa[d];
                base_b += self.sb[d];
                if counter[d] < self.out[d] {
                    break;
                }
                base_a -= self.sa[d] * self.out[d];
                base_b -= self.sb[d] * self.out[d];
                counter[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_broadcast_right_aligned() {
        assert_eq!(broadcast_shape("t", &[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn walker_visits_expected_pairs() {
        let bc = Broadcast::new("t", &[2, 1], &[3]).unwrap();
        let mut seen = vec![];
        bc.for_each(|o, a, b| seen.push((o, a, b)));
        assert_eq!(seen, vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]);
    }
}
