//! Uniform-bin index over point centers, time axis first. Bin side equals
//! the largest radius cap, so any bump reaching a query lies in a small,
//! cheaply enumerable block of bins around it. Bins are visited in a fixed
//! lexicographic order and point ids in insertion order, which keeps
//! floating-point sums reproducible.

use super::Point;

#[derive(Debug, Clone)]
pub(super) struct BinIndex {
    side: f64,
    lo: Vec<i64>,     // first bin per axis, time axis first
    dims: Vec<usize>, // bin counts per axis
    bins: Vec<Vec<u32>>,
}

impl BinIndex {
    pub(super) fn build(
        side: f64,
        t_lo: f64,
        t_hi: f64,
        x_lo: &[f64],
        x_hi: &[f64],
        points: &[Point],
    ) -> BinIndex {
        let d = x_lo.len();
        let mut lo = Vec::with_capacity(d + 1);
        let mut dims = Vec::with_capacity(d + 1);
        for (a, b) in std::iter::once((&t_lo, &t_hi)).chain(x_lo.iter().zip(x_hi)) {
            let first = (a / side).floor() as i64;
            let last = (b / side).floor() as i64;
            lo.push(first);
            dims.push((last - first + 1).max(1) as usize);
        }
        let total: usize = dims.iter().product();
        let mut bins = vec![Vec::new(); total];
        let mut index = BinIndex { side, lo, dims, bins: Vec::new() };
        for (id, p) in points.iter().enumerate() {
            let slot = index.slot_of(p.t, &p.x);
            bins[slot].push(id as u32);
        }
        index.bins = bins;
        index
    }

    fn axis_bin(&self, axis: usize, coord: f64) -> usize {
        let raw = (coord / self.side).floor() as i64 - self.lo[axis];
        raw.clamp(0, self.dims[axis] as i64 - 1) as usize
    }

    fn slot_of(&self, t: f64, x: &[f64]) -> usize {
        let mut slot = self.axis_bin(0, t);
        for (j, c) in x.iter().enumerate() {
            slot = slot * self.dims[j + 1] + self.axis_bin(j + 1, *c);
        }
        slot
    }

    /// Visits point ids in all bins overlapping the box query +- reach
    /// (reach_t on the time axis, reach_x per spatial axis), in a fixed
    /// deterministic order.
    pub(super) fn for_each_in_reach(
        &self,
        t: f64,
        x: &[f64],
        reach_t: f64,
        reach_x: &[f64],
        mut f: impl FnMut(u32),
    ) {
        let axes = self.dims.len();
        let mut first = Vec::with_capacity(axes);
        let mut last = Vec::with_capacity(axes);
        for axis in 0..axes {
            let (c, reach) = if axis == 0 {
                (t, reach_t)
            } else {
                (x[axis - 1], reach_x[axis - 1])
            };
            let a = self.axis_bin(axis, c - reach);
            let b = self.axis_bin(axis, c + reach);
            first.push(a);
            last.push(b);
        }
        // Odometer over the (at most 3-axis) bin block, lexicographic.
        let mut cursor = first.clone();
        loop {
            let mut slot = cursor[0];
            for axis in 1..axes {
                slot = slot * self.dims[axis] + cursor[axis];
            }
            for id in &self.bins[slot] {
                f(*id);
            }
            let mut axis = axes;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                if cursor[axis] < last[axis] {
                    cursor[axis] += 1;
                    for a in axis + 1..axes {
                        cursor[a] = first[a];
                    }
                    break;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Mark;

    #[test]
    fn visits_are_ordered_and_repeatable() {
        let mark = Mark { amplitude: 1.0, r_t: 1.0, r_x: 1.0 };
        let points: Vec<Point> = [(0.2, -1.4), (0.2, -1.3), (1.7, 0.4), (0.9, 2.2)]
            .iter()
            .map(|(t, x)| Point { t: *t, x: vec![*x], mark })
            .collect();
        let index = BinIndex::build(1.0, 0.0, 2.0, &[-2.0], &[3.0], &points);
        let mut a = Vec::new();
        index.for_each_in_reach(1.0, &[0.0], 2.0, &[4.0], |id| a.push(id));
        let mut b = Vec::new();
        index.for_each_in_reach(1.0, &[0.0], 2.0, &[4.0], |id| b.push(id));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        // Ids inside one bin keep insertion order.
        let pos0 = a.iter().position(|id| *id == 0).unwrap();
        let pos1 = a.iter().position(|id| *id == 1).unwrap();
        assert!(pos0 < pos1);
    }
}
