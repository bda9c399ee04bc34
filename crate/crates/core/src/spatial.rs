//! Uniform-grid nearest-neighbour search. Results are exact: the grid only
//! decides the visiting order.

use nalgebra::Vector3;

pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [i64; 3],
    /// prefix offsets into `order` per cell
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::zeros();
        }
        let ext = hi - lo;
        let n = points.len().max(1) as f64;
        // about one cell per point over the bounding box, ignoring flat axes
        let active: Vec<f64> = ext.iter().copied().filter(|e| *e > 1e-9).collect();
        let cell = if active.is_empty() {
            1.0
        } else {
            let vol: f64 = active.iter().product();
            (vol / n).powf(1.0 / active.len() as f64).max(1e-6)
        };
        let dims = [0, 1, 2].map(|k| ((ext[k] / cell).floor() as i64 + 1).clamp(1, 1 << 20));
        let ncell = (dims[0] * dims[1] * dims[2]) as usize;
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: vec![0; ncell + 1],
            order: vec![0; points.len()],
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &c in &ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..ncell {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        grid
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|k| ((p[k] - self.origin[k]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        let c = [0, 1, 2].map(|k| c[k].clamp(0, self.dims[k] - 1));
        ((c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]) as usize
    }

    pub fn nearest(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        self.search(p, usize::MAX)
    }

    /// Nearest point other than index `skip`.
    pub fn nearest_excluding(&self, p: &Vector3<f64>, skip: usize) -> Option<(usize, f64)> {
        self.search(p, skip)
    }

    fn search(&self, p: &Vector3<f64>, skip: usize) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = self.cell_of(p);
        // rings beyond this one contain no cells of the grid
        let last = (0..3)
            .map(|k| c[k].abs().max((c[k] - (self.dims[k] - 1)).abs()))
            .max()
            .unwrap();
        let mut best: Option<(usize, f64)> = None;
        let mut best_d2 = f64::INFINITY;
        for ring in 0..=last {
            let range = |k: usize| {
                let lo = (c[k] - ring).max(0);
                let hi = (c[k] + ring).min(self.dims[k] - 1);
                lo..=hi
            };
            for z in range(2) {
                for y in range(1) {
                    let edge = (z - c[2]).abs() == ring || (y - c[1]).abs() == ring;
                    let xs: Vec<i64> = if edge {
                        range(0).collect()
                    } else {
                        [c[0] - ring, c[0] + ring]
                            .into_iter()
                            .filter(|x| (0..self.dims[0]).contains(x))
                            .collect()
                    };
                    for x in xs {
                        if ring == 0 || edge || x != c[0] {
                            let cell = ((z * self.dims[1] + y) * self.dims[0] + x) as usize;
                            for &i in &self.order[self.starts[cell] as usize..self.starts[cell + 1] as usize] {
                                let i = i as usize;
                                if i == skip {
                                    continue;
                                }
                                let d2 = (self.points[i] - p).norm_squared();
                                if d2 < best_d2 || (d2 == best_d2 && best.is_some_and(|(b, _)| i < b)) {
                                    best_d2 = d2;
                                    best = Some((i, 0.0));
                                }
                            }
                        }
                    }
                }
            }
            let reach = ring as f64 * self.cell;
            if best.is_some() && best_d2 <= reach * reach {
                break;
            }
        }
        best.map(|(i, _)| (i, best_d2.sqrt()))
    }
}
