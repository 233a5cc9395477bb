/// Sparse row-mixing table: output row `r` is `sum_j w_j * src[s_j]`.
///
/// Bilinear warps, trilinear lookups, neighbour averaging and row
/// permutations all reduce to this one linear operator.
#[derive(Clone, Debug, Default)]
pub struct GatherTable {
    offsets: Vec<usize>,
    sources: Vec<u32>,
    weights: Vec<f64>,
    src_rows: usize,
}

impl GatherTable {
    pub fn new(src_rows: usize) -> Self {
        GatherTable {
            offsets: vec![0],
            sources: Vec::new(),
            weights: Vec::new(),
            src_rows,
        }
    }

    /// Appends one output row. Panics if a source index is out of range.
    pub fn push_row(&mut self, taps: &[(usize, f64)]) {
        for &(s, w) in taps {
            assert!(s < self.src_rows, "gather source {s} >= {}", self.src_rows);
            self.sources.push(s as u32);
            self.weights.push(w);
        }
        self.offsets.push(self.sources.len());
    }

    /// A row with no taps evaluates to zero.
    pub fn push_empty(&mut self) {
        self.offsets.push(self.sources.len());
    }

    pub fn permutation(perm: &[usize]) -> Self {
        let mut t = GatherTable::new(perm.len());
        for &p in perm {
            t.push_row(&[(p, 1.0)]);
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        self.sources[a..b]
            .iter()
            .zip(&self.weights[a..b])
            .map(|(&s, &w)| (s as usize, w))
    }

    pub(crate) fn apply(&self, src: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows() * width];
        for r in 0..self.rows() {
            let dst = &mut out[r * width..(r + 1) * width];
            for (s, w) in self.row(r) {
                let row = &src[s * width..(s + 1) * width];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
        out
    }

    pub(crate) fn apply_transpose(&self, grad: &[f64], width: usize, into: &mut [f64]) {
        for r in 0..self.rows() {
            let g = &grad[r * width..(r + 1) * width];
            for (s, w) in self.row(r) {
                let dst = &mut into[s * width..(s + 1) * width];
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
    }
}
