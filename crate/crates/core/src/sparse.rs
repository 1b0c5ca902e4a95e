//! Block-structured sparse matrices.
//!
//! Clusters of kept weights are stored as dense rectangles with one header
//! each; isolated nonzeros fall back to coordinate triples. The `.tvbs`
//! container (little-endian):
//!
//! ```text
//! "TVBS" | version u32 | K u32 | M u32 | P u32
//! P × (r0, c0, h, w) u32
//! concatenated block payloads, row-major f64
//! residual count u32 | (r u32, c u32, value f64) per entry
//! ```

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{domain, format, Result};
use crate::prior::SupportMatrix;

pub const TVBS_MAGIC: &[u8; 4] = b"TVBS";
const VERSION: u32 = 1;
const INDEX_BYTES: usize = 4;
const REAL_BYTES: usize = 8;

/// Dense rectangle `[r0, r0+h) × [c0, c0+w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
    /// `h·w` values, row-major.
    pub payload: Vec<f64>,
}

/// Axis-aligned rectangle without payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r0 + self.h && c >= self.c0 && c < self.c0 + self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseMatrix {
    rows: usize,
    cols: usize,
    blocks: Vec<Block>,
    residual: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

/// Index and payload counts of a stored matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageCost {
    pub index_ints: usize,
    pub payload_reals: usize,
    /// 32-bit indices, 64-bit reals.
    pub bytes: usize,
}

impl StorageCost {
    fn new(index_ints: usize, payload_reals: usize) -> Self {
        Self { index_ints, payload_reals, bytes: index_ints * INDEX_BYTES + payload_reals * REAL_BYTES }
    }
}

/// COO index integers over block-format index integers.
pub fn index_coding_gain(coo: &StorageCost, block: &StorageCost) -> f64 {
    coo.index_ints as f64 / block.index_ints as f64
}

/// Greedy cover of `mask` by all-ones rectangles with both sides at least
/// `min_side`: repeatedly take the largest such rectangle (ties: topmost,
/// then leftmost, then wider) and clear it. Ones left over are returned in
/// row-major order.
pub fn extract_blocks(mask: &SupportMatrix, min_side: usize) -> Result<(Vec<Rect>, Vec<(usize, usize)>)> {
    if min_side == 0 {
        return domain("min_side must be at least 1");
    }
    let (rows, cols) = mask.dims();
    let mut live: Vec<bool> = mask.as_slice().iter().map(|&s| s != 0).collect();
    let mut rects = Vec::new();
    while let Some(r) = largest_rect(&live, rows, cols, min_side) {
        for i in r.r0..r.r0 + r.h {
            live[i * cols + r.c0..i * cols + r.c0 + r.w].iter_mut().for_each(|v| *v = false);
        }
        rects.push(r);
    }
    let residual = (0..rows * cols).filter(|&n| live[n]).map(|n| (n / cols, n % cols)).collect();
    Ok((rects, residual))
}

fn largest_rect(live: &[bool], rows: usize, cols: usize, min_side: usize) -> Option<Rect> {
    // down[n]: consecutive ones from n downwards.
    let mut down = vec![0usize; rows * cols];
    for i in (0..rows).rev() {
        for j in 0..cols {
            let n = i * cols + j;
            if live[n] {
                down[n] = 1 + if i + 1 < rows { down[n + cols] } else { 0 };
            }
        }
    }
    let mut best: Option<Rect> = None;
    for r0 in 0..rows {
        for c0 in 0..cols {
            let mut h = usize::MAX;
            for c in c0..cols {
                h = h.min(down[r0 * cols + c]);
                if h < min_side {
                    break;
                }
                let w = c - c0 + 1;
                if w < min_side {
                    continue;
                }
                let area = h * w;
                // Raster order already favors topmost/leftmost on ties;
                // same-origin ties go to the wider candidate.
                let better = match best {
                    None => true,
                    Some(b) => area > b.area() || (area == b.area() && b.r0 == r0 && b.c0 == c0 && w > b.w),
                };
                if better {
                    best = Some(Rect { r0, c0, h, w });
                }
            }
        }
    }
    best
}

impl CooMatrix {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| (e.0, e.1));
        for pair in entries.windows(2) {
            if (pair[0].0, pair[0].1) == (pair[1].0, pair[1].1) {
                return domain(format!("duplicate coordinate ({}, {})", pair[0].0, pair[0].1));
            }
        }
        if entries.iter().any(|e| e.0 >= rows || e.1 >= cols) {
            return domain("coordinate out of bounds");
        }
        Ok(Self { rows, cols, entries })
    }

    /// Entries of `dense` where `mask` is one.
    pub fn from_masked(dense: &[f64], mask: &SupportMatrix) -> Result<Self> {
        let (rows, cols) = mask.dims();
        check_dense(dense, rows, cols)?;
        let entries = (0..rows * cols).filter(|&n| mask.as_slice()[n] != 0).map(|n| (n / cols, n % cols, dense[n])).collect();
        Ok(Self { rows, cols, entries })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn storage_cost(&self) -> StorageCost {
        StorageCost::new(2 * self.entries.len(), self.entries.len())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for &(r, c, v) in &self.entries {
            out[r * self.cols + c] = v;
        }
        out
    }

    /// `self · x` with `x` of shape `cols × n`.
    pub fn spmm(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.spmm_counted(x, n)?.0)
    }

    /// As [`CooMatrix::spmm`], also returning `(multiply-adds, index ints read)`.
    pub fn spmm_counted(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, OpCount)> {
        check_rhs(x, self.cols, n)?;
        let mut out = vec![0.0; self.rows * n];
        let mut ops = OpCount::default();
        for &(r, c, v) in &self.entries {
            ops.index_reads += 2;
            let xr = &x[c * n..(c + 1) * n];
            let or = &mut out[r * n..(r + 1) * n];
            for (o, xv) in or.iter_mut().zip(xr) {
                *o += v * xv;
            }
            ops.madds += n as u64;
        }
        Ok((out, ops))
    }
}

/// Work counters of an instrumented multiply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCount {
    pub madds: u64,
    pub index_reads: u64,
}

fn check_dense(dense: &[f64], rows: usize, cols: usize) -> Result<()> {
    if dense.len() != rows * cols {
        return domain(format!("dense buffer has {} entries, expected {rows}x{cols}", dense.len()));
    }
    Ok(())
}

fn check_rhs(x: &[f64], inner: usize, n: usize) -> Result<()> {
    if x.len() != inner * n {
        return domain(format!("right operand has {} entries, expected {inner}x{n}", x.len()));
    }
    Ok(())
}

/// Reference dense `a (r×k) · b (k×c)`.
pub fn dense_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Result<(Vec<f64>, OpCount)> {
    check_dense(a, r, k)?;
    check_rhs(b, k, c)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for t in 0..k {
            let av = a[i * k + t];
            let br = &b[t * c..(t + 1) * c];
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok((out, OpCount { madds: (r * k * c) as u64, index_reads: 0 }))
}

impl BlockSparseMatrix {
    /// Validates bounds, payload lengths, block disjointness and residual
    /// uniqueness.
    pub fn new(rows: usize, cols: usize, blocks: Vec<Block>, residual: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut taken = vec![false; rows * cols];
        for b in &blocks {
            if b.h == 0 || b.w == 0 || b.r0 + b.h > rows || b.c0 + b.w > cols {
                return domain(format!("block at ({}, {}) of {}x{} exceeds {rows}x{cols}", b.r0, b.c0, b.h, b.w));
            }
            if b.payload.len() != b.h * b.w {
                return domain("block payload length differs from h*w");
            }
            for i in b.r0..b.r0 + b.h {
                for j in b.c0..b.c0 + b.w {
                    if std::mem::replace(&mut taken[i * cols + j], true) {
                        return domain(format!("blocks overlap at ({i}, {j})"));
                    }
                }
            }
        }
        for &(r, c, _) in &residual {
            if r >= rows || c >= cols {
                return domain(format!("residual entry ({r}, {c}) out of bounds"));
            }
            if std::mem::replace(&mut taken[r * cols + c], true) {
                return domain(format!("residual entry ({r}, {c}) duplicates a stored entry"));
            }
        }
        Ok(Self { rows, cols, blocks, residual })
    }

    /// Stores `dense ∘ mask`, with clusters found by [`extract_blocks`].
    pub fn encode(dense: &[f64], mask: &SupportMatrix, min_side: usize) -> Result<Self> {
        let (rows, cols) = mask.dims();
        check_dense(dense, rows, cols)?;
        let (rects, rest) = extract_blocks(mask, min_side)?;
        let blocks = rects
            .into_iter()
            .map(|r| {
                let payload =
                    (r.r0..r.r0 + r.h).flat_map(|i| dense[i * cols + r.c0..i * cols + r.c0 + r.w].iter().copied()).collect();
                Block { r0: r.r0, c0: r.c0, h: r.h, w: r.w, payload }
            })
            .collect();
        let residual = rest.into_iter().map(|(r, c)| (r, c, dense[r * cols + c])).collect();
        Ok(Self { rows, cols, blocks, residual })
    }

    pub fn decode(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for b in &self.blocks {
            for i in 0..b.h {
                let dst = (b.r0 + i) * self.cols + b.c0;
                out[dst..dst + b.w].copy_from_slice(&b.payload[i * b.w..(i + 1) * b.w]);
            }
        }
        for &(r, c, v) in &self.residual {
            out[r * self.cols + c] = v;
        }
        out
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn residual(&self) -> &[(usize, usize, f64)] {
        &self.residual
    }

    /// Number of stored entries (block payload plus residual).
    pub fn stored(&self) -> usize {
        self.blocks.iter().map(|b| b.payload.len()).sum::<usize>() + self.residual.len()
    }

    /// Stored positions as a support matrix.
    pub fn support(&self) -> SupportMatrix {
        let mut m = SupportMatrix::zeros(self.rows, self.cols);
        for b in &self.blocks {
            let r = Rect { r0: b.r0, c0: b.c0, h: b.h, w: b.w };
            for i in r.r0..r.r0 + r.h {
                for j in r.c0..r.c0 + r.w {
                    debug_assert!(r.contains(i, j));
                    m.set(i, j, true);
                }
            }
        }
        for &(r, c, _) in &self.residual {
            m.set(r, c, true);
        }
        m
    }

    /// Four header integers per block plus two per residual entry.
    pub fn storage_cost(&self) -> StorageCost {
        StorageCost::new(4 * self.blocks.len() + 2 * self.residual.len(), self.stored())
    }

    /// `self · x` with `x` of shape `cols × n`.
    pub fn spmm(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.spmm_counted(x, n)?.0)
    }

    /// As [`BlockSparseMatrix::spmm`], also returning work counters. Only
    /// stored entries are touched.
    pub fn spmm_counted(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, OpCount)> {
        check_rhs(x, self.cols, n)?;
        let mut out = vec![0.0; self.rows * n];
        let mut ops = OpCount::default();
        for b in &self.blocks {
            ops.index_reads += 4;
            for i in 0..b.h {
                let or = &mut out[(b.r0 + i) * n..(b.r0 + i + 1) * n];
                for t in 0..b.w {
                    let v = b.payload[i * b.w + t];
                    let xr = &x[(b.c0 + t) * n..(b.c0 + t + 1) * n];
                    for (o, xv) in or.iter_mut().zip(xr) {
                        *o += v * xv;
                    }
                }
            }
            ops.madds += (b.h * b.w * n) as u64;
        }
        for &(r, c, v) in &self.residual {
            ops.index_reads += 2;
            let xr = &x[c * n..(c + 1) * n];
            for (o, xv) in out[r * n..(r + 1) * n].iter_mut().zip(xr) {
                *o += v * xv;
            }
            ops.madds += n as u64;
        }
        Ok((out, ops))
    }

    /// `x · self` with `x` of shape `n × rows`; the layer forward pass.
    pub fn lmul(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.rows {
            return domain(format!("left operand has {} entries, expected {n}x{}", x.len(), self.rows));
        }
        let mut out = vec![0.0; n * self.cols];
        for s in 0..n {
            let xr = &x[s * self.rows..(s + 1) * self.rows];
            let or = &mut out[s * self.cols..(s + 1) * self.cols];
            for b in &self.blocks {
                for i in 0..b.h {
                    let xv = xr[b.r0 + i];
                    for (o, v) in or[b.c0..b.c0 + b.w].iter_mut().zip(&b.payload[i * b.w..(i + 1) * b.w]) {
                        *o += xv * v;
                    }
                }
            }
            for &(r, c, v) in &self.residual {
                or[c] += xr[r] * v;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 16 * self.blocks.len() + 8 * self.stored() + 4);
        out.extend_from_slice(TVBS_MAGIC);
        for v in [VERSION, self.rows as u32, self.cols as u32, self.blocks.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for b in &self.blocks {
            for v in [b.r0, b.c0, b.h, b.w] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        for b in &self.blocks {
            for v in &b.payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.residual.len() as u32).to_le_bytes());
        for &(r, c, v) in &self.residual {
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4)? != TVBS_MAGIC {
            return format("bad magic, expected TVBS");
        }
        let version = cur.u32()?;
        if version != VERSION {
            return format(format!("unsupported tvbs version {version}"));
        }
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let p = cur.u32()? as usize;
        let mut headers = Vec::with_capacity(p.min(1 << 16));
        for _ in 0..p {
            headers.push((cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize));
        }
        let mut blocks = Vec::with_capacity(headers.len());
        for (r0, c0, h, w) in headers {
            let len = h.checked_mul(w).ok_or_else(|| crate::Error::Format("block size overflow".into()))?;
            let payload = (0..len).map(|_| cur.f64()).collect::<Result<_>>()?;
            blocks.push(Block { r0, c0, h, w, payload });
        }
        let n_res = cur.u32()? as usize;
        let mut residual = Vec::with_capacity(n_res.min(1 << 16));
        for _ in 0..n_res {
            residual.push((cur.u32()? as usize, cur.u32()? as usize, cur.f64()?));
        }
        if cur.pos != bytes.len() {
            return format(format!("{} trailing bytes in tvbs container", bytes.len() - cur.pos));
        }
        Self::new(rows, cols, blocks, residual).map_err(|e| crate::Error::Format(e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format(format!("truncated tvbs container at offset {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One line of the benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub format: String,
    pub wall_ns_median: u64,
    pub madds: u64,
    pub index_ints: u64,
}

pub const BENCH_CSV_HEADER: &str = "format,wall_ns_median,madds,index_ints";

/// Times `W · x` in dense, COO and block formats. Wall times are medians
/// over `repeats` runs; operation counts are exact.
pub fn bench(bsm: &BlockSparseMatrix, x: &[f64], n: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return domain("bench needs at least one repeat");
    }
    let (rows, cols) = bsm.dims();
    let dense = bsm.decode();
    let coo = CooMatrix::from_masked(&dense, &bsm.support())?;

    let time = |f: &mut dyn FnMut() -> Result<OpCount>| -> Result<(u64, OpCount)> {
        let mut samples = Vec::with_capacity(repeats);
        let mut ops = OpCount::default();
        for _ in 0..repeats {
            let t = Instant::now();
            ops = f()?;
            samples.push(t.elapsed().as_nanos() as u64);
        }
        samples.sort_unstable();
        Ok((samples[samples.len() / 2], ops))
    };

    let (t_dense, o_dense) = time(&mut || dense_matmul(&dense, x, rows, cols, n).map(|r| std::hint::black_box(r).1))?;
    let (t_coo, o_coo) = time(&mut || coo.spmm_counted(x, n).map(|r| std::hint::black_box(r).1))?;
    let (t_blk, o_blk) = time(&mut || bsm.spmm_counted(x, n).map(|r| std::hint::black_box(r).1))?;
    Ok(vec![
        BenchRow { format: "dense".into(), wall_ns_median: t_dense, madds: o_dense.madds, index_ints: 0 },
        BenchRow { format: "coo".into(), wall_ns_median: t_coo, madds: o_coo.madds, index_ints: o_coo.index_reads },
        BenchRow { format: "block".into(), wall_ns_median: t_blk, madds: o_blk.madds, index_ints: o_blk.index_reads },
    ])
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.format, r.wall_ns_median, r.madds, r.index_ints));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rects_mask(rows: usize, cols: usize, rects: &[Rect]) -> SupportMatrix {
        SupportMatrix::from_fn(rows, cols, |i, j| rects.iter().any(|r| r.contains(i, j)))
    }

    #[test]
    fn extract_trivial_masks() {
        let (b, r) = extract_blocks(&SupportMatrix::ones(5, 7), 3).unwrap();
        assert_eq!(b, vec![Rect { r0: 0, c0: 0, h: 5, w: 7 }]);
        assert!(r.is_empty());
        let (b, r) = extract_blocks(&SupportMatrix::zeros(5, 7), 3).unwrap();
        assert!(b.is_empty() && r.is_empty());
        assert!(extract_blocks(&SupportMatrix::zeros(2, 2), 0).is_err());
    }

    #[test]
    fn extract_two_diagonal_blocks() {
        let want = [Rect { r0: 0, c0: 0, h: 3, w: 3 }, Rect { r0: 3, c0: 3, h: 3, w: 3 }];
        let (b, r) = extract_blocks(&rects_mask(6, 6, &want), 3).unwrap();
        assert_eq!(b, want);
        assert!(r.is_empty());
    }

    #[test]
    fn extract_tie_breaks() {
        // Two disjoint 3x3 squares of equal area: the upper one goes first.
        let m = rects_mask(8, 8, &[Rect { r0: 4, c0: 0, h: 3, w: 3 }, Rect { r0: 0, c0: 5, h: 3, w: 3 }]);
        let (b, _) = extract_blocks(&m, 3).unwrap();
        assert_eq!(b[0], Rect { r0: 0, c0: 5, h: 3, w: 3 });
        // Same origin, 4x3 and 3x4 overlap in an L-shape of a 4x4 minus a
        // corner: the wider candidate wins.
        let m = SupportMatrix::from_fn(4, 4, |i, j| !(i == 3 && j == 3));
        let (b, r) = extract_blocks(&m, 3).unwrap();
        assert_eq!(b[0], Rect { r0: 0, c0: 0, h: 3, w: 4 });
        assert_eq!(r, vec![(3, 0), (3, 1), (3, 2)]);
    }

    #[test]
    fn blocks_and_residual_partition_the_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = SupportMatrix::from_fn(12, 10, |_, _| rng.random_bool(0.7));
            let (blocks, residual) = extract_blocks(&m, 2).unwrap();
            let mut cover = SupportMatrix::zeros(12, 10);
            for b in &blocks {
                assert!(b.h >= 2 && b.w >= 2);
                for i in b.r0..b.r0 + b.h {
                    for j in b.c0..b.c0 + b.w {
                        assert!(m.get(i, j) && !cover.get(i, j));
                        cover.set(i, j, true);
                    }
                }
            }
            for &(i, j) in &residual {
                assert!(!cover.get(i, j));
                cover.set(i, j, true);
            }
            assert_eq!(cover, m);
        }
    }

    #[test]
    fn storage_cost_cases() {
        let rects: Vec<Rect> = (0..4).map(|k| Rect { r0: 8 * k, c0: 8 * k, h: 3, w: 3 }).collect();
        let mask = rects_mask(32, 32, &rects);
        let dense = vec![1.5; 32 * 32];
        let bsm = BlockSparseMatrix::encode(&dense, &mask, 3).unwrap();
        let coo = CooMatrix::from_masked(&dense, &mask).unwrap();
        assert_eq!(bsm.blocks().len(), 4);
        assert_eq!(coo.storage_cost().index_ints, 72);
        assert_eq!(bsm.storage_cost().index_ints, 16);
        assert_eq!(index_coding_gain(&coo.storage_cost(), &bsm.storage_cost()), 4.5);
        assert_eq!(bsm.storage_cost().bytes, 16 * 4 + 36 * 8);

        let single = SupportMatrix::from_fn(32, 32, |i, j| i == 5 && j == 9);
        let bsm = BlockSparseMatrix::encode(&dense, &single, 3).unwrap();
        let coo = CooMatrix::from_masked(&dense, &single).unwrap();
        assert_eq!(index_coding_gain(&coo.storage_cost(), &bsm.storage_cost()), 1.0);
    }

    #[test]
    fn round_trip_and_container() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dense: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = SupportMatrix::from_fn(32, 32, |i, j| (i / 4 + j / 5) % 2 == 0 || rng.random_bool(0.1));
        let bsm = BlockSparseMatrix::encode(&dense, &mask, 3).unwrap();
        let want: Vec<f64> = dense.iter().zip(mask.as_slice()).map(|(v, &s)| if s == 1 { *v } else { 0.0 }).collect();
        assert_eq!(bsm.decode().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), want.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let back = BlockSparseMatrix::from_bytes(&bsm.to_bytes()).unwrap();
        assert_eq!(back, bsm);

        let empty = BlockSparseMatrix::encode(&dense, &SupportMatrix::zeros(32, 32), 3).unwrap();
        assert!(empty.decode().iter().all(|&v| v == 0.0));
        assert_eq!(empty.to_bytes().len(), 24);
    }

    #[test]
    fn container_rejects_malformed_bytes() {
        let bsm = BlockSparseMatrix::encode(&[1.0; 16], &SupportMatrix::ones(4, 4), 3).unwrap();
        let bytes = bsm.to_bytes();
        assert!(matches!(BlockSparseMatrix::from_bytes(&bytes[..bytes.len() - 1]), Err(crate::Error::Format(_))));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(BlockSparseMatrix::from_bytes(&bad), Err(crate::Error::Format(_))));
        // Block header pointing outside the matrix.
        let mut oob = bytes.clone();
        oob[20..24].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(BlockSparseMatrix::from_bytes(&oob), Err(crate::Error::Format(_))));
    }

    #[test]
    fn multiply_cases() {
        let n = 5;
        let mut eye = vec![0.0; 36];
        (0..6).for_each(|i| eye[i * 6 + i] = 1.0);
        let one_block = BlockSparseMatrix::new(6, 6, vec![Block { r0: 0, c0: 0, h: 6, w: 6, payload: eye }], vec![]).unwrap();
        let x: Vec<f64> = (0..30).map(|v| v as f64 * 0.25).collect();
        assert_eq!(one_block.spmm(&x, n).unwrap(), x);

        let empty = BlockSparseMatrix::new(6, 6, vec![], vec![]).unwrap();
        assert!(empty.spmm(&x, n).unwrap().iter().all(|&v| v == 0.0));
        assert!(empty.spmm(&x[..29], n).is_err());
    }

    #[test]
    fn lmul_matches_decoded_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dense: Vec<f64> = (0..10 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = SupportMatrix::from_fn(10, 7, |i, j| (i < 5 && j < 4) || rng.random_bool(0.2));
        let bsm = BlockSparseMatrix::encode(&dense, &mask, 3).unwrap();
        let x: Vec<f64> = (0..3 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = bsm.lmul(&x, 3).unwrap();
        let (want, _) = dense_matmul(&x, &bsm.decode(), 3, 10, 7).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bench_counts() {
        let mask = SupportMatrix::from_fn(12, 12, |i, j| i < 6 && j < 6);
        let bsm = BlockSparseMatrix::encode(&[2.0; 144], &mask, 3).unwrap();
        let x = vec![1.0; 12 * 4];
        let rows = bench(&bsm, &x, 4, 3).unwrap();
        assert_eq!(rows[0].madds, 12 * 12 * 4);
        assert_eq!(rows[2].madds, 36 * 4);
        assert_eq!(rows[1].madds, 36 * 4);
        assert_eq!((rows[1].index_ints, rows[2].index_ints), (72, 4));
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("format,wall_ns_median,madds,index_ints\ndense,"));
        assert!(bench(&bsm, &x, 4, 0).is_err());
    }
}
