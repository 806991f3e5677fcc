//! Bit-packed Hamming index, exact top-k scan, and retrieval metrics.
//!
//! Code file layout (`CIBC`, little-endian):
//! ```text
//! magic "CIBC", u32 version=1, u64 n, u32 bits,
//! n * ceil(bits/64) u64 words (bit d of a code sits in word d/64 at
//! position d%64; padding bits are zero)
//! ```

use std::collections::BinaryHeap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::binarizer::DeterministicCode;
use crate::dataio::{usize_product, Reader};
use crate::error::{Error, Result};
use crate::dataio::LabelSet;

pub const CODE_MAGIC: [u8; 4] = *b"CIBC";
pub const CODE_VERSION: u32 = 1;

/// Maximum supported code width in bits.
pub const MAX_BITS: usize = 4096;

/// Hash codes packed 64 bits to a word for popcount-based distances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl PackedCodes {
    /// Pack unpacked 0/1 codes. Lossless: `unpack(pack(x)) == x`.
    pub fn pack(codes: &DeterministicCode) -> Self {
        let bits = codes.width();
        assert!((1..=MAX_BITS).contains(&bits), "unsupported code width {}", bits);
        let wpc = bits.div_ceil(64);
        let mut words = vec![0u64; codes.len() * wpc];
        for i in 0..codes.len() {
            let row = &mut words[i * wpc..(i + 1) * wpc];
            for d in 0..bits {
                if codes.get(i, d) {
                    row[d / 64] |= 1u64 << (d % 64);
                }
            }
        }
        Self {
            n: codes.len(),
            bits,
            words_per_code: wpc,
            words,
        }
    }

    /// Rebuild from raw words, validating lengths and zero padding.
    pub fn from_words(n: usize, bits: usize, words: Vec<u64>) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::Malformed(format!("unsupported code width {}", bits)));
        }
        let wpc = bits.div_ceil(64);
        if words.len() != n * wpc {
            return Err(Error::Malformed(format!(
                "expected {} words for {} codes of {} bits, got {}",
                n * wpc,
                n,
                bits,
                words.len()
            )));
        }
        if !bits.is_multiple_of(64) {
            let pad_mask = !0u64 << (bits % 64);
            for i in 0..n {
                if words[i * wpc + wpc - 1] & pad_mask != 0 {
                    return Err(Error::Malformed(format!(
                        "code {} has non-zero padding bits",
                        i
                    )));
                }
            }
        }
        Ok(Self {
            n,
            bits,
            words_per_code: wpc,
            words,
        })
    }

    pub fn unpack(&self) -> DeterministicCode {
        let mut bits = vec![0u8; self.n * self.bits];
        for i in 0..self.n {
            let row = self.row(i);
            for d in 0..self.bits {
                bits[i * self.bits + d] = ((row[d / 64] >> (d % 64)) & 1) as u8;
            }
        }
        DeterministicCode::from_bits(self.n, self.bits, bits)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Code width in bits.
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    /// Hamming distance between row `i` of `self` and row `j` of `other`.
    pub fn distance(&self, i: usize, other: &PackedCodes, j: usize) -> Result<u32> {
        if self.bits != other.bits {
            return Err(Error::WidthMismatch {
                left: self.bits,
                right: other.bits,
            });
        }
        Ok(hamming_unchecked(self.row(i), other.row(j)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(20 + self.words.len() * 8);
        out.extend_from_slice(&CODE_MAGIC);
        out.extend_from_slice(&CODE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.bits as u32).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut r = Reader::new(&buf);
        r.magic(CODE_MAGIC)?;
        r.version("code")?;
        let n = r.u64("code count")?;
        let bits = r.u32("code width")? as usize;
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::Malformed(format!("unsupported code width {}", bits)));
        }
        let wpc = bits.div_ceil(64) as u64;
        let count = usize_product(n, wpc, "code words")?;
        r.need(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::DimensionOverflow(format!("{} code words", count)))?,
            "code words",
        )?;
        let mut words = Vec::with_capacity(count);
        for _ in 0..count {
            words.push(r.u64("code word")?);
        }
        r.finish_exact("code file")?;
        Self::from_words(n as usize, bits, words)
    }
}

#[inline]
fn hamming_unchecked(a: &[u64], b: &[u64]) -> u32 {
    let mut acc = 0u32;
    for (&x, &y) in a.iter().zip(b) {
        acc += (x ^ y).count_ones();
    }
    acc
}

/// Hamming distance between two packed rows of the same word width.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::WidthMismatch {
            left: a.len() * 64,
            right: b.len() * 64,
        });
    }
    Ok(hamming_unchecked(a, b))
}

/// One retrieval hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedEntry {
    pub index: usize,
    pub distance: u32,
}

/// Hits ordered by ascending distance, ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Exact top-k scan of `db` for one packed query row. `k > n` returns all
/// `n` items.
pub fn topk(db: &PackedCodes, query: &[u64], k: usize) -> Result<RankedList> {
    assert!(k >= 1, "k must be >= 1");
    if query.len() != db.words_per_code {
        return Err(Error::WidthMismatch {
            left: query.len() * 64,
            right: db.words_per_code * 64,
        });
    }
    // Bounded max-heap over (distance, index); the lexicographic tuple order
    // implements the tie rule.
    let mut heap: BinaryHeap<(u32, usize)> = BinaryHeap::with_capacity(k + 1);
    for i in 0..db.n {
        let d = hamming_unchecked(query, db.row(i));
        if heap.len() < k {
            heap.push((d, i));
        } else if let Some(&worst) = heap.peek() {
            if (d, i) < worst {
                heap.pop();
                heap.push((d, i));
            }
        }
    }
    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|(distance, index)| RankedEntry { index, distance })
        .collect();
    Ok(RankedList { entries })
}

/// Top-k for every row of `queries`, sequentially.
pub fn topk_batch(db: &PackedCodes, queries: &PackedCodes, k: usize) -> Result<Vec<RankedList>> {
    check_same_width(db, queries)?;
    (0..queries.n).map(|q| topk(db, queries.row(q), k)).collect()
}

/// Same as [`topk_batch`] but scanning queries in parallel. Each per-query
/// scan is sequential, so the output is bitwise identical.
pub fn topk_batch_parallel(
    db: &PackedCodes,
    queries: &PackedCodes,
    k: usize,
) -> Result<Vec<RankedList>> {
    check_same_width(db, queries)?;
    (0..queries.n)
        .into_par_iter()
        .map(|q| topk(db, queries.row(q), k))
        .collect()
}

fn check_same_width(db: &PackedCodes, queries: &PackedCodes) -> Result<()> {
    if db.bits != queries.bits {
        return Err(Error::WidthMismatch {
            left: queries.bits,
            right: db.bits,
        });
    }
    Ok(())
}

/// Label-comparison mode for relevance judgments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relevance {
    /// Relevant iff the single class ids are equal. Items must carry exactly
    /// one label.
    Single,
    /// Relevant iff the label sets intersect.
    Multi,
}

fn is_relevant(
    qlabels: &LabelSet,
    q: usize,
    dblabels: &LabelSet,
    d: usize,
    mode: Relevance,
) -> bool {
    match mode {
        Relevance::Single => {
            let qc = qlabels
                .single_class(q)
                .expect("single relevance requires exactly one label per query");
            let dc = dblabels
                .single_class(d)
                .expect("single relevance requires exactly one label per item");
            qc == dc
        }
        Relevance::Multi => qlabels.intersects(q, dblabels, d),
    }
}

fn check_metric_inputs(
    queries: &PackedCodes,
    db: &PackedCodes,
    qlabels: &LabelSet,
    dblabels: &LabelSet,
) -> Result<()> {
    check_same_width(db, queries)?;
    if qlabels.len() != queries.n {
        return Err(Error::Malformed(format!(
            "query labels ({}) do not match query codes ({})",
            qlabels.len(),
            queries.n
        )));
    }
    if dblabels.len() != db.n {
        return Err(Error::Malformed(format!(
            "database labels ({}) do not match database codes ({})",
            dblabels.len(),
            db.n
        )));
    }
    if queries.n == 0 || db.n == 0 {
        return Err(Error::Malformed("empty query or database set".into()));
    }
    Ok(())
}

/// Mean average precision over the top `n` ranked items.
///
/// `AP@n = (Σ_{k<=n} rel(k) · Precision@k) / (#relevant retrieved in top n)`,
/// and 0 when nothing relevant is retrieved.
pub fn map_at_n(
    queries: &PackedCodes,
    db: &PackedCodes,
    qlabels: &LabelSet,
    dblabels: &LabelSet,
    n: usize,
    mode: Relevance,
) -> Result<f64> {
    assert!(n >= 1, "n must be >= 1");
    check_metric_inputs(queries, db, qlabels, dblabels)?;
    let mut sum = 0.0;
    for q in 0..queries.n {
        let ranked = topk(db, queries.row(q), n)?;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, e) in ranked.entries().iter().enumerate() {
            if is_relevant(qlabels, q, dblabels, e.index, mode) {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        if hits > 0 {
            sum += ap / hits as f64;
        }
    }
    Ok(sum / queries.n as f64)
}

/// Mean fraction of relevant items among the top `n`.
pub fn precision_at_n(
    queries: &PackedCodes,
    db: &PackedCodes,
    qlabels: &LabelSet,
    dblabels: &LabelSet,
    n: usize,
    mode: Relevance,
) -> Result<f64> {
    assert!(n >= 1, "n must be >= 1");
    check_metric_inputs(queries, db, qlabels, dblabels)?;
    let mut sum = 0.0;
    for q in 0..queries.n {
        let ranked = topk(db, queries.row(q), n)?;
        let hits = ranked
            .entries()
            .iter()
            .filter(|e| is_relevant(qlabels, q, dblabels, e.index, mode))
            .count();
        sum += hits as f64 / n as f64;
    }
    Ok(sum / queries.n as f64)
}

/// One point of a hash-lookup precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PrPoint {
    pub radius: u32,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall of the retrieval sets `{items at distance <= r}` for
/// every radius `r in 0..=bits`, averaged over queries.
///
/// An empty retrieval set counts as precision 1 (the conventional curve
/// corner). Queries with no relevant database item are skipped.
pub fn pr_curve(
    queries: &PackedCodes,
    db: &PackedCodes,
    qlabels: &LabelSet,
    dblabels: &LabelSet,
    mode: Relevance,
) -> Result<Vec<PrPoint>> {
    check_metric_inputs(queries, db, qlabels, dblabels)?;
    let bits = db.bits;
    let mut precision_sum = vec![0.0; bits + 1];
    let mut recall_sum = vec![0.0; bits + 1];
    let mut counted = 0usize;

    for q in 0..queries.n {
        // Histogram distances once per query, then prefix-sum per radius.
        let mut total_at = vec![0u32; bits + 1];
        let mut rel_at = vec![0u32; bits + 1];
        for i in 0..db.n {
            let d = hamming_unchecked(queries.row(q), db.row(i)) as usize;
            total_at[d] += 1;
            if is_relevant(qlabels, q, dblabels, i, mode) {
                rel_at[d] += 1;
            }
        }
        let total_relevant: u32 = rel_at.iter().sum();
        if total_relevant == 0 {
            continue;
        }
        counted += 1;
        let mut cum_total = 0u32;
        let mut cum_rel = 0u32;
        for r in 0..=bits {
            cum_total += total_at[r];
            cum_rel += rel_at[r];
            let precision = if cum_total == 0 {
                1.0
            } else {
                cum_rel as f64 / cum_total as f64
            };
            precision_sum[r] += precision;
            recall_sum[r] += cum_rel as f64 / total_relevant as f64;
        }
    }
    if counted == 0 {
        return Err(Error::Malformed(
            "no query has a relevant database item".into(),
        ));
    }
    Ok((0..=bits)
        .map(|r| PrPoint {
            radius: r as u32,
            recall: recall_sum[r] / counted as f64,
            precision: precision_sum[r] / counted as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::rng_for;
    use rand::Rng;

    fn random_codes(n: usize, bits: usize, seed: u64) -> DeterministicCode {
        let mut rng = rng_for(seed, &[41]);
        let data: Vec<u8> = (0..n * bits).map(|_| rng.gen::<bool>() as u8).collect();
        DeterministicCode::from_bits(n, bits, data)
    }

    #[test]
    fn pack_single_bit() {
        let code = DeterministicCode::from_bits(1, 1, vec![1]);
        let packed = PackedCodes::pack(&code);
        assert_eq!(packed.row(0), &[0x1]);

        let zeros = DeterministicCode::from_bits(3, 5, vec![0; 15]);
        let packed = PackedCodes::pack(&zeros);
        assert!(packed.words.iter().all(|&w| w == 0));
    }

    #[test]
    fn pack_round_trips_across_word_boundary() {
        let code = random_codes(64, 77, 1);
        let packed = PackedCodes::pack(&code);
        assert_eq!(packed.unpack(), code);
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        let code = random_codes(4, 70, 2);
        let packed = PackedCodes::pack(&code);
        let mut words = packed.words.clone();
        words[1] |= 1u64 << 63; // bit 127 > width 70
        assert!(matches!(
            PackedCodes::from_words(4, 70, words),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn hamming_examples_and_oracle() {
        assert_eq!(hamming(&[0b1010], &[0b1010]).unwrap(), 0);
        assert_eq!(hamming(&[0b1010], &[0b0110]).unwrap(), 2);
        assert!(matches!(
            hamming(&[1, 2], &[1]),
            Err(Error::WidthMismatch { .. })
        ));

        // Random 128-bit pairs vs the naive per-bit loop.
        let a = random_codes(100, 128, 3);
        let b = random_codes(100, 128, 4);
        let pa = PackedCodes::pack(&a);
        let pb = PackedCodes::pack(&b);
        for i in 0..100 {
            let want: u32 = (0..128)
                .filter(|&d| a.get(i, d) != b.get(i, d))
                .count() as u32;
            assert_eq!(hamming(pa.row(i), pb.row(i)).unwrap(), want);
        }
    }

    #[test]
    fn hamming_is_a_metric() {
        // Symmetry, identity, triangle inequality on random triples.
        let codes = random_codes(300, 96, 5);
        let packed = PackedCodes::pack(&codes);
        let mut rng = rng_for(6, &[42]);
        for _ in 0..1000 {
            let (i, j, k) = (
                rng.gen_range(0..300),
                rng.gen_range(0..300),
                rng.gen_range(0..300),
            );
            let dij = packed.distance(i, &packed, j).unwrap();
            let dji = packed.distance(j, &packed, i).unwrap();
            let dii = packed.distance(i, &packed, i).unwrap();
            let djk = packed.distance(j, &packed, k).unwrap();
            let dik = packed.distance(i, &packed, k).unwrap();
            assert_eq!(dij, dji);
            assert_eq!(dii, 0);
            assert!(dik <= dij + djk);
        }
    }

    #[test]
    fn topk_finds_exact_match_first() {
        let codes = random_codes(50, 64, 7);
        let db = PackedCodes::pack(&codes);
        let hits = topk(&db, db.row(7), 3).unwrap();
        assert_eq!(hits.entries()[0].index, 7);
        assert_eq!(hits.entries()[0].distance, 0);

        // k = n returns the full sorted list.
        let full = topk(&db, db.row(7), 50).unwrap();
        assert_eq!(full.len(), 50);
        for w in full.entries().windows(2) {
            assert!(
                (w[0].distance, w[0].index) < (w[1].distance, w[1].index),
                "ordering violated"
            );
        }

        // k > n returns n items.
        assert_eq!(topk(&db, db.row(0), 999).unwrap().len(), 50);
    }

    #[test]
    fn topk_matches_brute_force_sort() {
        let codes = random_codes(1000, 64, 8);
        let db = PackedCodes::pack(&codes);
        let queries = random_codes(20, 64, 9);
        let qp = PackedCodes::pack(&queries);
        for q in 0..20 {
            let got = topk(&db, qp.row(q), 10).unwrap();
            // Full sort oracle with the same tie rule.
            let mut all: Vec<(u32, usize)> = (0..1000)
                .map(|i| (hamming_unchecked(qp.row(q), db.row(i)), i))
                .collect();
            all.sort_unstable();
            for (e, &(d, i)) in got.entries().iter().zip(all.iter().take(10)) {
                assert_eq!((e.distance, e.index), (d, i));
            }
        }
    }

    #[test]
    fn topk_invariant_under_db_permutation() {
        let codes = random_codes(64, 32, 10);
        let db = PackedCodes::pack(&codes);
        let query = PackedCodes::pack(&random_codes(1, 32, 11));

        // Reverse the database; results must agree after index remapping,
        // up to the tie rule on original indices.
        let unpacked = db.unpack();
        let reversed_bits: Vec<u8> = (0..64)
            .rev()
            .flat_map(|i| unpacked.row(i).to_vec())
            .collect();
        let reversed = PackedCodes::pack(&DeterministicCode::from_bits(64, 32, reversed_bits));

        let a = topk(&db, query.row(0), 64).unwrap();
        let b = topk(&reversed, query.row(0), 64).unwrap();
        let mut remapped: Vec<(u32, usize)> = b
            .entries()
            .iter()
            .map(|e| (e.distance, 63 - e.index))
            .collect();
        remapped.sort_unstable();
        let want: Vec<(u32, usize)> = a.entries().iter().map(|e| (e.distance, e.index)).collect();
        let mut want_sorted = want.clone();
        want_sorted.sort_unstable();
        assert_eq!(remapped, want_sorted);
    }

    #[test]
    fn parallel_scan_is_bitwise_identical() {
        let db = PackedCodes::pack(&random_codes(2000, 64, 12));
        let queries = PackedCodes::pack(&random_codes(37, 64, 13));
        let seq = topk_batch(&db, &queries, 25).unwrap();
        let par = topk_batch_parallel(&db, &queries, 25).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn ap_hand_example() {
        // Relevance pattern [1, 0, 1] in the top 3: AP = (1 + 2/3)/2 = 5/6.
        // Construct 1-bit-wide... use 4-bit codes: query 0000; db items at
        // distances 0,1,2 with labels relevant, irrelevant, relevant.
        let q = PackedCodes::pack(&DeterministicCode::from_bits(1, 4, vec![0, 0, 0, 0]));
        let db = PackedCodes::pack(&DeterministicCode::from_bits(
            3,
            4,
            vec![
                0, 0, 0, 0, // dist 0, relevant
                1, 0, 0, 0, // dist 1, irrelevant
                1, 1, 0, 0, // dist 2, relevant
            ],
        ));
        let qlabels = LabelSet::single([0]);
        let dblabels = LabelSet::single([0, 1, 0]);
        let map = map_at_n(&q, &db, &qlabels, &dblabels, 3, Relevance::Single).unwrap();
        assert!((map - 5.0 / 6.0).abs() < 1e-12, "map {}", map);

        // All relevant retrieved: MAP = 1; precision examples.
        let all_rel = LabelSet::single([0, 0, 0]);
        assert_eq!(
            map_at_n(&q, &db, &qlabels, &all_rel, 3, Relevance::Single).unwrap(),
            1.0
        );
        assert_eq!(
            precision_at_n(&q, &db, &qlabels, &all_rel, 3, Relevance::Single).unwrap(),
            1.0
        );
        let none_rel = LabelSet::single([1, 1, 1]);
        assert_eq!(
            precision_at_n(&q, &db, &qlabels, &none_rel, 3, Relevance::Single).unwrap(),
            0.0
        );
        assert_eq!(
            map_at_n(&q, &db, &qlabels, &none_rel, 3, Relevance::Single).unwrap(),
            0.0
        );
    }

    #[test]
    fn map_matches_brute_force_oracle() {
        let db_codes = random_codes(500, 64, 14);
        let q_codes = random_codes(50, 64, 15);
        let db = PackedCodes::pack(&db_codes);
        let queries = PackedCodes::pack(&q_codes);
        let mut rng = rng_for(16, &[43]);
        let dblabels = LabelSet::single((0..500).map(|_| rng.gen_range(0..7u32)));
        let qlabels = LabelSet::single((0..50).map(|_| rng.gen_range(0..7u32)));
        let n = 25;

        let got = map_at_n(&queries, &db, &qlabels, &dblabels, n, Relevance::Single).unwrap();
        let got_p =
            precision_at_n(&queries, &db, &qlabels, &dblabels, n, Relevance::Single).unwrap();

        // Brute-force oracle: full sort per query, AP from first principles.
        let mut ap_sum = 0.0;
        let mut prec_sum = 0.0;
        for q in 0..50 {
            let mut all: Vec<(u32, usize)> = (0..500)
                .map(|i| (hamming_unchecked(queries.row(q), db.row(i)), i))
                .collect();
            all.sort_unstable();
            let qc = qlabels.single_class(q).unwrap();
            let mut hits = 0;
            let mut ap = 0.0;
            for (rank0, &(_, i)) in all.iter().take(n).enumerate() {
                if dblabels.single_class(i).unwrap() == qc {
                    hits += 1;
                    ap += hits as f64 / (rank0 + 1) as f64;
                }
            }
            if hits > 0 {
                ap_sum += ap / hits as f64;
            }
            prec_sum += hits as f64 / n as f64;
        }
        assert_eq!(got, ap_sum / 50.0);
        assert_eq!(got_p, prec_sum / 50.0);
    }

    #[test]
    fn map_monotone_under_relevance_upgrade() {
        let q = PackedCodes::pack(&DeterministicCode::from_bits(1, 4, vec![0, 0, 0, 0]));
        let db = PackedCodes::pack(&DeterministicCode::from_bits(
            3,
            4,
            vec![0, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0],
        ));
        let qlabels = LabelSet::single([0]);
        let before = map_at_n(
            &q,
            &db,
            &qlabels,
            &LabelSet::single([0, 1, 0]),
            3,
            Relevance::Single,
        )
        .unwrap();
        // Upgrade the irrelevant rank-2 item to relevant.
        let after = map_at_n(
            &q,
            &db,
            &qlabels,
            &LabelSet::single([0, 0, 0]),
            3,
            Relevance::Single,
        )
        .unwrap();
        assert!(after > before);
        assert!((0.0..=1.0).contains(&before) && (0.0..=1.0).contains(&after));
    }

    #[test]
    fn multi_label_relevance_uses_intersection() {
        let q = PackedCodes::pack(&DeterministicCode::from_bits(1, 2, vec![0, 0]));
        let db = PackedCodes::pack(&DeterministicCode::from_bits(2, 2, vec![0, 0, 1, 1]));
        let qlabels = LabelSet::from_raw(vec![vec![2, 5]]);
        let dblabels = LabelSet::from_raw(vec![vec![5, 9], vec![1, 3]]);
        let map = map_at_n(&q, &db, &qlabels, &dblabels, 2, Relevance::Multi).unwrap();
        assert_eq!(map, 1.0); // only item 0 relevant, retrieved at rank 1
    }

    #[test]
    fn pr_curve_conventions() {
        let q = PackedCodes::pack(&DeterministicCode::from_bits(1, 4, vec![0, 0, 0, 0]));
        let db = PackedCodes::pack(&DeterministicCode::from_bits(
            3,
            4,
            vec![0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1],
        ));
        let qlabels = LabelSet::single([0]);
        let dblabels = LabelSet::single([0, 0, 1]);
        let curve = pr_curve(&q, &db, &qlabels, &dblabels, Relevance::Single).unwrap();
        assert_eq!(curve.len(), 5);
        // Radius 0: only the exact match (relevant) retrieved.
        assert_eq!(curve[0].precision, 1.0);
        assert!((curve[0].recall - 0.5).abs() < 1e-12);
        // Radius D: everything retrieved, recall 1.
        assert_eq!(curve[4].recall, 1.0);
        assert!((curve[4].precision - 2.0 / 3.0).abs() < 1e-12);
        // Recall is non-decreasing.
        for w in curve.windows(2) {
            assert!(w[0].recall <= w[1].recall);
        }
    }

    #[test]
    fn pr_curve_matches_brute_force_radius_scan() {
        let db_codes = random_codes(80, 16, 20);
        let q_codes = random_codes(10, 16, 21);
        let db = PackedCodes::pack(&db_codes);
        let queries = PackedCodes::pack(&q_codes);
        let mut rng = rng_for(22, &[44]);
        let dblabels = LabelSet::single((0..80).map(|_| rng.gen_range(0..3u32)));
        let qlabels = LabelSet::single((0..10).map(|_| rng.gen_range(0..3u32)));

        let got = pr_curve(&queries, &db, &qlabels, &dblabels, Relevance::Single).unwrap();

        // Oracle: explicit set scan per radius.
        let mut want_p = [0.0; 17];
        let mut want_r = [0.0; 17];
        let mut counted = 0;
        for q in 0..10 {
            let qc = qlabels.single_class(q).unwrap();
            let relevant: Vec<usize> = (0..80)
                .filter(|&i| dblabels.single_class(i).unwrap() == qc)
                .collect();
            if relevant.is_empty() {
                continue;
            }
            counted += 1;
            for r in 0..=16u32 {
                let retrieved: Vec<usize> = (0..80)
                    .filter(|&i| hamming_unchecked(queries.row(q), db.row(i)) <= r)
                    .collect();
                let rel_ret = retrieved
                    .iter()
                    .filter(|&&i| dblabels.single_class(i).unwrap() == qc)
                    .count();
                want_p[r as usize] += if retrieved.is_empty() {
                    1.0
                } else {
                    rel_ret as f64 / retrieved.len() as f64
                };
                want_r[r as usize] += rel_ret as f64 / relevant.len() as f64;
            }
        }
        for r in 0..=16usize {
            assert!((got[r].precision - want_p[r] / counted as f64).abs() < 1e-12);
            assert!((got[r].recall - want_r[r] / counted as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn code_file_round_trip() {
        let codes = random_codes(64, 77, 30);
        let packed = PackedCodes::pack(&codes);
        let file = tempfile::NamedTempFile::new().unwrap();
        packed.save(file.path()).unwrap();
        let back = PackedCodes::load(file.path()).unwrap();
        assert_eq!(back, packed);

        // Wrong magic.
        fs::write(file.path(), b"WXYZ").unwrap();
        assert!(matches!(
            PackedCodes::load(file.path()),
            Err(Error::BadMagic { .. })
        ));
    }
}
