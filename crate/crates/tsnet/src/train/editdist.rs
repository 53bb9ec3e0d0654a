//! Levenshtein distance and alignment scripts with fixed tie-breaking.

/// One step of an alignment script transforming the reference into the
/// hypothesis. Indices are (reference, hypothesis) positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match(usize, usize),
    Substitute(usize, usize),
    /// Reference symbol at this index has no counterpart.
    Delete(usize),
    /// Hypothesis symbol at this index has no counterpart.
    Insert(usize),
}

impl AlignOp {
    pub fn cost(self) -> usize {
        match self {
            AlignOp::Match(..) => 0,
            _ => 1,
        }
    }
}

fn dp_table<T: PartialEq>(a: &[T], b: &[T], gap: usize) -> Vec<Vec<usize>> {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i * gap;
    }
    for j in 0..=m {
        d[0][j] = j * gap;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            let del = d[i - 1][j] + gap;
            let ins = d[i][j - 1] + gap;
            d[i][j] = sub.min(del).min(ins);
        }
    }
    d
}

fn backtrace<T: PartialEq>(d: &[Vec<usize>], a: &[T], b: &[T], gap: usize) -> Vec<AlignOp> {
    let mut ops = Vec::new();
    let (mut i, mut j) = (a.len(), b.len());
    while i > 0 || j > 0 {
        let cur = d[i][j];
        if i > 0 && j > 0 {
            let diag = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            if diag == cur {
                ops.push(if a[i - 1] == b[j - 1] {
                    AlignOp::Match(i - 1, j - 1)
                } else {
                    AlignOp::Substitute(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i - 1][j] + gap == cur {
            ops.push(AlignOp::Delete(i - 1));
            i -= 1;
            continue;
        }
        ops.push(AlignOp::Insert(j - 1));
        j -= 1;
    }
    ops.reverse();
    ops
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // One-row rolling variant of the table in dp_table.
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// One optimal unit-cost script, deterministic: on cost ties the backtrace
/// prefers substitution/match over deletion over insertion.
pub fn align<T: PartialEq>(a: &[T], b: &[T]) -> Vec<AlignOp> {
    backtrace(&dp_table(a, b, 1), a, b, 1)
}

/// Like `align` but with gaps costing two while substitutions cost one.
/// Under unit costs a deletion/insertion pair beats substitutions as soon
/// as it exposes a shifted common run of two, so strings that disagree at
/// almost every position (say one is a character-wise relabeling of the
/// other) pick up spurious indels wherever such runs occur by chance. The
/// heavier gaps keep those positions paired as substitutions unless the
/// shifted run is at least four long.
pub fn align_weighted<T: PartialEq>(a: &[T], b: &[T]) -> Vec<AlignOp> {
    backtrace(&dp_table(a, b, 2), a, b, 2)
}

/// Character error rate: total edits over total reference length.
pub fn cer(pairs: &[(usize, usize)]) -> f64 {
    let edits: usize = pairs.iter().map(|&(e, _)| e).sum();
    let refs: usize = pairs.iter().map(|&(_, r)| r).sum();
    if refs == 0 {
        if edits == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        edits as f64 / refs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ed(a: &str, b: &str) -> usize {
        let av: Vec<char> = a.chars().collect();
        let bv: Vec<char> = b.chars().collect();
        edit_distance(&av, &bv)
    }

    #[test]
    fn known_distances() {
        assert_eq!(ed("abc", "abc"), 0);
        assert_eq!(ed("kitten", "sitting"), 3);
        assert_eq!(ed("", "ab"), 2);
        assert_eq!(ed("ab", ""), 2);
        assert_eq!(ed("abcd", "abed"), 1);
        assert_eq!(ed("flaw", "lawn"), 2);
    }

    #[test]
    fn align_cost_matches_distance_and_script_is_valid() {
        let cases = [
            ("kitten", "sitting"),
            ("", "xyz"),
            ("same", "same"),
            ("abcabc", "cbacba"),
        ];
        for (a, b) in cases {
            let av: Vec<char> = a.chars().collect();
            let bv: Vec<char> = b.chars().collect();
            let ops = align(&av, &bv);
            let cost: usize = ops.iter().map(|o| o.cost()).sum();
            assert_eq!(cost, edit_distance(&av, &bv), "{a} vs {b}");
            // Replaying the script must reproduce the hypothesis.
            let mut out = Vec::new();
            for op in &ops {
                match *op {
                    AlignOp::Match(i, j) | AlignOp::Substitute(i, j) => {
                        assert_eq!(av.get(i).is_some(), true);
                        out.push(bv[j]);
                    }
                    AlignOp::Delete(_) => {}
                    AlignOp::Insert(j) => out.push(bv[j]),
                }
            }
            assert_eq!(out, bv, "{a} vs {b}");
        }
    }

    #[test]
    fn ties_prefer_substitution_over_indels() {
        let a: Vec<char> = "ab".chars().collect();
        let b: Vec<char> = "ba".chars().collect();
        let ops = align(&a, &b);
        assert_eq!(
            ops,
            vec![AlignOp::Substitute(0, 0), AlignOp::Substitute(1, 1)]
        );
        // The trace walks from the tail, so the kept copy of a repeated
        // character is the last one.
        let a: Vec<char> = "aa".chars().collect();
        let b: Vec<char> = "a".chars().collect();
        assert_eq!(align(&a, &b), vec![AlignOp::Delete(0), AlignOp::Match(1, 0)]);
    }

    #[test]
    fn weighted_alignment_keeps_relabelings_on_the_diagonal() {
        // "abc" vs "bca" shares the shifted run "bc"; unit costs reach it
        // with one deletion and one insertion (cost 2) instead of three
        // substitutions (cost 3).
        let a: Vec<char> = "abc".chars().collect();
        let b: Vec<char> = "bca".chars().collect();
        assert_eq!(
            align(&a, &b),
            vec![
                AlignOp::Delete(0),
                AlignOp::Match(1, 0),
                AlignOp::Match(2, 1),
                AlignOp::Insert(2),
            ]
        );
        // With gaps at two the pair costs 4 and the diagonal wins.
        assert_eq!(
            align_weighted(&a, &b),
            vec![
                AlignOp::Substitute(0, 0),
                AlignOp::Substitute(1, 1),
                AlignOp::Substitute(2, 2),
            ]
        );
        // Genuine drops still align as deletions.
        let a: Vec<char> = "xyz".chars().collect();
        let b: Vec<char> = "xz".chars().collect();
        assert_eq!(
            align_weighted(&a, &b),
            vec![AlignOp::Match(0, 0), AlignOp::Delete(1), AlignOp::Match(2, 1)]
        );
    }

    #[test]
    fn cer_arithmetic() {
        assert_eq!(cer(&[(1, 4)]), 0.25);
        assert_eq!(cer(&[(0, 3), (0, 5)]), 0.0);
        assert_eq!(cer(&[(2, 4), (1, 4)]), 0.375);
        assert_eq!(cer(&[]), 0.0);
        assert!(cer(&[(1, 0)]).is_infinite());
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in "[ab]{0,8}", b in "[ab]{0,8}", c in "[ab]{0,8}") {
            let av: Vec<char> = a.chars().collect();
            let bv: Vec<char> = b.chars().collect();
            let cv: Vec<char> = c.chars().collect();
            let ab = edit_distance(&av, &bv);
            let ba = edit_distance(&bv, &av);
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(edit_distance(&av, &av), 0);
            let ac = edit_distance(&av, &cv);
            let cb = edit_distance(&cv, &bv);
            prop_assert!(ab <= ac + cb);
            prop_assert!(ab <= av.len().max(bv.len()));
        }

        #[test]
        fn align_always_replays(a in "[abc]{0,6}", b in "[abc]{0,6}") {
            let av: Vec<char> = a.chars().collect();
            let bv: Vec<char> = b.chars().collect();
            let ops = align(&av, &bv);
            let cost: usize = ops.iter().map(|o| o.cost()).sum();
            prop_assert_eq!(cost, edit_distance(&av, &bv));
        }

        #[test]
        fn weighted_align_scripts_are_valid(a in "[abc]{0,6}", b in "[abc]{0,6}") {
            let av: Vec<char> = a.chars().collect();
            let bv: Vec<char> = b.chars().collect();
            let ops = align_weighted(&av, &bv);
            // The script consumes both strings exactly once, in order.
            let mut i = 0;
            let mut out = Vec::new();
            for op in &ops {
                match *op {
                    AlignOp::Match(p, q) | AlignOp::Substitute(p, q) => {
                        prop_assert_eq!(p, i);
                        i += 1;
                        out.push(bv[q]);
                        if let AlignOp::Match(..) = op {
                            prop_assert_eq!(av[p], bv[q]);
                        } else {
                            prop_assert_ne!(av[p], bv[q]);
                        }
                    }
                    AlignOp::Delete(p) => {
                        prop_assert_eq!(p, i);
                        i += 1;
                    }
                    AlignOp::Insert(q) => out.push(bv[q]),
                }
            }
            prop_assert_eq!(i, av.len());
            prop_assert_eq!(out, bv);
        }
    }
}
